#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

/**
 * Shared scalar/matrix aliases and the error taxonomy used across the
 * microgrid simulation and estimation toolkit.
 *
 * Conventions used throughout the library:
 *  - voltages in volts, powers in watts, conductances in siemens;
 *  - slot-major matrices: a quantity sampled over T slots on N buses is a
 *    T x N matrix whose column-major vectorization stacks one bus's full
 *    slot history after another's (entry index n*T + t for 0-based n, t);
 *  - bus indices are 0-based in code, 1-based in configs and reports.
 */
namespace mgrid {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Eigen::Index;

/// Machine-readable failure categories mirrored by the CLI exit codes.
enum class ErrorCode {
  invalid_topology,
  invalid_parameter,
  non_convergence,
  zero_voltage_collapse,
  insufficient_excitation,
  too_few_slots,
  excitation_not_found,
  near_zero_channel,
  max_iter_exceeded,
  config_error,
  io_error,
};

/// Base exception for every failure the toolkit raises deliberately.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline const char* to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::invalid_topology: return "InvalidTopology";
    case ErrorCode::invalid_parameter: return "InvalidParameter";
    case ErrorCode::non_convergence: return "NonConvergence";
    case ErrorCode::zero_voltage_collapse: return "ZeroVoltageCollapse";
    case ErrorCode::insufficient_excitation: return "InsufficientExcitation";
    case ErrorCode::too_few_slots: return "TooFewSlots";
    case ErrorCode::excitation_not_found: return "ExcitationNotFound";
    case ErrorCode::near_zero_channel: return "NearZeroChannel";
    case ErrorCode::max_iter_exceeded: return "MaxIterExceeded";
    case ErrorCode::config_error: return "ConfigError";
    case ErrorCode::io_error: return "IoError";
  }
  return "UnknownError";
}

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, std::string(to_string(code)) + ": " + msg);
}

inline void require(bool ok, ErrorCode code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

}  // namespace mgrid
