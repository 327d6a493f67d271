#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mgrid/common.hpp"
#include "mgrid/version.hpp"

/**
 * Result tables serialized as CSV: one header row of column names, one row
 * of units, data rows, and a final provenance row tying the file to the
 * scenario content, the seed, and the code version. Fields are quoted per
 * RFC 4180 and records end in CRLF, so the output is bytewise reproducible.
 */
namespace mgrid {

struct ResultTable {
  std::vector<std::string> columns;
  std::vector<std::string> units;
  std::vector<std::vector<std::string>> rows;
  std::string scenario_hash;
  uint64_t seed = 0;

  ResultTable(std::vector<std::string> cols, std::vector<std::string> us)
      : columns(std::move(cols)), units(std::move(us)) {
    require(columns.size() == units.size() && !columns.empty(),
            ErrorCode::invalid_parameter,
            "every column needs exactly one unit label");
  }

  void add_row(std::vector<std::string> row) {
    require(row.size() == columns.size(), ErrorCode::invalid_parameter,
            "row width does not match the column count");
    rows.push_back(std::move(row));
  }

  /// Deterministic numeric formatting shared by all outputs.
  static std::string field(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
  }

  static std::string field(Index v) { return std::to_string(v); }

  static std::string field(int v) { return std::to_string(v); }

  std::string to_csv() const {
    std::string out;
    append_record(out, columns);
    append_record(out, units);
    for (const auto& row : rows) append_record(out, row);
    const std::vector<std::string> footer = {
        "# scenario=" + scenario_hash + " seed=" + std::to_string(seed) +
        " version=" + kVersion};
    append_record(out, footer);
    return out;
  }

  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), ErrorCode::io_error, "cannot open for writing: " + path);
    const std::string body = to_csv();
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    require(f.good(), ErrorCode::io_error, "write failed: " + path);
  }

 private:
  static bool needs_quoting(const std::string& s) {
    return s.find_first_of(",\"\r\n") != std::string::npos;
  }

  static void append_record(std::string& out,
                            const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      if (needs_quoting(fields[i])) {
        out += '"';
        for (char c : fields[i]) {
          out += c;
          if (c == '"') out += '"';
        }
        out += '"';
      } else {
        out += fields[i];
      }
    }
    out += "\r\n";
  }
};

}  // namespace mgrid
