#pragma once

namespace mgrid {

/// Toolkit version stamped into every CSV provenance footer.
inline constexpr const char* kVersion = "1.0.0";

}  // namespace mgrid
