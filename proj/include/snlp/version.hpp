#pragma once

namespace snlp {

// Written into every results CSV row so output files can be tied to the
// code revision that produced them.
inline constexpr const char* kArtifactVersion = "snlp-0.1.0";

}  // namespace snlp
