#pragma once

namespace mtv::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 2;
inline constexpr int kConfig = 3;
inline constexpr int kFingerprint = 4;
inline constexpr int kFormat = 5;
inline constexpr int kFailure = 6;

/// Whole CLI, callable in-process. Errors are reported as one line on stderr.
int run(int argc, const char* const* argv);

}  // namespace mtv::cli
