#pragma once

namespace chorus::cli {

// Full command-line entry point; returns the process exit code.
// 0 success, 2 bad input or config, 3 backend capability/transport failure,
// 4 partial result written.
int run_cli(int argc, const char* const* argv);

}  // namespace chorus::cli
