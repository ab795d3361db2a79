#pragma once

namespace uconv::cli {

// Full command-line surface. Exit codes: 0 success, 1 usage error,
// 2 validation or property failure, 3 I/O error.
int cli_main(int argc, const char* const* argv);

}  // namespace uconv::cli
