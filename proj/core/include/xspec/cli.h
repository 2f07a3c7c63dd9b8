#pragma once

namespace xspec {

// Entry point behind the `xspec` binary. Exit codes: 0 success, 1 usage,
// 2 I/O failure, 3 numerical failure.
int cli_main(int argc, char** argv);

}  // namespace xspec
