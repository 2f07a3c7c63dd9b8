#pragma once

namespace xspec {

// Caps both the OpenMP pool and Eigen's GEMM threads. 0 picks the
// hardware default. Training determinism is guaranteed within one fixed
// thread-count configuration; pass 1 for the strict single-threaded mode.
void set_num_threads(int n);

int num_threads();

}  // namespace xspec
