#pragma once

namespace snlp {

// Applies the SNLP_NUM_THREADS cap (if set and positive) to the OpenMP
// runtime. Call once at process start; a no-op in builds without OpenMP.
void apply_thread_env();

// Threads the parallel regions will use after apply_thread_env.
int configured_threads();

// Forces an explicit thread count (used by the benchmark to compare serial
// and parallel runs of the same kernels).
void set_threads(int n);

}  // namespace snlp
