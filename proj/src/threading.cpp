#include "snlp/threading.hpp"

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace snlp {

void apply_thread_env() {
#ifdef _OPENMP
  const char* env = std::getenv("SNLP_NUM_THREADS");
  if (env == nullptr) return;
  try {
    int n = std::stoi(std::string(env));
    if (n > 0) omp_set_num_threads(n);
  } catch (...) {
    // Malformed values leave the runtime default in place.
  }
#endif
}

int configured_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace snlp
