#include "snlp/prng.hpp"

#include <cmath>
#include <stdexcept>

namespace snlp {

float Prng::next_gaussian() {
  if (have_cached_) {
    have_cached_ = false;
    return cached_;
  }
  // u1 in (0, 1] so the log is finite.
  double u1 = 1.0 - next_unit();
  double u2 = next_unit();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  cached_ = static_cast<float>(r * std::sin(theta));
  have_cached_ = true;
  return static_cast<float>(r * std::cos(theta));
}

int Prng::next_int(int n) {
  if (n <= 0) throw std::invalid_argument("Prng::next_int: n must be positive");
  // Rejection-free modulo is fine here: n is tiny relative to 2^64, and the
  // stream only has to be deterministic, not perfectly equidistributed.
  return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

}  // namespace snlp
