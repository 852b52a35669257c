#include "snlp/tokens.hpp"

#include <algorithm>
#include <stdexcept>

#include "snlp/prng.hpp"

namespace snlp {

std::vector<int> uniform_token_stream(int n, int vocab_size, std::uint64_t seed) {
  if (n < 0 || vocab_size < 1)
    throw std::invalid_argument("uniform_token_stream: bad length or vocab");
  Prng prng(seed);
  std::vector<int> out(n);
  for (int i = 0; i < n; ++i) out[i] = prng.next_int(vocab_size);
  return out;
}

std::vector<int> markov_token_stream(int n, int vocab_size, std::uint64_t seed) {
  if (n < 0 || vocab_size < 1)
    throw std::invalid_argument("markov_token_stream: bad length or vocab");
  Prng prng(seed);

  // Per-state transition CDF: 85% of the mass spread over up to four
  // preferred successors, the rest uniform.
  const int n_preferred = std::min(4, vocab_size);
  std::vector<std::vector<double>> cdf(vocab_size, std::vector<double>(vocab_size));
  for (int s = 0; s < vocab_size; ++s) {
    std::vector<double> probs(vocab_size, 0.15 / vocab_size);
    for (int k = 0; k < n_preferred; ++k) probs[prng.next_int(vocab_size)] += 0.85 / n_preferred;
    double acc = 0.0;
    for (int v = 0; v < vocab_size; ++v) {
      acc += probs[v];
      cdf[s][v] = acc;
    }
    cdf[s][vocab_size - 1] = 1.0;
  }

  std::vector<int> out(n);
  int state = prng.next_int(vocab_size);
  for (int i = 0; i < n; ++i) {
    const double u = prng.next_unit();
    const auto& row = cdf[state];
    state = static_cast<int>(std::lower_bound(row.begin(), row.end(), u) - row.begin());
    if (state >= vocab_size) state = vocab_size - 1;
    out[i] = state;
  }
  return out;
}

}  // namespace snlp
