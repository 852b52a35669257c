#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "snlp/matrix.hpp"
#include "snlp/model.hpp"
#include "snlp/solver.hpp"

namespace snlp {

// Maps a token sequence to per-position logits (seq x vocab).
using ForwardFn = std::function<Matrix(const std::vector<int>&)>;

// Greedy token choice with ties broken by the lowest id; non-finite entries
// never win, so a ruined logit row still yields a deterministic token.
inline int argmax_token(const float* logits, int n) {
  int best = 0;
  float best_val = -std::numeric_limits<float>::infinity();
  bool any = false;
  for (int i = 0; i < n; ++i) {
    if (!std::isfinite(logits[i])) continue;
    if (!any || logits[i] > best_val) {
      any = true;
      best = i;
      best_val = logits[i];
    }
  }
  return best;
}

// T tokens, each the argmax of the callback's last-position logits on the
// growing sequence.
std::vector<int> greedy_generate(const ForwardFn& forward, const std::vector<int>& prompt, int t);

// ((1 - alpha^(B+1)) / (1 - alpha)) / (B/s + 1); alpha = 1 via the limit
// B+1 in the numerator.
double ssd_ideal_speedup(double s, int b, double alpha);

struct SsdConfig {
  int block_size = 4;   // B drafts per round
  int max_tokens = 32;  // generation length
  SnlpConfig drafter;   // the verifier is always the sequential forward
};

struct SsdStats {
  // Acceptance under both estimator conventions: pooled over all judged
  // drafts, and the mean of per-round rates (rounds with proposals only).
  double alpha = 0.0;
  double alpha_round_mean = 0.0;
  // Tokens appended per round including the correction/bonus token, and
  // accepted drafts alone.
  double tokens_per_round = 0.0;
  double accepted_per_round = 0.0;
  long long rounds = 0;
  long long fallback_rounds = 0;  // drafter divergence -> one sequential step
  long long draft_forwards = 0;
  long long verify_forwards = 0;
  // Raw counts behind the ratios, so multiple runs can be pooled exactly.
  long long judged_drafts = 0;
  long long accepted_drafts = 0;
  long long appended_tokens = 0;
  double drafter_speedup = 0.0;  // critical-path speedup of the drafter config
  double ideal_speedup = 0.0;    // ssd_ideal_speedup(drafter_speedup, B, alpha)
};

// Drafts with the solver's forward, verifies each block with one sequential
// forward, and accepts the longest agreeing prefix plus the verifier's
// correction or bonus token. The emitted tokens equal sequential greedy
// output by construction.
std::pair<std::vector<int>, SsdStats> self_speculative_decode(
    const ModelWeights& w, const SsdConfig& cfg, const std::vector<int>& prompt,
    const PreheatPredictor* preheat = nullptr);

struct JacobiStats {
  double match_rate = 0.0;  // vs. a reference decode; filled by the caller
  double accept_per_iter = 0.0;
  double jd_iters = 0.0;  // mean sweeps a token spent in the window before committing
  long long forward_passes = 0;
  bool hit_iteration_cap = false;
};

// Fixed-point iteration on a sliding draft window: one forward refreshes
// every draft to its greedy choice under the current left context, then the
// longest left-stable prefix commits. The first window slot's context is
// fully committed, so it always commits; W=1 therefore reduces to
// greedy_generate with exactly T forwards. Iterations are capped at W*T.
std::pair<std::vector<int>, JacobiStats> jacobi_decode(const ForwardFn& forward,
                                                       const std::vector<int>& prompt, int t,
                                                       int window);

}  // namespace snlp
