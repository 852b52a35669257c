#pragma once

#include <vector>

#include "snlp/matrix.hpp"
#include "snlp/model.hpp"

namespace snlp {

struct CrossEntropyResult {
  double ce = 0.0;   // mean negative log-softmax of the target class, nats/token
  double ppl = 0.0;  // exp(ce)
};

// logits row t scores the class targets[t]; rows and targets must pair up.
CrossEntropyResult cross_entropy_ppl(const Matrix& logits, const std::vector<int>& targets);

struct AgreementReport {
  double top1_match_rate = 0.0;  // fraction of positions with equal argmax
  double logit_cosine = 0.0;     // mean per-position cosine similarity
  // Fraction of matching tokens between two greedy generations; filled by
  // callers that run the decodes (see token_match_rate).
  double ar_match_rate = 0.0;
};

AgreementReport agreement(const Matrix& logits_a, const Matrix& logits_b);

double token_match_rate(const std::vector<int>& a, const std::vector<int>& b);

// Per-suffix-layer substitution-error statistics. For layer output index
// l = S+1..L (entry l-S-1), with g_l(x) = f_l(x) - x the residual update:
//   eps_l      = g_l(h_{l-1}^seq) - g_l(h_S)              (per position)
//   eps_abs    = E_t ||eps_l|| / (E_t ||h_S|| + 1e-8)
//   cumulative = E_t ||sum_{r<=l} eps_r|| / (E_t ||h_S|| + 1e-8)
//   delta_g    = E_t ||eps_l|| / (E_t ||g_l(h_S)|| + 1e-8)
// Expectations are over token positions.
struct SubstitutionReport {
  int prefix_len = 0;
  std::vector<double> eps_abs;
  std::vector<double> cumulative;
  std::vector<double> delta_g;
};

// Standard variant only: the residual form f(x) = x + g(x) is what defines g.
SubstitutionReport substitution_report(const ModelWeights& w, const std::vector<int>& tokens,
                                       int prefix_len);

// Expected per-draft acceptance implied by a per-token agreement rate beta
// under the absorbing-divergence model: alpha = beta(1-beta^T)/(T(1-beta)),
// with the beta -> 1 limit equal to 1.
double alpha_from_beta(double beta, int t);

// Inverse of alpha_from_beta by bisection on [0, 1] to 1e-8.
double beta_from_alpha(double alpha, int t);

// Readout of the intermediate state h_S; identical to a K=0, h0-initialized
// solve with prefix S.
Matrix early_exit_logits(const ModelWeights& w, const HiddenTrace& trace, int prefix_len);

}  // namespace snlp
