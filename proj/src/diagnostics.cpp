#include "snlp/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "snlp/decoding.hpp"

namespace snlp {

CrossEntropyResult cross_entropy_ppl(const Matrix& logits, const std::vector<int>& targets) {
  if (logits.rows == 0) throw std::invalid_argument("cross_entropy_ppl: no logit rows");
  if (static_cast<int>(targets.size()) != logits.rows)
    throw std::invalid_argument("cross_entropy_ppl: " + std::to_string(logits.rows) +
                                " logit rows vs " + std::to_string(targets.size()) + " targets");
  double total = 0.0;
  for (int t = 0; t < logits.rows; ++t) {
    const int target = targets[t];
    if (target < 0 || target >= logits.cols)
      throw std::invalid_argument("cross_entropy_ppl: target " + std::to_string(target) +
                                  " outside vocab of " + std::to_string(logits.cols));
    const float* row = logits.row(t);
    double max_logit = row[0];
    for (int c = 1; c < logits.cols; ++c) max_logit = std::max(max_logit, static_cast<double>(row[c]));
    double denom = 0.0;
    for (int c = 0; c < logits.cols; ++c) denom += std::exp(static_cast<double>(row[c]) - max_logit);
    total += std::log(denom) - (static_cast<double>(row[target]) - max_logit);
  }
  CrossEntropyResult res;
  res.ce = total / logits.rows;
  res.ppl = std::exp(res.ce);
  return res;
}

AgreementReport agreement(const Matrix& logits_a, const Matrix& logits_b) {
  if (!logits_a.same_shape(logits_b))
    throw std::invalid_argument("agreement: logit shapes differ");
  if (logits_a.rows == 0) throw std::invalid_argument("agreement: no logit rows");
  AgreementReport rep;
  long long matches = 0;
  double cosine_total = 0.0;
  for (int t = 0; t < logits_a.rows; ++t) {
    const float* a = logits_a.row(t);
    const float* b = logits_b.row(t);
    if (argmax_token(a, logits_a.cols) == argmax_token(b, logits_b.cols)) ++matches;
    const double na = l2_norm(a, logits_a.cols);
    const double nb = l2_norm(b, logits_b.cols);
    if (na < 1e-30 || nb < 1e-30)
      cosine_total += (na < 1e-30 && nb < 1e-30) ? 1.0 : 0.0;
    else
      cosine_total += dot64(a, b, logits_a.cols) / (na * nb);
  }
  rep.top1_match_rate = static_cast<double>(matches) / logits_a.rows;
  rep.logit_cosine = cosine_total / logits_a.rows;
  return rep;
}

double token_match_rate(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("token_match_rate: sequence lengths differ");
  if (a.empty()) throw std::invalid_argument("token_match_rate: empty sequences");
  long long matches = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] == b[i]) ++matches;
  return static_cast<double>(matches) / static_cast<double>(a.size());
}

SubstitutionReport substitution_report(const ModelWeights& w, const std::vector<int>& tokens,
                                       int prefix_len) {
  if (w.config.variant != Variant::Standard)
    throw std::invalid_argument("substitution_report: defined for the standard residual form only");
  const int n_layers = w.config.n_layers;
  if (prefix_len < 0 || prefix_len >= n_layers)
    throw std::invalid_argument("substitution_report: prefix length out of range");

  const HiddenTrace trace = sequential_forward(w, tokens);
  const HiddenState& h_s = trace.states[prefix_len];
  const int seq = h_s.rows;
  const int d = h_s.cols;
  const int n_suffix = n_layers - prefix_len;

  double h_s_norm_mean = 0.0;
  for (int t = 0; t < seq; ++t) h_s_norm_mean += l2_norm(h_s.row(t), d);
  h_s_norm_mean /= seq;

  SubstitutionReport rep;
  rep.prefix_len = prefix_len;
  Matrix eps_sum(seq, d);  // running per-position sum of eps_r
  for (int i = 0; i < n_suffix; ++i) {
    const int layer = prefix_len + i;  // 0-based; produces h_{layer+1}
    const HiddenState at_seq = block_forward(w, layer, trace.states[layer]);
    const HiddenState at_prefix = block_forward(w, layer, h_s);
    double eps_norm_mean = 0.0;
    double g_prefix_norm_mean = 0.0;
    double cum_norm_mean = 0.0;
    for (int t = 0; t < seq; ++t) {
      double eps_sq = 0.0;
      double g_sq = 0.0;
      float* acc = eps_sum.row(t);
      for (int c = 0; c < d; ++c) {
        const double g_seq = static_cast<double>(at_seq.at(t, c)) -
                             static_cast<double>(trace.states[layer].at(t, c));
        const double g_pre =
            static_cast<double>(at_prefix.at(t, c)) - static_cast<double>(h_s.at(t, c));
        const double e = g_seq - g_pre;
        eps_sq += e * e;
        g_sq += g_pre * g_pre;
        acc[c] = static_cast<float>(static_cast<double>(acc[c]) + e);
      }
      eps_norm_mean += std::sqrt(eps_sq);
      g_prefix_norm_mean += std::sqrt(g_sq);
      cum_norm_mean += l2_norm(acc, d);
    }
    eps_norm_mean /= seq;
    g_prefix_norm_mean /= seq;
    cum_norm_mean /= seq;
    rep.eps_abs.push_back(eps_norm_mean / (h_s_norm_mean + 1e-8));
    rep.cumulative.push_back(cum_norm_mean / (h_s_norm_mean + 1e-8));
    rep.delta_g.push_back(eps_norm_mean / (g_prefix_norm_mean + 1e-8));
  }
  return rep;
}

double alpha_from_beta(double beta, int t) {
  if (t < 1) throw std::invalid_argument("alpha_from_beta: T must be >= 1");
  if (!(beta >= 0.0 && beta <= 1.0))
    throw std::invalid_argument("alpha_from_beta: beta must lie in [0, 1]");
  if (beta == 1.0) return 1.0;
  if (beta == 0.0) return 0.0;
  return beta * (1.0 - std::pow(beta, t)) / (t * (1.0 - beta));
}

double beta_from_alpha(double alpha, int t) {
  if (t < 1) throw std::invalid_argument("beta_from_alpha: T must be >= 1");
  if (!(alpha > 0.0 && alpha <= 1.0))
    throw std::invalid_argument("beta_from_alpha: alpha must lie in (0, 1]");
  if (alpha == 1.0) return 1.0;
  double lo = 0.0, hi = 1.0;
  while (hi - lo > 1e-8) {
    const double mid = 0.5 * (lo + hi);
    if (alpha_from_beta(mid, t) < alpha)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

Matrix early_exit_logits(const ModelWeights& w, const HiddenTrace& trace, int prefix_len) {
  if (prefix_len < 0 || prefix_len >= static_cast<int>(trace.states.size()))
    throw std::invalid_argument("early_exit_logits: prefix length outside the trace");
  return readout_logits(w, trace.states[prefix_len]);
}

}  // namespace snlp
