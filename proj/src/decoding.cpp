#include "snlp/decoding.hpp"

#include <algorithm>
#include <stdexcept>

namespace snlp {

std::vector<int> greedy_generate(const ForwardFn& forward, const std::vector<int>& prompt, int t) {
  if (prompt.empty()) throw std::invalid_argument("greedy_generate: empty prompt");
  if (t < 0) throw std::invalid_argument("greedy_generate: negative token count");
  std::vector<int> seq = prompt;
  std::vector<int> out;
  out.reserve(t);
  for (int i = 0; i < t; ++i) {
    const Matrix logits = forward(seq);
    const int tok = argmax_token(logits.row(logits.rows - 1), logits.cols);
    out.push_back(tok);
    seq.push_back(tok);
  }
  return out;
}

double ssd_ideal_speedup(double s, int b, double alpha) {
  if (s <= 0.0) throw std::invalid_argument("ssd_ideal_speedup: drafter speedup must be > 0");
  if (b < 1) throw std::invalid_argument("ssd_ideal_speedup: block size must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw std::invalid_argument("ssd_ideal_speedup: alpha must lie in [0, 1]");
  const double denom = static_cast<double>(b) / s + 1.0;
  const double expected_tokens =
      alpha == 1.0 ? static_cast<double>(b + 1)
                   : (1.0 - std::pow(alpha, b + 1)) / (1.0 - alpha);
  return expected_tokens / denom;
}

std::pair<std::vector<int>, SsdStats> self_speculative_decode(const ModelWeights& w,
                                                              const SsdConfig& cfg,
                                                              const std::vector<int>& prompt,
                                                              const PreheatPredictor* preheat) {
  if (prompt.empty()) throw std::invalid_argument("self_speculative_decode: empty prompt");
  if (cfg.block_size < 1)
    throw std::invalid_argument("self_speculative_decode: block size must be >= 1");
  if (cfg.max_tokens < 0)
    throw std::invalid_argument("self_speculative_decode: negative token budget");
  cfg.drafter.validate(w.config);
  if (static_cast<int>(prompt.size()) + cfg.max_tokens + cfg.block_size > w.config.max_seq_len)
    throw std::invalid_argument(
        "self_speculative_decode: prompt + generation + draft block exceeds max_seq_len");

  SsdStats stats;
  std::vector<int> seq = prompt;
  std::vector<int> out;
  out.reserve(cfg.max_tokens);

  long long judged_drafts = 0;
  long long accepted_drafts = 0;
  long long appended_total = 0;
  double round_alpha_sum = 0.0;
  long long rounds_with_proposals = 0;

  const auto verifier_logits = [&](const std::vector<int>& tokens) {
    ++stats.verify_forwards;
    return readout_logits(w, sequential_forward(w, tokens).states.back());
  };

  while (static_cast<int>(out.size()) < cfg.max_tokens) {
    const int remaining = cfg.max_tokens - static_cast<int>(out.size());
    const int b = std::min(cfg.block_size, remaining);

    std::vector<int> drafts;
    drafts.reserve(b);
    bool drafter_ok = true;
    std::vector<int> extended = seq;
    for (int i = 0; i < b; ++i) {
      const SuffixSolveResult draft_res = snlp_solve(w, extended, cfg.drafter, preheat);
      ++stats.draft_forwards;
      const float* last_row = draft_res.logits.row(draft_res.logits.rows - 1);
      bool finite = !draft_res.diverged;
      for (int c = 0; finite && c < draft_res.logits.cols; ++c)
        if (!std::isfinite(last_row[c])) finite = false;
      if (!finite) {
        drafter_ok = false;
        break;
      }
      const int tok = argmax_token(last_row, draft_res.logits.cols);
      drafts.push_back(tok);
      extended.push_back(tok);
    }

    ++stats.rounds;
    if (!drafter_ok) {
      // Diverged drafter: fall back to one plain sequential step.
      ++stats.fallback_rounds;
      const Matrix logits = verifier_logits(seq);
      const int tok = argmax_token(logits.row(logits.rows - 1), logits.cols);
      out.push_back(tok);
      seq.push_back(tok);
      ++appended_total;
      continue;
    }

    const Matrix vlogits = verifier_logits(extended);
    const int base = static_cast<int>(seq.size());
    int appended = 0;
    int accepted = 0;
    int judged = 0;
    bool all_accepted = true;
    for (int i = 0; i < b && appended < remaining; ++i) {
      const int true_tok = argmax_token(vlogits.row(base - 1 + i), vlogits.cols);
      ++judged;
      if (true_tok == drafts[i]) {
        ++accepted;
        out.push_back(true_tok);
        seq.push_back(true_tok);
        ++appended;
      } else {
        all_accepted = false;
        out.push_back(true_tok);
        seq.push_back(true_tok);
        ++appended;
        break;
      }
    }
    if (all_accepted && accepted == b && appended < remaining) {
      const int bonus = argmax_token(vlogits.row(base - 1 + b), vlogits.cols);
      out.push_back(bonus);
      seq.push_back(bonus);
      ++appended;
    }
    judged_drafts += judged;
    accepted_drafts += accepted;
    appended_total += appended;
    if (judged > 0) {
      round_alpha_sum += static_cast<double>(accepted) / judged;
      ++rounds_with_proposals;
    }
  }

  stats.judged_drafts = judged_drafts;
  stats.accepted_drafts = accepted_drafts;
  stats.appended_tokens = appended_total;
  stats.alpha = judged_drafts > 0 ? static_cast<double>(accepted_drafts) / judged_drafts : 0.0;
  stats.alpha_round_mean =
      rounds_with_proposals > 0 ? round_alpha_sum / rounds_with_proposals : 0.0;
  stats.tokens_per_round =
      stats.rounds > 0 ? static_cast<double>(appended_total) / stats.rounds : 0.0;
  stats.accepted_per_round =
      stats.rounds > 0 ? static_cast<double>(accepted_drafts) / stats.rounds : 0.0;
  stats.drafter_speedup = critical_path_speedup(w.config.n_layers, cfg.drafter);
  stats.ideal_speedup = ssd_ideal_speedup(stats.drafter_speedup, cfg.block_size, stats.alpha);
  return {std::move(out), stats};
}

std::pair<std::vector<int>, JacobiStats> jacobi_decode(const ForwardFn& forward,
                                                       const std::vector<int>& prompt, int t,
                                                       int window) {
  if (prompt.empty()) throw std::invalid_argument("jacobi_decode: empty prompt");
  if (t < 0) throw std::invalid_argument("jacobi_decode: negative token count");
  if (window < 1) throw std::invalid_argument("jacobi_decode: window must be >= 1");

  JacobiStats stats;
  std::vector<int> committed = prompt;
  std::vector<int> out;
  out.reserve(t);

  struct Slot {
    int token;
    int age;  // sweeps spent in the window so far
  };
  std::vector<Slot> drafts;
  const auto refill = [&]() {
    const int want = std::min<int>(window, t - static_cast<int>(out.size()));
    while (static_cast<int>(drafts.size()) > want) drafts.pop_back();
    while (static_cast<int>(drafts.size()) < want) drafts.push_back({committed.back(), 0});
  };
  refill();

  const long long cap = static_cast<long long>(window) * std::max(t, 1);
  long long total_commit_age = 0;

  while (static_cast<int>(out.size()) < t) {
    if (stats.forward_passes >= cap) {
      stats.hit_iteration_cap = true;
      break;
    }
    ++stats.forward_passes;
    const int wsize = static_cast<int>(drafts.size());
    std::vector<int> extended = committed;
    for (const Slot& s : drafts) extended.push_back(s.token);
    const Matrix logits = forward(extended);
    const int base = static_cast<int>(committed.size());

    std::vector<int> updated(wsize);
    for (int i = 0; i < wsize; ++i)
      updated[i] = argmax_token(logits.row(base - 1 + i), logits.cols);

    // The first slot's context is fully committed, so its refreshed token is
    // final; deeper slots are final while every draft to their left already
    // equalled its refreshed value.
    int commit = 1;
    while (commit < wsize && drafts[commit - 1].token == updated[commit - 1]) ++commit;
    commit = std::min(commit, t - static_cast<int>(out.size()));

    for (int i = 0; i < commit; ++i) {
      out.push_back(updated[i]);
      committed.push_back(updated[i]);
      total_commit_age += drafts[i].age + 1;
    }
    std::vector<Slot> survivors;
    for (int i = commit; i < wsize; ++i) survivors.push_back({updated[i], drafts[i].age + 1});
    drafts = std::move(survivors);
    refill();
  }

  stats.accept_per_iter = stats.forward_passes > 0
                              ? static_cast<double>(out.size()) / stats.forward_passes
                              : 0.0;
  stats.jd_iters =
      out.empty() ? 0.0 : static_cast<double>(total_commit_age) / static_cast<double>(out.size());
  return {std::move(out), stats};
}

}  // namespace snlp
