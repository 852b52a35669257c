#include "snlp/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "snlp/checkpoint.hpp"
#include "snlp/decoding.hpp"
#include "snlp/diagnostics.hpp"
#include "snlp/prng.hpp"
#include "snlp/tokens.hpp"
#include "snlp/version.hpp"

namespace snlp {
namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::string& section,
                const std::vector<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw std::runtime_error("config: unknown key \"" + it.key() + "\" in section " + section);
    }
  }
}

const json& require_key(const json& obj, const std::string& section, const std::string& key) {
  auto it = obj.find(key);
  if (it == obj.end())
    throw std::runtime_error("config: missing key \"" + key + "\" in section " + section);
  return *it;
}

template <typename T>
void read_opt(const json& obj, const char* key, T& out) {
  auto it = obj.find(key);
  if (it != obj.end()) out = it->template get<T>();
}

void parse_model(const json& j, ExperimentConfig& cfg) {
  check_keys(j, "model",
             {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len", "variant",
              "hc_streams", "rope_base", "seed", "branch_gain"});
  ModelConfig& m = cfg.model;
  read_opt(j, "n_layers", m.n_layers);
  read_opt(j, "d_model", m.d_model);
  read_opt(j, "n_heads", m.n_heads);
  read_opt(j, "d_ff", m.d_ff);
  read_opt(j, "vocab_size", m.vocab_size);
  read_opt(j, "max_seq_len", m.max_seq_len);
  if (j.contains("variant")) m.variant = variant_from_name(j.at("variant").get<std::string>());
  read_opt(j, "hc_streams", m.hc_streams);
  read_opt(j, "rope_base", m.rope_base);
  cfg.model_seed = require_key(j, "model", "seed").get<std::uint64_t>();
  read_opt(j, "branch_gain", cfg.branch_gain);
  m.validate();
}

void parse_snlp(const json& j, ExperimentConfig& cfg) {
  check_keys(j, "snlp",
             {"plan", "prefix_len", "iterations", "surrogate", "init", "elk_lambda", "ordering",
              "probe", "preheat"});
  SnlpConfig& s = cfg.snlp;
  s.plan = ChunkPlan::parse(require_key(j, "snlp", "plan").get<std::string>());
  read_opt(j, "prefix_len", s.prefix_len);
  s.iterations = require_key(j, "snlp", "iterations").get<int>();
  s.surrogate = surrogate_from_name(require_key(j, "snlp", "surrogate").get<std::string>());
  s.init = init_from_name(require_key(j, "snlp", "init").get<std::string>());
  read_opt(j, "elk_lambda", s.elk_lambda);
  if (j.contains("ordering")) s.ordering = j.at("ordering").get<std::vector<int>>();
  if (j.contains("probe")) {
    const json& p = j.at("probe");
    check_keys(p, "snlp.probe", {"fd_epsilon", "n_probes", "seed"});
    s.probe.fd_epsilon = require_key(p, "snlp.probe", "fd_epsilon").get<float>();
    s.probe.n_probes = require_key(p, "snlp.probe", "n_probes").get<int>();
    s.probe.prng_seed = require_key(p, "snlp.probe", "seed").get<std::uint64_t>();
  }
  if (j.contains("preheat")) {
    const json& p = j.at("preheat");
    check_keys(p, "snlp.preheat", {"rank", "tokens", "seed"});
    s.preheat_rank = require_key(p, "snlp.preheat", "rank").get<int>();
    s.preheat_tokens = require_key(p, "snlp.preheat", "tokens").get<int>();
    s.preheat_seed = require_key(p, "snlp.preheat", "seed").get<std::uint64_t>();
  }
}

void parse_eval(const json& j, ExperimentConfig& cfg) {
  check_keys(j, "eval", {"seq_len", "n_eval_tokens", "data_seed", "source"});
  EvalConfig& e = cfg.eval;
  e.seq_len = require_key(j, "eval", "seq_len").get<int>();
  e.n_eval_tokens = require_key(j, "eval", "n_eval_tokens").get<int>();
  e.data_seed = require_key(j, "eval", "data_seed").get<std::uint64_t>();
  e.source = require_key(j, "eval", "source").get<std::string>();
  if (e.source != "uniform" && e.source != "markov")
    throw std::runtime_error("config: eval.source must be \"uniform\" or \"markov\"");
}

void parse_ssd(const json& j, ExperimentConfig& cfg) {
  check_keys(j, "ssd", {"block_size", "max_tokens", "n_prompts", "prefill"});
  read_opt(j, "block_size", cfg.ssd.block_size);
  read_opt(j, "max_tokens", cfg.ssd.max_tokens);
  read_opt(j, "n_prompts", cfg.ssd.n_prompts);
  read_opt(j, "prefill", cfg.ssd.prefill);
}

void parse_jd(const json& j, ExperimentConfig& cfg) {
  check_keys(j, "jd", {"window", "max_tokens", "n_prompts", "prefill"});
  read_opt(j, "window", cfg.jd.window);
  read_opt(j, "max_tokens", cfg.jd.max_tokens);
  read_opt(j, "n_prompts", cfg.jd.n_prompts);
  read_opt(j, "prefill", cfg.jd.prefill);
}

void parse_ablation(const json& j, ExperimentConfig& cfg) {
  check_keys(j, "ablation",
             {"ordering_seed", "ordering_mode", "early_exit", "propagation", "n_shuffles"});
  cfg.ablation.ordering_seed = require_key(j, "ablation", "ordering_seed").get<std::uint64_t>();
  read_opt(j, "ordering_mode", cfg.ablation.ordering_mode);
  read_opt(j, "early_exit", cfg.ablation.early_exit);
  read_opt(j, "propagation", cfg.ablation.propagation);
  read_opt(j, "n_shuffles", cfg.ablation.n_shuffles);
  const std::string& m = cfg.ablation.ordering_mode;
  if (!m.empty() && m != "forward" && m != "reversed" && m != "shuffle")
    throw std::runtime_error(
        "config: ablation.ordering_mode must be \"forward\", \"reversed\" or \"shuffle\"");
  if (cfg.ablation.n_shuffles < 0)
    throw std::runtime_error("config: ablation.n_shuffles must be >= 0");
}

std::vector<int> make_stream(const std::string& source, int n, int vocab, std::uint64_t seed) {
  if (source == "uniform") return uniform_token_stream(n, vocab, seed);
  return markov_token_stream(n, vocab, seed);
}

struct PreheatHolder {
  PreheatPredictor pred;
  bool active = false;
  const PreheatPredictor* ptr() const { return active ? &pred : nullptr; }
};

PreheatHolder maybe_calibrate(const ExperimentConfig& cfg, const ModelWeights& w) {
  PreheatHolder h;
  if (cfg.snlp.init != SuffixInit::Preheat) return h;
  // The calibration stream is drawn from the eval source with a derived
  // seed so calibration and evaluation tokens never coincide.
  const auto calib = make_stream(cfg.eval.source, cfg.snlp.preheat_tokens, cfg.model.vocab_size,
                                 cfg.eval.data_seed + 999);
  Prng prng(cfg.snlp.preheat_seed);
  h.pred = calibrate_preheat(w, calib, cfg.snlp.resolved_prefix(cfg.model.n_layers),
                             cfg.snlp.preheat_rank, prng);
  h.active = true;
  return h;
}

// Logits rows that predict a next token (all but the last).
Matrix predictive_rows(const Matrix& logits) {
  if (logits.rows < 2) throw std::invalid_argument("predictive_rows: need at least 2 positions");
  Matrix sub(logits.rows - 1, logits.cols);
  std::copy_n(logits.data.begin(), sub.data.size(), sub.data.begin());
  return sub;
}

ForwardFn sequential_logits_fn(const ModelWeights& w) {
  return [&w](const std::vector<int>& toks) {
    const HiddenTrace tr = sequential_forward(w, toks);
    return readout_logits(w, tr.states.back());
  };
}

// Accumulated next-token statistics of one solver configuration against the
// sequential forward over the eval sequences.
struct SolveAggregate {
  double seq_ce_sum = 0.0;
  double snlp_ce_sum = 0.0;
  double top1_sum = 0.0;
  double cos_sum = 0.0;
  long long positions = 0;
  double res_init_sum = 0.0;
  double res_final_sum = 0.0;
  long long block_forwards = 0;
  long long probe_forwards = 0;
  bool diverged = false;
  int diverged_iteration = -1;
  int n_seqs = 0;

  double seq_ppl() const { return std::exp(seq_ce_sum / positions); }
  double snlp_ppl() const { return std::exp(snlp_ce_sum / positions); }
};

void accumulate_pair(SolveAggregate& agg, const Matrix& seq_logits, const Matrix& other_logits,
                     const std::vector<int>& toks) {
  const Matrix a = predictive_rows(seq_logits);
  const Matrix b = predictive_rows(other_logits);
  const std::vector<int> targets(toks.begin() + 1, toks.end());
  const CrossEntropyResult seq_ce = cross_entropy_ppl(a, targets);
  const CrossEntropyResult other_ce = cross_entropy_ppl(b, targets);
  const auto n_pos = static_cast<long long>(targets.size());
  agg.seq_ce_sum += seq_ce.ce * n_pos;
  agg.snlp_ce_sum += other_ce.ce * n_pos;
  const AgreementReport ar = agreement(a, b);
  agg.top1_sum += ar.top1_match_rate * n_pos;
  agg.cos_sum += ar.logit_cosine * n_pos;
  agg.positions += n_pos;
  ++agg.n_seqs;
}

SolveAggregate aggregate_solve(const ModelWeights& w, const SnlpConfig& scfg,
                               const std::vector<std::vector<int>>& seqs,
                               const PreheatPredictor* pred) {
  SolveAggregate agg;
  for (const auto& toks : seqs) {
    const HiddenTrace seq_trace = sequential_forward(w, toks);
    const Matrix seq_logits = readout_logits(w, seq_trace.states.back());
    const SuffixSolveResult res = snlp_solve(w, toks, scfg, pred);
    accumulate_pair(agg, seq_logits, res.logits, toks);
    if (!res.residual_norms.empty()) {
      agg.res_init_sum += res.residual_norms.front();
      agg.res_final_sum += res.residual_norms.back();
    }
    agg.block_forwards += res.block_forward_count;
    agg.probe_forwards += res.probe_forward_count;
    if (res.diverged && !agg.diverged) {
      agg.diverged = true;
      agg.diverged_iteration = res.diverged_iteration;
    }
  }
  return agg;
}

std::string speedup_formula(int n_layers, const SnlpConfig& scfg) {
  const int s = scfg.resolved_prefix(n_layers);
  const int n = scfg.plan.n_chunks;
  const int f = scfg.plan.fuse;
  const int k_eff = n > 0 ? scfg.iterations : 0;
  const int extra = (n > 0 && scfg.init == SuffixInit::Fwd) ? f : 0;
  const double v = critical_path_speedup(n_layers, scfg, true);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%d/(%d+%d*%d+%d)=%s", n_layers, s, k_eff, f, extra,
                format_double(v).c_str());
  return buf;
}

MetricsRow base_row(const ExperimentConfig& cfg, const std::string& command,
                    const std::string& mode, const std::string& case_name) {
  MetricsRow r;
  r.set("command", command);
  r.set("mode", mode);
  r.set("case", case_name);
  r.set("config_hash", cfg.config_hash);
  r.set("version", std::string(kArtifactVersion));
  r.set("status", "ok");
  r.set("variant", variant_name(cfg.model.variant));
  r.set_int("n_layers", cfg.model.n_layers);
  r.set_int("d_model", cfg.model.d_model);
  r.set("plan", cfg.snlp.plan.to_string());
  r.set_int("prefix_len", cfg.snlp.resolved_prefix(cfg.model.n_layers));
  r.set("source", cfg.eval.source);
  r.set_int("seq_len", cfg.eval.seq_len);
  r.set_int("n_eval_tokens", cfg.eval.n_eval_tokens);
  return r;
}

void fill_solver_columns(MetricsRow& r, const ExperimentConfig& cfg, const SnlpConfig& scfg,
                         const SolveAggregate& agg) {
  r.set("plan", scfg.plan.to_string());
  r.set_int("prefix_len", scfg.resolved_prefix(cfg.model.n_layers));
  r.set_int("iterations", scfg.iterations);
  r.set("surrogate", surrogate_name(scfg.surrogate));
  r.set("init", init_name(scfg.init));
  r.set("elk_lambda", static_cast<double>(scfg.elk_lambda));
  r.set("seq_ppl", agg.seq_ppl());
  r.set("snlp_ppl", agg.snlp_ppl());
  r.set("delta_ppl", agg.snlp_ppl() - agg.seq_ppl());
  r.set("top1_match", agg.top1_sum / agg.positions);
  r.set("logit_cosine", agg.cos_sum / agg.positions);
  r.set("residual_init", agg.res_init_sum / agg.n_seqs);
  r.set("residual_final", agg.res_final_sum / agg.n_seqs);
  r.set("speedup_charged", critical_path_speedup(cfg.model.n_layers, scfg, true));
  r.set("speedup_uncharged", critical_path_speedup(cfg.model.n_layers, scfg, false));
  r.set("speedup_formula", speedup_formula(cfg.model.n_layers, scfg));
  r.set_int("block_forwards", agg.block_forwards);
  r.set_int("probe_forwards", agg.probe_forwards);
  r.set("status", agg.diverged ? "diverged" : "ok");
  if (agg.diverged) r.set_int("diverged_iteration", agg.diverged_iteration);
}

Matrix permuted_sequential_logits(const ModelWeights& w, const std::vector<int>& toks, int prefix,
                                  int fuse, const std::vector<int>& order) {
  HiddenState h = embed(w, toks);
  for (int l = 0; l < prefix; ++l) h = block_forward(w, l, h);
  for (int unit : order)
    for (int j = 0; j < fuse; ++j) h = block_forward(w, prefix + unit * fuse + j, h);
  return readout_logits(w, h);
}

double expected_tokens_per_round(int b, double alpha) {
  if (alpha >= 1.0) return b + 1.0;
  return (1.0 - std::pow(alpha, b + 1)) / (1.0 - alpha);
}

std::vector<MetricsRow> ablate_ordering(const ExperimentConfig& cfg, const ModelWeights& w) {
  const int n = cfg.snlp.plan.n_chunks;
  if (n <= 0)
    throw std::runtime_error("ordering ablation requires a plan with at least one chunk");
  const auto seqs = eval_sequences(cfg);
  const PreheatHolder ph = maybe_calibrate(cfg, w);
  const int prefix = cfg.snlp.resolved_prefix(cfg.model.n_layers);

  struct Entry {
    std::string name;
    std::string kind;
    std::vector<int> perm;
  };
  std::vector<Entry> entries;
  std::vector<int> forward(n);
  std::iota(forward.begin(), forward.end(), 0);
  entries.push_back({"forward", "forward", forward});
  std::vector<int> reversed = forward;
  std::reverse(reversed.begin(), reversed.end());
  entries.push_back({"reversed", "reversed", reversed});
  Prng prng(cfg.ablation.ordering_seed);
  for (int i = 0; i < cfg.ablation.n_shuffles; ++i) {
    std::vector<int> p = forward;
    for (int j = n - 1; j > 0; --j) std::swap(p[j], p[prng.next_int(j + 1)]);
    entries.push_back({"shuffle-" + std::to_string(i), "shuffle", p});
  }

  std::vector<MetricsRow> rows;
  for (const auto& e : entries) {
    if (!cfg.ablation.ordering_mode.empty() && e.kind != cfg.ablation.ordering_mode) continue;
    {
      // Sequential execution with the suffix units applied in permuted order.
      SolveAggregate agg;
      for (const auto& toks : seqs) {
        const HiddenTrace tr = sequential_forward(w, toks);
        const Matrix seq_logits = readout_logits(w, tr.states.back());
        const Matrix perm_logits =
            permuted_sequential_logits(w, toks, prefix, cfg.snlp.plan.fuse, e.perm);
        accumulate_pair(agg, seq_logits, perm_logits, toks);
      }
      MetricsRow r = base_row(cfg, "ablate", "ordering", e.name + "/seqperm");
      r.set("seq_ppl", agg.seq_ppl());
      r.set("snlp_ppl", agg.snlp_ppl());
      r.set("delta_ppl", agg.snlp_ppl() - agg.seq_ppl());
      r.set("top1_match", agg.top1_sum / agg.positions);
      r.set("logit_cosine", agg.cos_sum / agg.positions);
      rows.push_back(std::move(r));
    }
    for (const int k : {1, 4}) {
      SnlpConfig scfg = cfg.snlp;
      scfg.ordering = e.perm;
      scfg.iterations = k;
      const SolveAggregate agg = aggregate_solve(w, scfg, seqs, ph.ptr());
      MetricsRow r = base_row(cfg, "ablate", "ordering", e.name + "/snlp-K" + std::to_string(k));
      fill_solver_columns(r, cfg, scfg, agg);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

std::vector<MetricsRow> ablate_propagation(const ExperimentConfig& cfg, const ModelWeights& w) {
  const int n = cfg.snlp.plan.n_chunks;
  if (n <= 0)
    throw std::runtime_error("propagation ablation requires a plan with at least one chunk");
  const auto seqs = eval_sequences(cfg);
  const PreheatHolder ph = maybe_calibrate(cfg, w);

  std::vector<Surrogate> surrogates = {cfg.snlp.surrogate};
  if (cfg.snlp.surrogate != Surrogate::None) surrogates.push_back(Surrogate::None);

  std::vector<MetricsRow> rows;
  for (int m = 1; m <= n; ++m) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
    for (int c = n - m; c < n; ++c) mask[static_cast<std::size_t>(c)] = 1;
    for (int k = 1; k <= n; ++k) {
      for (const Surrogate s : surrogates) {
        SnlpConfig scfg = cfg.snlp;
        scfg.unit_active = mask;
        scfg.iterations = k;
        scfg.surrogate = s;
        const SolveAggregate agg = aggregate_solve(w, scfg, seqs, ph.ptr());
        MetricsRow r = base_row(cfg, "ablate", "propagation",
                                "last-" + std::to_string(m) + "/K" + std::to_string(k) + "/" +
                                    surrogate_name(s));
        fill_solver_columns(r, cfg, scfg, agg);
        rows.push_back(std::move(r));
      }
    }
  }
  return rows;
}

std::vector<MetricsRow> ablate_early_exit(const ExperimentConfig& cfg, const ModelWeights& w) {
  const auto seqs = eval_sequences(cfg);
  std::vector<HiddenTrace> traces;
  traces.reserve(seqs.size());
  for (const auto& toks : seqs) traces.push_back(sequential_forward(w, toks));

  std::vector<MetricsRow> rows;
  for (int s = 0; s <= cfg.model.n_layers; ++s) {
    SolveAggregate agg;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const Matrix seq_logits = readout_logits(w, traces[i].states.back());
      const Matrix early = early_exit_logits(w, traces[i], s);
      accumulate_pair(agg, seq_logits, early, seqs[i]);
    }
    MetricsRow r = base_row(cfg, "ablate", "early-exit", "S=" + std::to_string(s));
    r.set_int("prefix_len", s);
    r.set("seq_ppl", agg.seq_ppl());
    r.set("snlp_ppl", agg.snlp_ppl());
    r.set("delta_ppl", agg.snlp_ppl() - agg.seq_ppl());
    r.set("top1_match", agg.top1_sum / agg.positions);
    r.set("logit_cosine", agg.cos_sum / agg.positions);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricsRow> ablate_substitution(const ExperimentConfig& cfg, const ModelWeights& w) {
  const auto seqs = eval_sequences(cfg);
  const int prefix = cfg.snlp.resolved_prefix(cfg.model.n_layers);
  const SubstitutionReport rep = substitution_report(w, seqs.front(), prefix);
  std::vector<MetricsRow> rows;
  for (std::size_t i = 0; i < rep.eps_abs.size(); ++i) {
    const int layer = prefix + 1 + static_cast<int>(i);
    MetricsRow r = base_row(cfg, "ablate", "substitution", "layer-" + std::to_string(layer));
    r.set_int("prefix_len", prefix);
    r.set("eps_abs", rep.eps_abs[i]);
    r.set("eps_cum", rep.cumulative[i]);
    r.set("delta_g", rep.delta_g[i]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricsRow> ablate_jacobian(const ExperimentConfig& cfg, const ModelWeights& w) {
  const auto seqs = eval_sequences(cfg);
  const int prefix = cfg.snlp.resolved_prefix(cfg.model.n_layers);
  const HiddenTrace trace = sequential_forward(w, seqs.front());
  std::vector<MetricsRow> rows;
  for (int layer = prefix + 1; layer <= cfg.model.n_layers; ++layer) {
    const LayerJacobianReport rep =
        layer_report(w, layer - 1, trace.states[static_cast<std::size_t>(layer - 1)],
                     cfg.snlp.probe, -1);
    MetricsRow r = base_row(cfg, "ablate", "jacobian", "layer-" + std::to_string(layer));
    r.set_int("prefix_len", prefix);
    r.set("sigma_max", static_cast<double>(rep.sigma_max));
    r.set("frob_norm", static_cast<double>(rep.frob_norm));
    r.set("amplification", static_cast<double>(rep.amplification));
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("config: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw std::runtime_error("config: top level must be a JSON object");
  check_keys(root, "(top level)", {"model", "snlp", "eval", "ssd", "jd", "ablation"});

  ExperimentConfig cfg;
  parse_model(require_key(root, "(top level)", "model"), cfg);
  parse_snlp(require_key(root, "(top level)", "snlp"), cfg);
  parse_eval(require_key(root, "(top level)", "eval"), cfg);
  if (root.contains("ssd")) parse_ssd(root.at("ssd"), cfg);
  if (root.contains("jd")) parse_jd(root.at("jd"), cfg);
  if (root.contains("ablation")) parse_ablation(root.at("ablation"), cfg);

  cfg.snlp.validate(cfg.model);
  if (cfg.eval.seq_len < 2)
    throw std::runtime_error("config: eval.seq_len must be >= 2");
  if (cfg.eval.seq_len > cfg.model.max_seq_len)
    throw std::runtime_error("config: eval.seq_len exceeds model.max_seq_len");
  if (cfg.eval.n_eval_tokens < cfg.eval.seq_len)
    throw std::runtime_error("config: eval.n_eval_tokens must cover at least one sequence");
  if (cfg.ssd.block_size < 1 || cfg.ssd.max_tokens < 1 || cfg.ssd.n_prompts < 1 ||
      cfg.ssd.prefill < 1)
    throw std::runtime_error("config: ssd fields must be positive");
  if (cfg.jd.window < 1 || cfg.jd.max_tokens < 1 || cfg.jd.n_prompts < 1 || cfg.jd.prefill < 1)
    throw std::runtime_error("config: jd fields must be positive");

  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(text.data(), text.size())));
  cfg.config_hash = buf;
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

void MetricsRow::set(const std::string& key, const std::string& value) { values[key] = value; }
void MetricsRow::set(const std::string& key, double value) { values[key] = format_double(value); }
void MetricsRow::set_int(const std::string& key, long long value) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%lld", value);
  values[key] = buf;
}
void MetricsRow::set_bool(const std::string& key, bool value) {
  values[key] = value ? "true" : "false";
}

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "command",          "mode",
      "case",             "config_hash",
      "version",          "status",
      "variant",          "n_layers",
      "d_model",          "plan",
      "prefix_len",       "iterations",
      "surrogate",        "init",
      "elk_lambda",       "source",
      "seq_len",          "n_eval_tokens",
      "seq_ppl",          "snlp_ppl",
      "delta_ppl",        "top1_match",
      "logit_cosine",     "ar_match",
      "residual_init",    "residual_final",
      "speedup_charged",  "speedup_uncharged",
      "speedup_formula",  "block_forwards",
      "probe_forwards",   "diverged_iteration",
      "block_size",       "alpha",
      "alpha_round_mean", "tokens_per_round",
      "tokens_per_round_formula",
      "rounds",           "fallback_rounds",
      "ideal_speedup",    "lossless",
      "window",           "jd_match",
      "jd_accept_per_iter",
      "jd_iters",         "jd_forward_passes",
      "sigma_max",        "frob_norm",
      "amplification",    "eps_abs",
      "eps_cum",          "delta_g"};
  return cols;
}

std::string format_double(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", value);
  return buf;
}

void append_rows(const std::string& path, const std::vector<MetricsRow>& rows) {
  namespace fs = std::filesystem;
  bool need_header = true;
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (!ec && size > 0) need_header = false;

  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw std::runtime_error("cannot open metrics file for append: " + path);
  const auto& cols = csv_columns();
  auto write_line = [&out, &cols](const std::function<std::string(const std::string&)>& cell) {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (i > 0) out << ',';
      out << cell(cols[i]);
    }
    out << '\n';
  };
  if (need_header) write_line([](const std::string& c) { return c; });
  for (const auto& row : rows) {
    write_line([&row](const std::string& c) -> std::string {
      auto it = row.values.find(c);
      if (it == row.values.end()) return "";
      if (it->second.find(',') != std::string::npos ||
          it->second.find('\n') != std::string::npos)
        throw std::logic_error("metrics value for column " + c + " contains a separator");
      return it->second;
    });
  }
  out.flush();
  if (!out) throw std::runtime_error("failed writing metrics file: " + path);
}

void require_model_match(const ExperimentConfig& cfg, const ModelWeights& w) {
  if (model_config_to_json(cfg.model) != model_config_to_json(w.config))
    throw std::runtime_error(
        "config model section does not match the checkpoint: config " +
        model_config_to_json(cfg.model) + " vs checkpoint " + model_config_to_json(w.config));
}

std::vector<std::vector<int>> eval_sequences(const ExperimentConfig& cfg) {
  const int n_seqs = cfg.eval.n_eval_tokens / cfg.eval.seq_len;
  const auto stream = make_stream(cfg.eval.source, n_seqs * cfg.eval.seq_len,
                                  cfg.model.vocab_size, cfg.eval.data_seed);
  std::vector<std::vector<int>> seqs;
  seqs.reserve(static_cast<std::size_t>(n_seqs));
  for (int i = 0; i < n_seqs; ++i) {
    seqs.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(i) * cfg.eval.seq_len,
                      stream.begin() + static_cast<std::ptrdiff_t>(i + 1) * cfg.eval.seq_len);
  }
  return seqs;
}

std::vector<MetricsRow> run_ppl(const ExperimentConfig& cfg, const ModelWeights& w) {
  const auto seqs = eval_sequences(cfg);
  const PreheatHolder ph = maybe_calibrate(cfg, w);
  const SolveAggregate agg = aggregate_solve(w, cfg.snlp, seqs, ph.ptr());

  MetricsRow r = base_row(cfg, "run-ppl", "ppl", "eval");
  fill_solver_columns(r, cfg, cfg.snlp, agg);

  // Greedy-generation agreement: one prompt, short prefill, capped length.
  const int prefill = std::min(8, cfg.eval.seq_len);
  const int t = std::min(32, cfg.model.max_seq_len - prefill);
  if (t > 0) {
    const std::vector<int> prompt(seqs.front().begin(), seqs.front().begin() + prefill);
    const ForwardFn seq_fwd = sequential_logits_fn(w);
    const PreheatPredictor* pred = ph.ptr();
    const ForwardFn snlp_fwd = [&w, &cfg, pred](const std::vector<int>& toks) {
      return snlp_solve(w, toks, cfg.snlp, pred).logits;
    };
    const auto ref = greedy_generate(seq_fwd, prompt, t);
    const auto got = greedy_generate(snlp_fwd, prompt, t);
    r.set("ar_match", token_match_rate(ref, got));
  }
  return {r};
}

std::vector<MetricsRow> run_ablate(const ExperimentConfig& cfg, const ModelWeights& w,
                                   const std::string& mode) {
  if (mode == "ordering") return ablate_ordering(cfg, w);
  if (mode == "propagation") {
    if (!cfg.ablation.propagation)
      throw std::runtime_error("config: ablation.propagation is disabled");
    return ablate_propagation(cfg, w);
  }
  if (mode == "early-exit") {
    if (!cfg.ablation.early_exit)
      throw std::runtime_error("config: ablation.early_exit is disabled");
    return ablate_early_exit(cfg, w);
  }
  if (mode == "substitution") return ablate_substitution(cfg, w);
  if (mode == "jacobian") return ablate_jacobian(cfg, w);
  throw std::runtime_error("unknown ablation mode: " + mode);
}

std::vector<MetricsRow> run_ssd(const ExperimentConfig& cfg, const ModelWeights& w) {
  if (cfg.ssd.prefill + cfg.ssd.max_tokens + cfg.ssd.block_size > cfg.model.max_seq_len)
    throw std::runtime_error("config: ssd.prefill + max_tokens + block_size exceeds max_seq_len");
  const PreheatHolder ph = maybe_calibrate(cfg, w);
  SsdConfig sc;
  sc.block_size = cfg.ssd.block_size;
  sc.max_tokens = cfg.ssd.max_tokens;
  sc.drafter = cfg.snlp;
  const ForwardFn seq_fwd = sequential_logits_fn(w);

  std::vector<MetricsRow> rows;
  long long tot_judged = 0, tot_accepted = 0, tot_appended = 0;
  long long tot_rounds = 0, tot_fallback = 0;
  double round_alpha_weighted = 0.0;
  long long proposal_rounds = 0;
  bool all_lossless = true;
  const double drafter_speedup = critical_path_speedup(cfg.model.n_layers, cfg.snlp, true);

  for (int i = 0; i < cfg.ssd.n_prompts; ++i) {
    const auto prompt = make_stream(cfg.eval.source, cfg.ssd.prefill, cfg.model.vocab_size,
                                    cfg.eval.data_seed + 1000 + static_cast<std::uint64_t>(i));
    const auto [out, st] = self_speculative_decode(w, sc, prompt, ph.ptr());
    const auto ref = greedy_generate(seq_fwd, prompt, cfg.ssd.max_tokens);
    const bool lossless = out == ref;
    all_lossless = all_lossless && lossless;

    MetricsRow r = base_row(cfg, "run-ssd", "ssd", "prompt-" + std::to_string(i));
    r.set_int("iterations", cfg.snlp.iterations);
    r.set("surrogate", surrogate_name(cfg.snlp.surrogate));
    r.set("init", init_name(cfg.snlp.init));
    r.set("elk_lambda", static_cast<double>(cfg.snlp.elk_lambda));
    r.set_int("block_size", cfg.ssd.block_size);
    r.set("alpha", st.alpha);
    r.set("alpha_round_mean", st.alpha_round_mean);
    r.set("tokens_per_round", st.tokens_per_round);
    r.set("tokens_per_round_formula", expected_tokens_per_round(cfg.ssd.block_size, st.alpha));
    r.set_int("rounds", st.rounds);
    r.set_int("fallback_rounds", st.fallback_rounds);
    r.set("speedup_charged", drafter_speedup);
    r.set("speedup_uncharged", critical_path_speedup(cfg.model.n_layers, cfg.snlp, false));
    r.set("speedup_formula", speedup_formula(cfg.model.n_layers, cfg.snlp));
    r.set("ideal_speedup", st.ideal_speedup);
    r.set_bool("lossless", lossless);
    rows.push_back(std::move(r));

    tot_judged += st.judged_drafts;
    tot_accepted += st.accepted_drafts;
    tot_appended += st.appended_tokens;
    tot_rounds += st.rounds;
    tot_fallback += st.fallback_rounds;
    const long long props = st.rounds - st.fallback_rounds;
    round_alpha_weighted += st.alpha_round_mean * static_cast<double>(props);
    proposal_rounds += props;
  }

  const double alpha = tot_judged > 0 ? static_cast<double>(tot_accepted) / tot_judged : 0.0;
  MetricsRow pooled = base_row(cfg, "run-ssd", "ssd", "pooled");
  pooled.set_int("iterations", cfg.snlp.iterations);
  pooled.set("surrogate", surrogate_name(cfg.snlp.surrogate));
  pooled.set("init", init_name(cfg.snlp.init));
  pooled.set("elk_lambda", static_cast<double>(cfg.snlp.elk_lambda));
  pooled.set_int("block_size", cfg.ssd.block_size);
  pooled.set("alpha", alpha);
  pooled.set("alpha_round_mean",
             proposal_rounds > 0 ? round_alpha_weighted / proposal_rounds : 0.0);
  pooled.set("tokens_per_round",
             tot_rounds > 0 ? static_cast<double>(tot_appended) / tot_rounds : 0.0);
  pooled.set("tokens_per_round_formula", expected_tokens_per_round(cfg.ssd.block_size, alpha));
  pooled.set_int("rounds", tot_rounds);
  pooled.set_int("fallback_rounds", tot_fallback);
  pooled.set("speedup_charged", drafter_speedup);
  pooled.set("speedup_uncharged", critical_path_speedup(cfg.model.n_layers, cfg.snlp, false));
  pooled.set("speedup_formula", speedup_formula(cfg.model.n_layers, cfg.snlp));
  pooled.set("ideal_speedup", ssd_ideal_speedup(drafter_speedup, cfg.ssd.block_size, alpha));
  pooled.set_bool("lossless", all_lossless);
  rows.push_back(std::move(pooled));
  return rows;
}

std::vector<MetricsRow> run_jd(const ExperimentConfig& cfg, const ModelWeights& w) {
  if (cfg.jd.prefill + cfg.jd.max_tokens > cfg.model.max_seq_len)
    throw std::runtime_error("config: jd.prefill + max_tokens exceeds max_seq_len");
  const ForwardFn seq_fwd = sequential_logits_fn(w);

  std::vector<MetricsRow> rows;
  long long tot_tokens = 0, tot_forwards = 0;
  double match_weighted = 0.0, iters_weighted = 0.0;

  for (int i = 0; i < cfg.jd.n_prompts; ++i) {
    const auto prompt = make_stream(cfg.eval.source, cfg.jd.prefill, cfg.model.vocab_size,
                                    cfg.eval.data_seed + 2000 + static_cast<std::uint64_t>(i));
    const auto ref = greedy_generate(seq_fwd, prompt, cfg.jd.max_tokens);
    auto [out, st] = jacobi_decode(seq_fwd, prompt, cfg.jd.max_tokens, cfg.jd.window);
    st.match_rate = token_match_rate(out, ref);

    MetricsRow r = base_row(cfg, "run-jd", "jd", "prompt-" + std::to_string(i));
    r.set_int("window", cfg.jd.window);
    r.set("jd_match", st.match_rate);
    r.set("jd_accept_per_iter", st.accept_per_iter);
    r.set("jd_iters", st.jd_iters);
    r.set_int("jd_forward_passes", st.forward_passes);
    rows.push_back(std::move(r));

    const auto n_out = static_cast<long long>(out.size());
    tot_tokens += n_out;
    tot_forwards += st.forward_passes;
    match_weighted += st.match_rate * static_cast<double>(n_out);
    iters_weighted += st.jd_iters * static_cast<double>(n_out);
  }

  MetricsRow pooled = base_row(cfg, "run-jd", "jd", "pooled");
  pooled.set_int("window", cfg.jd.window);
  pooled.set("jd_match", tot_tokens > 0 ? match_weighted / tot_tokens : 0.0);
  pooled.set("jd_accept_per_iter",
             tot_forwards > 0 ? static_cast<double>(tot_tokens) / tot_forwards : 0.0);
  pooled.set("jd_iters", tot_tokens > 0 ? iters_weighted / tot_tokens : 0.0);
  pooled.set_int("jd_forward_passes", tot_forwards);
  rows.push_back(std::move(pooled));
  return rows;
}

}  // namespace snlp
