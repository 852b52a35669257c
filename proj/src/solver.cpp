#include "snlp/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <regex>
#include <stdexcept>
#include <utility>

#include "snlp/linalg.hpp"
#include "snlp/scan.hpp"

namespace snlp {

namespace {

Matrix matmul64(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul64: inner dimension mismatch");
  Matrix out(a.rows, b.cols);
  for (int r = 0; r < a.rows; ++r) {
    for (int c = 0; c < b.cols; ++c) {
      double acc = 0.0;
      for (int k = 0; k < a.cols; ++k)
        acc += static_cast<double>(a.at(r, k)) * static_cast<double>(b.at(k, c));
      out.at(r, c) = static_cast<float>(acc);
    }
  }
  return out;
}

Matrix identity_matrix(int n) {
  Matrix out(n, n);
  for (int i = 0; i < n; ++i) out.at(i, i) = 1.0f;
  return out;
}

std::uint64_t probe_stream_seed(std::uint64_t base, int iteration, int unit) {
  return base + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(iteration + 1) +
         0xbf58476d1ce4e5b9ull * static_cast<std::uint64_t>(unit + 1);
}

// Static description of the suffix units of one solve: which layers each
// unit covers, whether it is active (inactive units are the identity map),
// and the prebuilt fused weights / stream mixers where applicable.
struct SuffixUnits {
  const ModelWeights* w = nullptr;
  int s = 0;  // prefix length
  int n = 0;  // number of units
  int f = 1;  // layers per unit
  std::vector<std::uint8_t> active;
  std::vector<ChunkWeights> chunks;   // one per unit when f > 1
  std::vector<Matrix> stream_mixer;   // HCN: M x M composed residual mixers

  int first_layer(int c) const { return s + c * f; }
  bool is_active(int c) const { return active.empty() || active[c] != 0; }

  HiddenState forward(int c, const HiddenState& in) const {
    if (!is_active(c)) return in;
    if (f == 1) return block_forward(*w, first_layer(c), in);
    return chunk_forward(chunks[c], *w, in);
  }

  // Blocks actually evaluated by one full sweep over the units.
  long long active_block_cost() const {
    long long blocks = 0;
    for (int c = 0; c < n; ++c)
      if (is_active(c)) blocks += f;
    return blocks;
  }
};

SuffixUnits build_units(const ModelWeights& w, const SnlpConfig& cfg) {
  SuffixUnits u;
  u.w = &w;
  u.s = cfg.resolved_prefix(w.config.n_layers);
  u.n = cfg.plan.n_chunks;
  u.f = cfg.plan.fuse;
  u.active = cfg.unit_active;
  if (u.f > 1) {
    u.chunks.reserve(u.n);
    for (int c = 0; c < u.n; ++c) u.chunks.push_back(build_fused_chunk(w, u.first_layer(c), u.f));
  }
  if (cfg.surrogate == Surrogate::Hcn) {
    const int m = w.config.hc_streams;
    u.stream_mixer.reserve(u.n);
    for (int c = 0; c < u.n; ++c) {
      Matrix a = identity_matrix(m);
      for (int j = 0; j < u.f; ++j) {
        const LayerWeights& lw = w.layers[u.first_layer(c) + j];
        a = matmul64(lw.h_res_mlp, matmul64(lw.h_res_attn, a));
      }
      u.stream_mixer.push_back(std::move(a));
    }
  }
  return u;
}

// target += scale * (A_stream (x) I_d) * delta, i.e. the M x M mixer applied
// on the stream dimension of every token row.
void add_stream_mixed(const Matrix& mixer, int d, const HiddenState& delta, float scale,
                      HiddenState& target) {
  const int m = mixer.rows;
  for (int t = 0; t < delta.rows; ++t) {
    const float* in = delta.row(t);
    float* out = target.row(t);
    for (int i = 0; i < m; ++i) {
      for (int k = 0; k < d; ++k) {
        double acc = 0.0;
        for (int j = 0; j < m; ++j)
          acc += static_cast<double>(mixer.at(i, j)) * static_cast<double>(in[j * d + k]);
        const int idx = i * d + k;
        out[idx] = static_cast<float>(static_cast<double>(out[idx]) +
                                      static_cast<double>(scale) * acc);
      }
    }
  }
}

// Hutchinson diagonal of one unit at input x, reusing fx = unit(x). Same
// estimator as hutchinson_diag, with the unperturbed evaluation shared with
// the solver's tilde pass.
Vector estimate_unit_diag(const SuffixUnits& units, int c, const HiddenState& x,
                          const HiddenState& fx, const JacobianProbeConfig& pc,
                          std::uint64_t seed, long long& probe_blocks) {
  const std::size_t sz = x.size();
  Prng prng(seed);
  std::vector<double> acc(sz, 0.0);
  std::vector<float> v(sz);
  HiddenState xp(x.rows, x.cols);
  const double eps = pc.fd_epsilon;
  for (int p = 0; p < pc.n_probes; ++p) {
    for (std::size_t i = 0; i < sz; ++i) {
      v[i] = prng.rademacher();
      xp.data[i] = x.data[i] + pc.fd_epsilon * v[i];
    }
    HiddenState fp = units.forward(c, xp);
    probe_blocks += units.f;
    for (std::size_t i = 0; i < sz; ++i) {
      const double jv = (static_cast<double>(fp.data[i]) - static_cast<double>(fx.data[i])) / eps;
      acc[i] += static_cast<double>(v[i]) * jv / pc.n_probes;
    }
  }
  Vector out(sz);
  for (std::size_t i = 0; i < sz; ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

// Dense per-token Jacobians of one unit at input x: for every position, the
// product of the member layers' per-token Jacobians, each probed at the
// shared unit input. probe_evals counts row probes (one position of work
// each); probe_builds counts the per-member K/V cache constructions (one
// full pass each).
std::vector<Matrix> estimate_unit_dense(const SuffixUnits& units, int c, const HiddenState& x,
                                        const JacobianProbeConfig& pc, long long& probe_evals,
                                        long long& probe_builds) {
  const int width = x.cols;
  const int seq = x.rows;
  if (width > 4096) throw std::invalid_argument("dense surrogate: state width above 4096");
  std::vector<Matrix> per_pos(seq);
  Vector row(width), base(width), out(width);
  for (int j = 0; j < units.f; ++j) {
    BlockProbe probe(*units.w, units.first_layer(c) + j, x);
    ++probe_builds;
    for (int t = 0; t < seq; ++t) {
      Matrix jt(width, width);
      std::copy(x.row(t), x.row(t) + width, row.begin());
      probe.eval(t, row.data(), base.data());
      ++probe_evals;
      for (int col = 0; col < width; ++col) {
        const float saved = row[col];
        row[col] = saved + pc.fd_epsilon;
        probe.eval(t, row.data(), out.data());
        ++probe_evals;
        row[col] = saved;
        const double eps = static_cast<double>(row[col] + pc.fd_epsilon) - static_cast<double>(saved);
        for (int r = 0; r < width; ++r)
          jt.at(r, col) = static_cast<float>(
              (static_cast<double>(out[r]) - static_cast<double>(base[r])) / eps);
      }
      per_pos[t] = (j == 0) ? std::move(jt) : matmul64(jt, per_pos[t]);
    }
  }
  return per_pos;
}

bool is_forward_order(const std::vector<int>& order) {
  for (std::size_t i = 0; i < order.size(); ++i)
    if (order[i] != static_cast<int>(i)) return false;
  return true;
}

Vector flatten(const HiddenState& h) { return h.data; }

HiddenState unflatten(const Vector& v, int rows, int cols) {
  HiddenState h(rows, cols);
  h.data = v;
  return h;
}

}  // namespace

std::string surrogate_name(Surrogate s) {
  switch (s) {
    case Surrogate::None: return "none";
    case Surrogate::Idn: return "idn";
    case Surrogate::Hcn: return "hcn";
    case Surrogate::Diagn: return "diagn";
    case Surrogate::ExactDense: return "exact_dense";
  }
  throw std::logic_error("surrogate_name: unknown value");
}

Surrogate surrogate_from_name(const std::string& s) {
  if (s == "none") return Surrogate::None;
  if (s == "idn") return Surrogate::Idn;
  if (s == "hcn") return Surrogate::Hcn;
  if (s == "diagn") return Surrogate::Diagn;
  if (s == "exact_dense") return Surrogate::ExactDense;
  throw std::invalid_argument("unknown surrogate '" + s +
                              "' (expected none|idn|hcn|diagn|exact_dense)");
}

std::string init_name(SuffixInit i) {
  switch (i) {
    case SuffixInit::H0: return "h0";
    case SuffixInit::Fwd: return "fwd";
    case SuffixInit::Preheat: return "preheat";
  }
  throw std::logic_error("init_name: unknown value");
}

SuffixInit init_from_name(const std::string& s) {
  if (s == "h0") return SuffixInit::H0;
  if (s == "fwd") return SuffixInit::Fwd;
  if (s == "preheat") return SuffixInit::Preheat;
  throw std::invalid_argument("unknown init '" + s + "' (expected h0|fwd|preheat)");
}

std::string ChunkPlan::to_string() const {
  return std::to_string(n_chunks) + "xF" + std::to_string(fuse);
}

ChunkPlan ChunkPlan::parse(const std::string& text) {
  static const std::regex pattern(R"(^(\d+)xF(\d+)$)");
  std::smatch m;
  if (!std::regex_match(text, m, pattern))
    throw std::invalid_argument("chunk plan '" + text + "' does not match ^(\\d+)xF(\\d+)$");
  ChunkPlan plan;
  plan.n_chunks = std::stoi(m[1].str());
  plan.fuse = std::stoi(m[2].str());
  if (plan.fuse < 1) throw std::invalid_argument("chunk plan '" + text + "': fuse width must be >= 1");
  return plan;
}

int SnlpConfig::resolved_prefix(int n_layers) const {
  return prefix_len >= 0 ? prefix_len : n_layers - plan.suffix_len();
}

void SnlpConfig::validate(const ModelConfig& mc) const {
  if (plan.n_chunks < 0) throw std::invalid_argument("chunk plan: negative chunk count");
  if (plan.fuse < 1) throw std::invalid_argument("chunk plan: fuse width must be >= 1");
  const int s = resolved_prefix(mc.n_layers);
  if (s < 0)
    throw std::invalid_argument("chunk plan covers " + std::to_string(plan.suffix_len()) +
                                " layers but the model has only " + std::to_string(mc.n_layers));
  if (s + plan.suffix_len() != mc.n_layers)
    throw std::invalid_argument("prefix " + std::to_string(s) + " + suffix " +
                                std::to_string(plan.suffix_len()) + " must equal n_layers " +
                                std::to_string(mc.n_layers));
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (plan.fuse > 1 && mc.variant == Variant::Hc)
    throw std::invalid_argument("fused chunks (F > 1) are supported for the standard variant only");
  if (surrogate == Surrogate::Hcn && mc.variant != Variant::Hc)
    throw std::invalid_argument("the hcn surrogate requires the hc variant");
  if (surrogate == Surrogate::Diagn && plan.fuse != 1)
    throw std::invalid_argument("the diagn surrogate supports single-layer units only");
  if (!(elk_lambda >= 0.0f && elk_lambda <= 1.0f))
    throw std::invalid_argument("elk_lambda must lie in [0, 1]");
  if (!ordering.empty()) {
    if (static_cast<int>(ordering.size()) != plan.n_chunks)
      throw std::invalid_argument("ordering must name each of the " +
                                  std::to_string(plan.n_chunks) + " suffix units once");
    std::vector<std::uint8_t> seen(plan.n_chunks, 0);
    for (int v : ordering) {
      if (v < 0 || v >= plan.n_chunks || seen[v])
        throw std::invalid_argument("ordering is not a permutation of the suffix units");
      seen[v] = 1;
    }
  }
  if (!unit_active.empty() && static_cast<int>(unit_active.size()) != plan.n_chunks)
    throw std::invalid_argument("unit_active mask must have one entry per suffix unit");
  if (surrogate == Surrogate::Diagn || surrogate == Surrogate::ExactDense) {
    if (probe.fd_epsilon <= 0.0f) throw std::invalid_argument("probe fd_epsilon must be positive");
    if (surrogate == Surrogate::Diagn && probe.n_probes < 1)
      throw std::invalid_argument("probe n_probes must be >= 1");
  }
  if (init == SuffixInit::Preheat) {
    if (preheat_rank < 1) throw std::invalid_argument("preheat_rank must be >= 1");
    if (preheat_tokens < 1) throw std::invalid_argument("preheat_tokens must be >= 1");
  }
}

std::vector<HiddenState> init_suffix(const ModelWeights& w, const SnlpConfig& cfg,
                                     const HiddenState& h0, const HiddenState& h_s,
                                     const PreheatPredictor* preheat) {
  cfg.validate(w.config);
  const SuffixUnits units = build_units(w, cfg);
  std::vector<HiddenState> states(units.n);
  switch (cfg.init) {
    case SuffixInit::H0:
      for (int c = 0; c < units.n; ++c) states[c] = h_s;
      break;
    case SuffixInit::Fwd: {
#pragma omp parallel for schedule(static)
      for (int c = 0; c < units.n; ++c) states[c] = units.forward(c, h_s);
      break;
    }
    case SuffixInit::Preheat: {
      if (preheat == nullptr)
        throw std::invalid_argument("preheat initialization requires a calibrated predictor");
      if (preheat->first_layer != units.s)
        throw std::invalid_argument("preheat predictor calibrated for prefix " +
                                    std::to_string(preheat->first_layer) + ", solve uses " +
                                    std::to_string(units.s));
      if (static_cast<int>(preheat->fits.size()) < units.n * units.f)
        throw std::invalid_argument("preheat predictor covers fewer layers than the suffix");
      const int width = h0.cols;
      const int rank = preheat->v.cols;
      check_shape(preheat->v, width, rank, "preheat basis");
      for (int c = 0; c < units.n; ++c) {
        const PreheatPredictor::LayerFit& fit = preheat->fits[(c + 1) * units.f - 1];
        check_shape(fit.u, rank, width, "preheat coefficients");
        HiddenState pred(h0.rows, width);
        Vector z(rank);
        for (int t = 0; t < h0.rows; ++t) {
          const float* x = h0.row(t);
          for (int r = 0; r < rank; ++r) {
            double acc = 0.0;
            for (int i = 0; i < width; ++i)
              acc += static_cast<double>(x[i]) * static_cast<double>(preheat->v.at(i, r));
            z[r] = static_cast<float>(acc);
          }
          float* out = pred.row(t);
          for (int i = 0; i < width; ++i) {
            double acc = static_cast<double>(fit.b[i]);
            for (int r = 0; r < rank; ++r)
              acc += static_cast<double>(z[r]) * static_cast<double>(fit.u.at(r, i));
            out[i] = static_cast<float>(acc);
          }
        }
        states[c] = std::move(pred);
      }
      break;
    }
  }
  return states;
}

SuffixSolveResult iterate_suffix(const ModelWeights& w, const SnlpConfig& cfg,
                                 const std::vector<HiddenState>& prefix_states,
                                 std::vector<HiddenState> unit_states) {
  cfg.validate(w.config);
  if (prefix_states.empty())
    throw std::invalid_argument("iterate_suffix needs at least the anchor state h_S");
  const SuffixUnits units = build_units(w, cfg);
  const int n = units.n;
  const int f = units.f;
  if (static_cast<int>(unit_states.size()) != n)
    throw std::invalid_argument("expected " + std::to_string(n) + " initial unit states, got " +
                                std::to_string(unit_states.size()));
  const HiddenState& anchor = prefix_states.back();
  for (const HiddenState& st : unit_states)
    check_shape(st, anchor.rows, anchor.cols, "initial unit state");

  SuffixSolveResult res;
  res.prefix_states = prefix_states;
  res.critical_path_units =
      static_cast<double>(units.s) +
      (n > 0 ? static_cast<double>(cfg.iterations) * static_cast<double>(f) : 0.0);

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (!cfg.ordering.empty()) order = cfg.ordering;
  const bool forward_order = is_forward_order(order);
  const float scale = 1.0f - cfg.elk_lambda;
  const bool corrections_on = scale != 0.0f && cfg.surrogate != Surrogate::None && n > 0;

  std::vector<HiddenState> states = std::move(unit_states);
  // shadow[c] holds states[c] as it was before that unit's most recent
  // update, so a successor's correction delta spans exactly one update of
  // its predecessor no matter when the sweep order reached it.
  std::vector<HiddenState> shadow = states;
  res.per_iteration_states.push_back(states);

  std::vector<HiddenState> tilde(n);
  std::vector<Vector> unit_diag(n);
  std::vector<std::vector<Matrix>> unit_dense(n);
  long long per_token_probe_evals = 0;
  long long probe_builds = 0;

  const auto tilde_pass = [&]() {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < n; ++c) tilde[c] = units.forward(c, c == 0 ? anchor : states[c - 1]);
    res.block_forward_count += units.active_block_cost();
  };
  const auto snapshot_residual = [&]() {
    float r = 0.0f;
    for (int c = 0; c < n; ++c) r = std::max(r, max_abs_diff(states[c], tilde[c]));
    return r;
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    tilde_pass();
    res.residual_norms.push_back(snapshot_residual());

    if (corrections_on) {
      // Unit 0 never receives a correction (its input is the frozen anchor),
      // so its surrogate is not estimated.
      if (cfg.surrogate == Surrogate::Diagn) {
        for (int c = 1; c < n; ++c)
          if (units.is_active(c))
            unit_diag[c] =
                estimate_unit_diag(units, c, states[c - 1], tilde[c], cfg.probe,
                                   probe_stream_seed(cfg.probe.prng_seed, it, c),
                                   res.probe_forward_count);
      } else if (cfg.surrogate == Surrogate::ExactDense) {
        for (int c = 1; c < n; ++c)
          if (units.is_active(c))
            unit_dense[c] = estimate_unit_dense(units, c, states[c - 1], cfg.probe,
                                                per_token_probe_evals, probe_builds);
      }
    }

    if (!corrections_on) {
      for (int c = 0; c < n; ++c) {
        shadow[c] = std::move(states[c]);
        states[c] = tilde[c];
      }
    } else if (cfg.surrogate == Surrogate::Diagn && forward_order) {
      // Forward-ordered diagonal corrections form the elementwise affine
      // recurrence z_c = a_c*z_{c-1} + (tilde_c - a_c*old_{c-1}); solve all
      // units at once with the associative scan.
      const std::size_t sz = anchor.size();
      std::vector<AffineScanElement> elems(n);
      elems[0].a.assign(sz, 0.0f);
      elems[0].b = flatten(tilde[0]);
      for (int c = 1; c < n; ++c) {
        AffineScanElement& e = elems[c];
        e.a.assign(sz, scale);
        if (units.is_active(c)) {
          for (std::size_t i = 0; i < sz; ++i) e.a[i] = scale * unit_diag[c][i];
        }
        const Vector& old_prev = states[c - 1].data;
        e.b.resize(sz);
        for (std::size_t i = 0; i < sz; ++i)
          e.b[i] = static_cast<float>(static_cast<double>(tilde[c].data[i]) -
                                      static_cast<double>(e.a[i]) *
                                          static_cast<double>(old_prev[i]));
      }
      const std::vector<Vector> solved = affine_scan(elems, flatten(anchor));
      for (int c = 0; c < n; ++c) {
        shadow[c] = std::move(states[c]);
        states[c] = unflatten(solved[c], anchor.rows, anchor.cols);
      }
    } else {
      for (int c : order) {
        HiddenState next = tilde[c];
        if (c > 0) {
          const HiddenState& prev_new = states[c - 1];
          const HiddenState& prev_old = shadow[c - 1];
          if (!units.is_active(c) || cfg.surrogate == Surrogate::Idn) {
            // Inactive units are the identity map, whose exact Jacobian is I.
            for (std::size_t i = 0; i < next.size(); ++i)
              next.data[i] = static_cast<float>(
                  static_cast<double>(next.data[i]) +
                  static_cast<double>(scale) * (static_cast<double>(prev_new.data[i]) -
                                                static_cast<double>(prev_old.data[i])));
          } else if (cfg.surrogate == Surrogate::Hcn) {
            HiddenState delta(anchor.rows, anchor.cols);
            for (std::size_t i = 0; i < delta.size(); ++i)
              delta.data[i] = static_cast<float>(static_cast<double>(prev_new.data[i]) -
                                                 static_cast<double>(prev_old.data[i]));
            add_stream_mixed(units.stream_mixer[c], w.config.d_model, delta, scale, next);
          } else if (cfg.surrogate == Surrogate::Diagn) {
            for (std::size_t i = 0; i < next.size(); ++i)
              next.data[i] = static_cast<float>(
                  static_cast<double>(next.data[i]) +
                  static_cast<double>(scale) * static_cast<double>(unit_diag[c][i]) *
                      (static_cast<double>(prev_new.data[i]) -
                       static_cast<double>(prev_old.data[i])));
          } else {  // ExactDense
            const int width = anchor.cols;
            Vector delta(width), jd(width);
            for (int t = 0; t < anchor.rows; ++t) {
              const float* pn = prev_new.row(t);
              const float* po = prev_old.row(t);
              for (int i = 0; i < width; ++i)
                delta[i] = static_cast<float>(static_cast<double>(pn[i]) -
                                              static_cast<double>(po[i]));
              matvec(unit_dense[c][t], delta.data(), jd.data());
              float* out = next.row(t);
              for (int i = 0; i < width; ++i)
                out[i] = static_cast<float>(static_cast<double>(out[i]) +
                                            static_cast<double>(scale) *
                                                static_cast<double>(jd[i]));
            }
          }
        }
        shadow[c] = std::move(states[c]);
        states[c] = std::move(next);
      }
    }

    bool finite = true;
    for (const HiddenState& st : states)
      if (!all_finite(st)) {
        finite = false;
        break;
      }
    res.per_iteration_states.push_back(states);
    if (!finite) {
      res.diverged = true;
      res.diverged_iteration = it;
      break;
    }
  }

  if (!res.diverged) {
    // One extra unit sweep to score the final snapshot's residual.
    tilde_pass();
    res.residual_norms.push_back(snapshot_residual());
  }

  res.probe_forward_count +=
      probe_builds + (per_token_probe_evals + anchor.rows - 1) / std::max(anchor.rows, 1);

  const HiddenState& final_state = n > 0 ? res.per_iteration_states.back().back() : anchor;
  res.logits = readout_logits(w, final_state);
  if (f == 1 && static_cast<int>(prefix_states.size()) == units.s + 1) {
    res.final_trace.states = prefix_states;
    const std::vector<HiddenState>& last = res.per_iteration_states.back();
    res.final_trace.states.insert(res.final_trace.states.end(), last.begin(), last.end());
  }
  return res;
}

SuffixSolveResult snlp_solve(const ModelWeights& w, const std::vector<int>& tokens,
                             const SnlpConfig& cfg, const PreheatPredictor* preheat) {
  cfg.validate(w.config);
  const int s = cfg.resolved_prefix(w.config.n_layers);
  std::vector<HiddenState> prefix;
  prefix.reserve(s + 1);
  prefix.push_back(embed(w, tokens));
  for (int l = 0; l < s; ++l) prefix.push_back(block_forward(w, l, prefix.back()));

  std::vector<HiddenState> states = init_suffix(w, cfg, prefix.front(), prefix.back(), preheat);
  SuffixSolveResult res = iterate_suffix(w, cfg, prefix, std::move(states));
  res.block_forward_count += s;
  if (cfg.init == SuffixInit::Fwd && cfg.plan.n_chunks > 0) {
    const SuffixUnits units = build_units(w, cfg);
    res.block_forward_count += units.active_block_cost();
    res.critical_path_units += cfg.plan.fuse;
  }
  return res;
}

float residual_norm(const ModelWeights& w, const HiddenTrace& trace) {
  if (trace.states.size() < 2) return 0.0f;
  float worst = 0.0f;
  for (std::size_t l = 1; l < trace.states.size(); ++l) {
    const HiddenState pred = block_forward(w, static_cast<int>(l) - 1, trace.states[l - 1]);
    worst = std::max(worst, max_abs_diff(trace.states[l], pred));
  }
  return worst;
}

PreheatPredictor calibrate_preheat(const ModelWeights& w,
                                   const std::vector<int>& calibration_tokens, int prefix_len,
                                   int rank, Prng& prng) {
  const ModelConfig& mc = w.config;
  if (prefix_len < 0 || prefix_len > mc.n_layers)
    throw std::invalid_argument("calibrate_preheat: prefix length out of range");
  if (calibration_tokens.empty())
    throw std::invalid_argument("calibrate_preheat: no calibration tokens");
  const int width = mc.width();
  const int seq_len = std::min<int>(mc.max_seq_len, static_cast<int>(calibration_tokens.size()));
  const int n_seqs = static_cast<int>(calibration_tokens.size()) / seq_len;
  const int n_rows = n_seqs * seq_len;
  const int n_fit_layers = mc.n_layers - prefix_len;
  if (rank < 1 || rank > width || rank * 4 > n_rows)
    throw std::invalid_argument("calibrate_preheat: rank " + std::to_string(rank) +
                                " needs at least " + std::to_string(4 * rank) +
                                " calibration positions, got " + std::to_string(n_rows));

  Matrix x(n_rows, width);
  std::vector<Matrix> y(n_fit_layers, Matrix(n_rows, width));
  for (int sidx = 0; sidx < n_seqs; ++sidx) {
    const std::vector<int> chunk(calibration_tokens.begin() + sidx * seq_len,
                                 calibration_tokens.begin() + (sidx + 1) * seq_len);
    const HiddenTrace trace = sequential_forward(w, chunk);
    for (int t = 0; t < seq_len; ++t) {
      float* xr = x.row(sidx * seq_len + t);
      std::copy(trace.states[0].row(t), trace.states[0].row(t) + width, xr);
      for (int l = 0; l < n_fit_layers; ++l) {
        float* yr = y[l].row(sidx * seq_len + t);
        const float* src = trace.states[prefix_len + 1 + l].row(t);
        std::copy(src, src + width, yr);
      }
    }
  }

  PreheatPredictor pred;
  pred.first_layer = prefix_len;
  pred.v = truncated_svd_basis(x, rank, prng);

  Matrix z(n_rows, rank);
  for (int r = 0; r < n_rows; ++r) {
    const float* xr = x.row(r);
    for (int c = 0; c < rank; ++c) {
      double acc = 0.0;
      for (int i = 0; i < width; ++i)
        acc += static_cast<double>(xr[i]) * static_cast<double>(pred.v.at(i, c));
      z.at(r, c) = static_cast<float>(acc);
    }
  }
  pred.fits.reserve(n_fit_layers);
  for (int l = 0; l < n_fit_layers; ++l) {
    LeastSquaresFit fit = least_squares_fit(z, y[l]);
    pred.fits.push_back({std::move(fit.w), std::move(fit.b)});
  }
  return pred;
}

double matching_loss(const HiddenTrace& seq_trace, const ModelWeights& w, const SnlpConfig& cfg,
                     const std::vector<int>& suffix_lens, int stride, double lambda) {
  if (stride < 0) throw std::invalid_argument("matching_loss: stride must be >= 0");
  const int n_layers = w.config.n_layers;
  if (static_cast<int>(seq_trace.states.size()) != n_layers + 1)
    throw std::invalid_argument("matching_loss: sequential trace must hold h_0..h_L");
  double total = 0.0;
  for (int n_suffix : suffix_lens) {
    if (n_suffix < 1 || n_suffix > n_layers - 1)
      throw std::invalid_argument("matching_loss: suffix length " + std::to_string(n_suffix) +
                                  " must lie in [1, L-1]");
    SnlpConfig solve_cfg = cfg;
    solve_cfg.plan = ChunkPlan{n_suffix, 1};
    solve_cfg.prefix_len = n_layers - n_suffix;
    solve_cfg.iterations = 1;
    solve_cfg.surrogate =
        w.config.variant == Variant::Hc ? Surrogate::Hcn : Surrogate::Idn;
    solve_cfg.init = SuffixInit::H0;
    solve_cfg.elk_lambda = 0.0f;
    solve_cfg.ordering.clear();
    solve_cfg.unit_active.clear();
    const int s = solve_cfg.prefix_len;

    const std::vector<HiddenState> prefix(seq_trace.states.begin(),
                                          seq_trace.states.begin() + s + 1);
    std::vector<HiddenState> states(n_suffix, prefix.back());
    const SuffixSolveResult res = iterate_suffix(w, solve_cfg, prefix, std::move(states));
    const std::vector<HiddenState>& estimate = res.per_iteration_states.back();

    std::vector<int> targets{n_layers};
    if (stride > 0)
      for (int l = s + stride; l < n_layers; l += stride) targets.push_back(l);
    for (int l : targets) {
      const HiddenState& est = estimate[l - s - 1];
      const HiddenState& ref = seq_trace.states[l];
      double num = 0.0;
      for (std::size_t i = 0; i < est.size(); ++i) {
        const double d = static_cast<double>(est.data[i]) - static_cast<double>(ref.data[i]);
        num += d * d;
      }
      total += std::sqrt(num) / (frobenius_norm(ref) + 1e-8);
    }
  }
  return lambda * total;
}

double critical_path_speedup(int n_layers, const SnlpConfig& cfg, bool charge_fwd_init) {
  const int s = cfg.resolved_prefix(n_layers);
  if (cfg.plan.n_chunks == 0) return 1.0;
  double denom = static_cast<double>(s) +
                 static_cast<double>(cfg.iterations) * static_cast<double>(cfg.plan.fuse);
  if (charge_fwd_init && cfg.init == SuffixInit::Fwd) denom += cfg.plan.fuse;
  if (denom <= 0.0) return std::numeric_limits<double>::infinity();
  return static_cast<double>(n_layers) / denom;
}

}  // namespace snlp
