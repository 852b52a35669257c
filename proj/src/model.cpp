#include "snlp/model.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "kernels_internal.hpp"

namespace snlp {

using detail::attend_one;
using detail::combine_streams;
using detail::gelu64;
using detail::mix_streams;
using detail::RopeTable;

namespace {

void rmsnorm_row(const float* x, const float* gain, int d, float* y) {
  detail::rmsnorm_row(x, gain, d, kRmsEps, y);
}

// MLP branch value at one position: w_down(gelu(w_up(rmsnorm(x) * gain))).
void mlp_branch(const LayerWeights& lw, const float* x, int d, int d_ff, float* out) {
  std::vector<float> nx(static_cast<std::size_t>(d));
  rmsnorm_row(x, lw.mlp_norm_gain.data(), d, nx.data());
  std::vector<float> z(static_cast<std::size_t>(d_ff));
  matvec(lw.w_up, nx.data(), z.data());
  for (int i = 0; i < d_ff; ++i) z[i] = static_cast<float>(gelu64(static_cast<double>(z[i])));
  matvec(lw.w_down, z.data(), out);
}

Matrix gaussian_matrix(int rows, int cols, Prng& prng, float scale) {
  Matrix m(rows, cols);
  for (float& v : m.data) v = scale * prng.next_gaussian();
  return m;
}

}  // namespace

std::string variant_name(Variant v) { return v == Variant::Hc ? "hc" : "standard"; }

Variant variant_from_name(const std::string& s) {
  if (s == "standard") return Variant::Standard;
  if (s == "hc") return Variant::Hc;
  throw std::invalid_argument("unknown variant '" + s + "' (expected 'standard' or 'hc')");
}

void ModelConfig::validate() const {
  if (n_layers <= 0) throw std::invalid_argument("ModelConfig: n_layers must be positive");
  if (d_model <= 0 || n_heads <= 0 || d_ff <= 0 || vocab_size <= 0 || max_seq_len <= 0)
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0)
    throw std::invalid_argument("ModelConfig: head_dim must be even for rotary embeddings");
  if (variant == Variant::Hc && hc_streams < 2)
    throw std::invalid_argument("ModelConfig: HC variant needs hc_streams >= 2");
  if (variant == Variant::Standard && hc_streams != 1)
    throw std::invalid_argument("ModelConfig: standard variant needs hc_streams == 1");
  if (!(rope_base > 0.0f)) throw std::invalid_argument("ModelConfig: rope_base must be positive");
}

ModelWeights init_model(const ModelConfig& cfg, Prng& prng, float branch_gain) {
  cfg.validate();
  const int d = cfg.d_model, m = cfg.hc_streams;
  const float s = 0.02f;
  ModelWeights w;
  w.config = cfg;
  w.token_embedding = gaussian_matrix(cfg.vocab_size, d, prng, s);
  w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (LayerWeights& lw : w.layers) {
    lw.attn_norm_gain.assign(static_cast<std::size_t>(d), 1.0f);
    lw.wq = gaussian_matrix(d, d, prng, s);
    lw.wk = gaussian_matrix(d, d, prng, s);
    lw.wv = gaussian_matrix(d, d, prng, s);
    lw.wo = gaussian_matrix(d, d, prng, s * branch_gain);
    if (cfg.variant == Variant::Hc) {
      lw.h_pre_attn = Matrix(1, m);
      for (int i = 0; i < m; ++i) lw.h_pre_attn.at(0, i) = 1.0f / static_cast<float>(m);
      lw.h_post_attn = gaussian_matrix(m, 1, prng, s * branch_gain);
      lw.h_res_attn = Matrix(m, m);
      for (int i = 0; i < m; ++i) lw.h_res_attn.at(i, i) = 1.0f;
    }
    lw.mlp_norm_gain.assign(static_cast<std::size_t>(d), 1.0f);
    lw.w_up = gaussian_matrix(cfg.d_ff, d, prng, s);
    lw.w_down = gaussian_matrix(d, cfg.d_ff, prng, s * branch_gain);
    if (cfg.variant == Variant::Hc) {
      lw.h_pre_mlp = Matrix(1, m);
      for (int i = 0; i < m; ++i) lw.h_pre_mlp.at(0, i) = 1.0f / static_cast<float>(m);
      lw.h_post_mlp = gaussian_matrix(m, 1, prng, s * branch_gain);
      lw.h_res_mlp = Matrix(m, m);
      for (int i = 0; i < m; ++i) lw.h_res_mlp.at(i, i) = 1.0f;
    }
  }
  w.final_norm_gain.assign(static_cast<std::size_t>(d), 1.0f);
  w.lm_head = gaussian_matrix(d, cfg.vocab_size, prng, s);
  return w;
}

HiddenState embed(const ModelWeights& w, const std::vector<int>& tokens) {
  const ModelConfig& cfg = w.config;
  if (tokens.empty()) throw std::invalid_argument("embed: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw std::invalid_argument("embed: sequence exceeds max_seq_len");
  const int d = cfg.d_model, m = cfg.hc_streams;
  HiddenState h(static_cast<int>(tokens.size()), cfg.width());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] < 0 || tokens[t] >= cfg.vocab_size)
      throw std::invalid_argument("embed: token id out of range at position " + std::to_string(t));
    const float* e = w.token_embedding.row(tokens[t]);
    float* row = h.row(static_cast<int>(t));
    for (int st = 0; st < (cfg.variant == Variant::Hc ? m : 1); ++st)
      for (int i = 0; i < d; ++i) row[st * d + i] = e[i];
  }
  return h;
}

void block_forward(const ModelWeights& w, int layer_idx, const HiddenState& in, HiddenState& out) {
  const ModelConfig& cfg = w.config;
  if (layer_idx < 0 || layer_idx >= cfg.n_layers)
    throw std::invalid_argument("block_forward: layer index out of range");
  if (in.cols != cfg.width()) throw std::invalid_argument("block_forward: bad hidden width");
  const LayerWeights& lw = w.layers[static_cast<std::size_t>(layer_idx)];
  const int seq = in.rows, d = cfg.d_model;
  const bool hc = cfg.variant == Variant::Hc;
  const RopeTable rope(d, cfg.n_heads, cfg.rope_base);

  // Attention sublayer.
  Matrix q(seq, d), k(seq, d), v(seq, d);
  std::vector<float> bi(static_cast<std::size_t>(d)), nx(static_cast<std::size_t>(d));
  for (int t = 0; t < seq; ++t) {
    const float* row = in.row(t);
    const float* branch_in = row;
    if (hc) {
      combine_streams(row, lw.h_pre_attn, d, bi.data());
      branch_in = bi.data();
    }
    rmsnorm_row(branch_in, lw.attn_norm_gain.data(), d, nx.data());
    matvec(lw.wq, nx.data(), q.row(t));
    matvec(lw.wk, nx.data(), k.row(t));
    matvec(lw.wv, nx.data(), v.row(t));
    rope.apply(q.row(t), cfg.n_heads, t);
    rope.apply(k.row(t), cfg.n_heads, t);
  }
  HiddenState u(seq, cfg.width());
  std::vector<float> ao(static_cast<std::size_t>(d)), bo(static_cast<std::size_t>(d));
  for (int t = 0; t < seq; ++t) {
    attend_one(q.row(t), k, v, cfg.n_heads, t, ao.data());
    matvec(lw.wo, ao.data(), bo.data());
    if (hc) {
      mix_streams(in.row(t), bo.data(), lw.h_res_attn, lw.h_post_attn, d, u.row(t));
    } else {
      const float* row = in.row(t);
      for (int i = 0; i < d; ++i) u.row(t)[i] = row[i] + bo[i];
    }
  }

  // MLP sublayer.
  out = HiddenState(seq, cfg.width());
  std::vector<float> mo(static_cast<std::size_t>(d));
  for (int t = 0; t < seq; ++t) {
    const float* row = u.row(t);
    const float* branch_in = row;
    if (hc) {
      combine_streams(row, lw.h_pre_mlp, d, bi.data());
      branch_in = bi.data();
    }
    mlp_branch(lw, branch_in, d, cfg.d_ff, mo.data());
    if (hc) {
      mix_streams(row, mo.data(), lw.h_res_mlp, lw.h_post_mlp, d, out.row(t));
    } else {
      for (int i = 0; i < d; ++i) out.row(t)[i] = row[i] + mo[i];
    }
  }
}

HiddenState block_forward(const ModelWeights& w, int layer_idx, const HiddenState& in) {
  HiddenState out;
  block_forward(w, layer_idx, in, out);
  return out;
}

HiddenTrace sequential_forward(const ModelWeights& w, const std::vector<int>& tokens) {
  HiddenTrace trace;
  trace.states.reserve(static_cast<std::size_t>(w.config.n_layers) + 1);
  trace.states.push_back(embed(w, tokens));
  for (int l = 0; l < w.config.n_layers; ++l)
    trace.states.push_back(block_forward(w, l, trace.states.back()));
  return trace;
}

Matrix readout_logits(const ModelWeights& w, const HiddenState& h_last) {
  const ModelConfig& cfg = w.config;
  if (h_last.cols != cfg.width()) throw std::invalid_argument("readout_logits: bad hidden width");
  const int d = cfg.d_model, m = cfg.hc_streams;
  Matrix logits(h_last.rows, cfg.vocab_size);
  std::vector<float> r(static_cast<std::size_t>(d)), nr(static_cast<std::size_t>(d));
  for (int t = 0; t < h_last.rows; ++t) {
    const float* row = h_last.row(t);
    if (cfg.variant == Variant::Hc) {
      for (int i = 0; i < d; ++i) {
        double acc = 0.0;
        for (int st = 0; st < m; ++st) acc += static_cast<double>(row[st * d + i]);
        r[i] = static_cast<float>(acc / m);
      }
    } else {
      for (int i = 0; i < d; ++i) r[i] = row[i];
    }
    rmsnorm_row(r.data(), w.final_norm_gain.data(), d, nr.data());
    matvec_transposed(w.lm_head, nr.data(), logits.row(t));
  }
  return logits;
}

// ----- BlockProbe ------------------------------------------------------------

BlockProbe::BlockProbe(const ModelWeights& w, int layer_idx, const HiddenState& base)
    : w_(w), layer_idx_(layer_idx), seq_(base.rows), width_(w.config.width()) {
  const ModelConfig& cfg = w.config;
  if (layer_idx < 0 || layer_idx >= cfg.n_layers)
    throw std::invalid_argument("BlockProbe: layer index out of range");
  if (base.cols != cfg.width()) throw std::invalid_argument("BlockProbe: bad hidden width");
  const LayerWeights& lw = w.layers[static_cast<std::size_t>(layer_idx)];
  const int d = cfg.d_model;
  const bool hc = cfg.variant == Variant::Hc;
  const RopeTable rope(d, cfg.n_heads, cfg.rope_base);

  base_k_ = Matrix(seq_, d);
  base_v_ = Matrix(seq_, d);
  std::vector<float> bi(static_cast<std::size_t>(d)), nx(static_cast<std::size_t>(d));
  for (int t = 0; t < seq_; ++t) {
    const float* row = base.row(t);
    const float* branch_in = row;
    if (hc) {
      combine_streams(row, lw.h_pre_attn, d, bi.data());
      branch_in = bi.data();
    }
    rmsnorm_row(branch_in, lw.attn_norm_gain.data(), d, nx.data());
    matvec(lw.wk, nx.data(), base_k_.row(t));
    matvec(lw.wv, nx.data(), base_v_.row(t));
    rope.apply(base_k_.row(t), cfg.n_heads, t);
  }
}

void BlockProbe::attn_stage(int pos, const float* row, float* stage_out) const {
  const ModelConfig& cfg = w_.config;
  const LayerWeights& lw = w_.layers[static_cast<std::size_t>(layer_idx_)];
  const int d = cfg.d_model;
  const bool hc = cfg.variant == Variant::Hc;
  const RopeTable rope(d, cfg.n_heads, cfg.rope_base);

  std::vector<float> bi(static_cast<std::size_t>(d)), nx(static_cast<std::size_t>(d));
  const float* branch_in = row;
  if (hc) {
    combine_streams(row, lw.h_pre_attn, d, bi.data());
    branch_in = bi.data();
  }
  rmsnorm_row(branch_in, lw.attn_norm_gain.data(), d, nx.data());
  std::vector<float> q(static_cast<std::size_t>(d)), kk(static_cast<std::size_t>(d)),
      vv(static_cast<std::size_t>(d));
  matvec(lw.wq, nx.data(), q.data());
  matvec(lw.wk, nx.data(), kk.data());
  matvec(lw.wv, nx.data(), vv.data());
  rope.apply(q.data(), cfg.n_heads, pos);
  rope.apply(kk.data(), cfg.n_heads, pos);

  // Attention over cached base rows for s < pos, probe's own k/v at s = pos.
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> score(static_cast<std::size_t>(pos) + 1);
  std::vector<float> ao(static_cast<std::size_t>(d)), bo(static_cast<std::size_t>(d));
  for (int h = 0; h < cfg.n_heads; ++h) {
    const int off = h * dh;
    double mx = -1e300;
    for (int s = 0; s <= pos; ++s) {
      const float* krow = (s == pos) ? kk.data() : base_k_.row(s);
      score[s] = dot64(q.data() + off, krow + off, dh) * scale;
      if (score[s] > mx) mx = score[s];
    }
    double z = 0.0;
    for (int s = 0; s <= pos; ++s) {
      score[s] = std::exp(score[s] - mx);
      z += score[s];
    }
    for (int i = 0; i < dh; ++i) {
      double acc = 0.0;
      for (int s = 0; s <= pos; ++s) {
        const float* vrow = (s == pos) ? vv.data() : base_v_.row(s);
        acc += score[s] * static_cast<double>(vrow[off + i]);
      }
      ao[off + i] = static_cast<float>(acc / z);
    }
  }
  matvec(lw.wo, ao.data(), bo.data());
  if (hc) {
    mix_streams(row, bo.data(), lw.h_res_attn, lw.h_post_attn, d, stage_out);
  } else {
    for (int i = 0; i < d; ++i) stage_out[i] = row[i] + bo[i];
  }
}

void BlockProbe::eval(int pos, const float* row, float* out) const {
  if (pos < 0 || pos >= seq_) throw std::invalid_argument("BlockProbe::eval: bad position");
  const ModelConfig& cfg = w_.config;
  const LayerWeights& lw = w_.layers[static_cast<std::size_t>(layer_idx_)];
  const int d = cfg.d_model;
  const bool hc = cfg.variant == Variant::Hc;

  std::vector<float> u(static_cast<std::size_t>(width_));
  attn_stage(pos, row, u.data());

  std::vector<float> bi(static_cast<std::size_t>(d)), mo(static_cast<std::size_t>(d));
  const float* branch_in = u.data();
  if (hc) {
    combine_streams(u.data(), lw.h_pre_mlp, d, bi.data());
    branch_in = bi.data();
  }
  mlp_branch(lw, branch_in, d, cfg.d_ff, mo.data());
  if (hc) {
    mix_streams(u.data(), mo.data(), lw.h_res_mlp, lw.h_post_mlp, d, out);
  } else {
    for (int i = 0; i < d; ++i) out[i] = u[i] + mo[i];
  }
}

Matrix per_token_jacobian(const ModelWeights& w, int layer_idx, const HiddenState& base, int pos,
                          float eps) {
  BlockProbe probe(w, layer_idx, base);
  const int n = probe.width();
  std::vector<float> base_out(static_cast<std::size_t>(n)), probe_out(static_cast<std::size_t>(n)),
      row(base.row(pos), base.row(pos) + n);
  probe.eval(pos, row.data(), base_out.data());
  Matrix j(n, n);
  for (int c = 0; c < n; ++c) {
    const float saved = row[c];
    row[c] = saved + eps;
    probe.eval(pos, row.data(), probe_out.data());
    row[c] = saved;
    for (int r = 0; r < n; ++r) j.at(r, c) = (probe_out[r] - base_out[r]) / eps;
  }
  return j;
}

}  // namespace snlp
