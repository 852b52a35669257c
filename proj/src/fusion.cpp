#include "snlp/fusion.hpp"

#include <cstddef>
#include <cstring>
#include <stdexcept>

#include "kernels_internal.hpp"

namespace snlp {

using detail::attend_one;
using detail::gelu64;
using detail::RopeTable;

namespace {

void rmsnorm_row(const float* x, const float* gain, int d, float* y) {
  detail::rmsnorm_row(x, gain, d, kRmsEps, y);
}

// Sum of member attention branches at the shared input h; per-member branch
// values are written to a_members (seq x d each) when requested.
void attention_branches(const ChunkWeights& chunk, const ModelWeights& w, const HiddenState& h,
                        std::vector<Matrix>* a_members, Matrix& a_sum) {
  const ModelConfig& cfg = w.config;
  const int seq = h.rows, d = cfg.d_model, f = chunk.fuse_width();
  const RopeTable rope(d, cfg.n_heads, cfg.rope_base);

  a_sum = Matrix(seq, d);
  if (a_members) a_members->assign(static_cast<std::size_t>(f), Matrix(seq, d));

  Matrix q(seq, d), k(seq, d), v(seq, d);
  std::vector<float> nx(static_cast<std::size_t>(d)), ao(static_cast<std::size_t>(d)),
      bo(static_cast<std::size_t>(d));
  for (int m = 0; m < f; ++m) {
    for (int t = 0; t < seq; ++t) {
      rmsnorm_row(h.row(t), chunk.attn_norm_gains[static_cast<std::size_t>(m)].data(), d,
                  nx.data());
      detail::matvec_rows(chunk.wq_fused, m * d, d, nx.data(), q.row(t));
      detail::matvec_rows(chunk.wk_fused, m * d, d, nx.data(), k.row(t));
      detail::matvec_rows(chunk.wv_fused, m * d, d, nx.data(), v.row(t));
      rope.apply(q.row(t), cfg.n_heads, t);
      rope.apply(k.row(t), cfg.n_heads, t);
    }
    for (int t = 0; t < seq; ++t) {
      attend_one(q.row(t), k, v, cfg.n_heads, t, ao.data());
      detail::matvec_col_slice(chunk.wo_fused, m * d, d, ao.data(), bo.data());
      float* sum_row = a_sum.row(t);
      for (int i = 0; i < d; ++i) sum_row[i] += bo[i];
      if (a_members) {
        float* mr = (*a_members)[static_cast<std::size_t>(m)].row(t);
        for (int i = 0; i < d; ++i) mr[i] = bo[i];
      }
    }
  }
}

// Member m's MLP branch at one position of x.
void member_mlp(const ChunkWeights& chunk, const ModelWeights& w, int m, const float* x,
                float* out) {
  const int d = w.config.d_model, d_ff = w.config.d_ff;
  std::vector<float> nx(static_cast<std::size_t>(d)), z(static_cast<std::size_t>(d_ff));
  rmsnorm_row(x, chunk.mlp_norm_gains[static_cast<std::size_t>(m)].data(), d, nx.data());
  detail::matvec_rows(chunk.w_up_fused, m * d_ff, d_ff, nx.data(), z.data());
  for (int i = 0; i < d_ff; ++i) z[i] = static_cast<float>(gelu64(static_cast<double>(z[i])));
  detail::matvec_col_slice(chunk.w_down_fused, m * d_ff, d_ff, z.data(), out);
}

}  // namespace

ChunkWeights build_fused_chunk(const ModelWeights& w, int first_layer, int fuse) {
  const ModelConfig& cfg = w.config;
  if (cfg.variant != Variant::Standard)
    throw std::invalid_argument("build_fused_chunk: fusion supports the standard variant only");
  if (fuse < 1) throw std::invalid_argument("build_fused_chunk: fuse width must be >= 1");
  if (first_layer < 0 || first_layer + fuse > cfg.n_layers)
    throw std::invalid_argument("build_fused_chunk: member layers out of range");

  const int d = cfg.d_model, d_ff = cfg.d_ff;
  ChunkWeights c;
  c.wq_fused = Matrix(fuse * d, d);
  c.wk_fused = Matrix(fuse * d, d);
  c.wv_fused = Matrix(fuse * d, d);
  c.wo_fused = Matrix(d, fuse * d);
  c.w_up_fused = Matrix(fuse * d_ff, d);
  c.w_down_fused = Matrix(d, fuse * d_ff);
  for (int m = 0; m < fuse; ++m) {
    const LayerWeights& lw = w.layers[static_cast<std::size_t>(first_layer + m)];
    c.member_layers.push_back(first_layer + m);
    c.attn_norm_gains.push_back(lw.attn_norm_gain);
    c.mlp_norm_gains.push_back(lw.mlp_norm_gain);
    for (int r = 0; r < d; ++r) {
      std::memcpy(c.wq_fused.row(m * d + r), lw.wq.row(r), sizeof(float) * d);
      std::memcpy(c.wk_fused.row(m * d + r), lw.wk.row(r), sizeof(float) * d);
      std::memcpy(c.wv_fused.row(m * d + r), lw.wv.row(r), sizeof(float) * d);
      std::memcpy(c.wo_fused.row(r) + m * d, lw.wo.row(r), sizeof(float) * d);
      std::memcpy(c.w_down_fused.row(r) + m * d_ff, lw.w_down.row(r), sizeof(float) * d_ff);
    }
    for (int r = 0; r < d_ff; ++r)
      std::memcpy(c.w_up_fused.row(m * d_ff + r), lw.w_up.row(r), sizeof(float) * d);
  }
  return c;
}

HiddenState chunk_forward(const ChunkWeights& chunk, const ModelWeights& w, const HiddenState& h) {
  const ModelConfig& cfg = w.config;
  if (h.cols != cfg.d_model) throw std::invalid_argument("chunk_forward: bad hidden width");
  const int seq = h.rows, d = cfg.d_model, f = chunk.fuse_width();

  Matrix a_sum;
  attention_branches(chunk, w, h, nullptr, a_sum);
  HiddenState u(seq, d);
  for (int t = 0; t < seq; ++t) {
    const float* hr = h.row(t);
    const float* ar = a_sum.row(t);
    for (int i = 0; i < d; ++i) u.row(t)[i] = hr[i] + ar[i];
  }

  HiddenState out = u;
  std::vector<float> mo(static_cast<std::size_t>(d));
  for (int m = 0; m < f; ++m) {
    for (int t = 0; t < seq; ++t) {
      member_mlp(chunk, w, m, u.row(t), mo.data());
      float* orow = out.row(t);
      for (int i = 0; i < d; ++i) orow[i] += mo[i];
    }
  }
  return out;
}

HiddenState cross_coupling_term(const ChunkWeights& chunk, const ModelWeights& w,
                                const HiddenState& h) {
  const ModelConfig& cfg = w.config;
  if (h.cols != cfg.d_model) throw std::invalid_argument("cross_coupling_term: bad hidden width");
  const int seq = h.rows, d = cfg.d_model, f = chunk.fuse_width();

  std::vector<Matrix> a_members;
  Matrix a_sum;
  attention_branches(chunk, w, h, &a_members, a_sum);

  HiddenState term(seq, d);
  std::vector<float> u_full(static_cast<std::size_t>(d)), u_own(static_cast<std::size_t>(d)),
      mo_full(static_cast<std::size_t>(d)), mo_own(static_cast<std::size_t>(d));
  for (int t = 0; t < seq; ++t) {
    const float* hr = h.row(t);
    const float* ar = a_sum.row(t);
    for (int i = 0; i < d; ++i) u_full[i] = hr[i] + ar[i];
    float* orow = term.row(t);
    for (int m = 0; m < f; ++m) {
      const float* am = a_members[static_cast<std::size_t>(m)].row(t);
      for (int i = 0; i < d; ++i) u_own[i] = hr[i] + am[i];
      member_mlp(chunk, w, m, u_full.data(), mo_full.data());
      member_mlp(chunk, w, m, u_own.data(), mo_own.data());
      for (int i = 0; i < d; ++i) orow[i] += mo_full[i] - mo_own[i];
    }
  }
  return term;
}

}  // namespace snlp
