#pragma once

#include <string>
#include <vector>

#include "snlp/matrix.hpp"
#include "snlp/prng.hpp"

namespace snlp {

enum class Variant { Standard, Hc };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& s);

struct ModelConfig {
  int n_layers = 8;
  int d_model = 32;
  int n_heads = 2;
  int d_ff = 64;
  int vocab_size = 64;
  int max_seq_len = 64;
  Variant variant = Variant::Standard;
  int hc_streams = 1;  // M; >= 2 for the HC variant, 1 otherwise
  float rope_base = 10000.0f;

  // Hidden row width: d_model, or M stacked d_model-wide streams for HC.
  int width() const { return variant == Variant::Hc ? hc_streams * d_model : d_model; }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct LayerWeights {
  Vector attn_norm_gain;  // d
  Matrix wq, wk, wv, wo;  // d x d
  Vector mlp_norm_gain;   // d
  Matrix w_up;            // d_ff x d
  Matrix w_down;          // d x d_ff
  // HC stream mixers; empty in the Standard variant.
  Matrix h_pre_attn, h_post_attn, h_res_attn;  // 1xM, Mx1, MxM
  Matrix h_pre_mlp, h_post_mlp, h_res_mlp;
};

struct ModelWeights {
  ModelConfig config;
  Matrix token_embedding;  // vocab x d
  std::vector<LayerWeights> layers;
  Vector final_norm_gain;  // d
  Matrix lm_head;          // d_model x vocab
};

// Gaussian(0, 0.02) projections, with the branch output projections
// (wo, w_down, h_post) additionally scaled by branch_gain. Norm gains are 1,
// h_res identity, h_pre uniform 1/M. Arrays are filled in checkpoint order,
// so a fixed seed reproduces the model bitwise.
ModelWeights init_model(const ModelConfig& cfg, Prng& prng, float branch_gain = 0.1f);

using HiddenState = Matrix;  // seq x width

struct HiddenTrace {
  std::vector<HiddenState> states;  // h_0 .. h_L
};

inline constexpr float kRmsEps = 1e-6f;

// h_0: embedding rows, replicated across streams for HC.
HiddenState embed(const ModelWeights& w, const std::vector<int>& tokens);

// out = f_{layer_idx}(in); layer_idx is 0-based, so layer_idx = l-1 for h_l.
void block_forward(const ModelWeights& w, int layer_idx, const HiddenState& in, HiddenState& out);
HiddenState block_forward(const ModelWeights& w, int layer_idx, const HiddenState& in);

HiddenTrace sequential_forward(const ModelWeights& w, const std::vector<int>& tokens);

// lm_head(final_norm(readout(h))); readout is the mean over streams for HC.
Matrix readout_logits(const ModelWeights& w, const HiddenState& h_last);

// Per-position probe context for one layer: every position of `base` is
// frozen except the probed one, whose row is replaced per call. Keys and
// values of frozen positions are cached once, which makes dense per-token
// Jacobian probes cost one position, not one sequence.
class BlockProbe {
 public:
  BlockProbe(const ModelWeights& w, int layer_idx, const HiddenState& base);
  int width() const { return width_; }
  // row: width() inputs for the probed position; out: width() outputs.
  void eval(int pos, const float* row, float* out) const;

 private:
  void attn_stage(int pos, const float* row, float* stage_out) const;

  const ModelWeights& w_;
  int layer_idx_;
  int seq_;
  int width_;
  Matrix base_k_;  // seq x d, roped keys of the frozen state
  Matrix base_v_;  // seq x d
};

// Dense per-token Jacobian of f_{layer_idx} at position pos (width x width),
// forward differences with step eps, other positions frozen.
Matrix per_token_jacobian(const ModelWeights& w, int layer_idx, const HiddenState& base, int pos,
                          float eps);

}  // namespace snlp
