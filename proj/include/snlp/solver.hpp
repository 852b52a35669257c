#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "snlp/fusion.hpp"
#include "snlp/jacobian.hpp"
#include "snlp/model.hpp"
#include "snlp/prng.hpp"

namespace snlp {

enum class Surrogate { None, Idn, Hcn, Diagn, ExactDense };
std::string surrogate_name(Surrogate s);
Surrogate surrogate_from_name(const std::string& s);

enum class SuffixInit { H0, Fwd, Preheat };
std::string init_name(SuffixInit i);
SuffixInit init_from_name(const std::string& s);

// "NxFM": N parallel chunks, each fusing M contiguous layers. The suffix
// holds N*M layers; the prefix is everything before it.
struct ChunkPlan {
  int n_chunks = 0;
  int fuse = 1;

  int suffix_len() const { return n_chunks * fuse; }
  std::string to_string() const;
  static ChunkPlan parse(const std::string& text);
};

// Low-rank linear predictor of suffix states from the token embedding:
// state(x0) = (x0 V) U + b per predicted layer.
struct PreheatPredictor {
  int first_layer = 0;  // 0-based index of the first predicted layer
  Matrix v;             // width x rank projection basis
  struct LayerFit {
    Matrix u;  // rank x width
    Vector b;  // width
  };
  std::vector<LayerFit> fits;  // layers first_layer .. L-1
};

struct SnlpConfig {
  ChunkPlan plan;
  int prefix_len = -1;  // -1 derives n_layers - suffix_len
  int iterations = 1;   // K >= 0
  Surrogate surrogate = Surrogate::Idn;
  SuffixInit init = SuffixInit::H0;
  float elk_lambda = 0.0f;    // correction scaled by (1 - elk_lambda)
  std::vector<int> ordering;  // 0-based unit permutation; empty = forward
  JacobianProbeConfig probe;  // DiagN / ExactDense estimation
  int preheat_rank = 8;
  int preheat_tokens = 128;
  std::uint64_t preheat_seed = 1234;
  // Unit activation mask for propagation ablations: inactive units are the
  // identity map. Empty = all active. Not part of the JSON schema.
  std::vector<std::uint8_t> unit_active;

  int resolved_prefix(int n_layers) const;
  void validate(const ModelConfig& cfg) const;
};

struct SuffixSolveResult {
  std::vector<HiddenState> prefix_states;  // h_0 .. h_S as provided/computed
  // K+1 snapshots of the suffix unit outputs; snapshot 0 is the
  // initialization. Shorter if the solve diverged mid-way.
  std::vector<std::vector<HiddenState>> per_iteration_states;
  HiddenTrace final_trace;            // full layer trace; populated for F=1 plans only
  std::vector<float> residual_norms;  // max-abs unit residual per snapshot
  Matrix logits;                      // readout of the final state estimate
  // Full-width block evaluations: prefix, unit sweeps, fwd-init pass and the
  // final residual round. FD probe work is tracked separately in full-block
  // equivalents (per-token probes count as 1/seq each, rounded up).
  long long block_forward_count = 0;
  long long probe_forward_count = 0;
  double critical_path_units = 0.0;  // S + K*F (+F when init = fwd)
  bool diverged = false;
  int diverged_iteration = -1;  // 0-based iteration where states went non-finite
};

// Initial suffix unit states. h0 is the embedding state (needed by the
// preheat predictor), h_s the prefix output.
std::vector<HiddenState> init_suffix(const ModelWeights& w, const SnlpConfig& cfg,
                                     const HiddenState& h0, const HiddenState& h_s,
                                     const PreheatPredictor* preheat);

// Runs the suffix iteration from explicit initial unit states. prefix_states
// must end with the anchor h_S; passing the full h_0..h_S run makes the F=1
// final trace complete. Exposed so tests can decouple the initialization
// from the anchor.
SuffixSolveResult iterate_suffix(const ModelWeights& w, const SnlpConfig& cfg,
                                 const std::vector<HiddenState>& prefix_states,
                                 std::vector<HiddenState> unit_states);

SuffixSolveResult snlp_solve(const ModelWeights& w, const std::vector<int>& tokens,
                             const SnlpConfig& cfg, const PreheatPredictor* preheat = nullptr);

// max over layers of the max-abs entry of h_l - f_l(h_{l-1}).
float residual_norm(const ModelWeights& w, const HiddenTrace& trace);

// Fits the preheat predictor on a calibration run: V from the truncated SVD
// of the h_0 rows, per-layer (U, b) by ridge least squares against the
// sequential states.
PreheatPredictor calibrate_preheat(const ModelWeights& w, const std::vector<int>& calibration_tokens,
                                   int prefix_len, int rank, Prng& prng);

// Value of the depth-consistency regularizer: for each suffix length N in
// suffix_lens, a K=1 solve (IDN for Standard, HCN for HC, init h0, F=1) is
// compared against the sequential trace at the target layers
//   stride == 0 : {L}
//   stride  > 0 : {L} plus S+stride, S+2*stride, ... below L
// summing lambda * ||h_hat_l - h_l|| / (||h_l|| + 1e-8).
double matching_loss(const HiddenTrace& seq_trace, const ModelWeights& w, const SnlpConfig& cfg,
                     const std::vector<int>& suffix_lens, int stride, double lambda);

// Idealized depth-cost ratio L / (S + K*F), charging one extra F-wide pass
// when init = fwd and charge_fwd_init is set. A sequential configuration
// (empty suffix) costs L.
double critical_path_speedup(int n_layers, const SnlpConfig& cfg, bool charge_fwd_init = true);

}  // namespace snlp
