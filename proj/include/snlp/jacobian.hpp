#pragma once

#include <cstdint>
#include <functional>

#include "snlp/matrix.hpp"
#include "snlp/model.hpp"
#include "snlp/prng.hpp"

namespace snlp {

struct JacobianProbeConfig {
  float fd_epsilon = 1e-3f;
  int n_probes = 8;
  std::uint64_t prng_seed = 0x5eed;
};

// (f(x + eps v) - f(x)) / eps on full hidden states.
HiddenState fd_jvp(const std::function<HiddenState(const HiddenState&)>& f, const HiddenState& x,
                   const HiddenState& v, float eps);

// Column-by-column forward differences. Guards against flattened dimensions
// above 4096; this is the test oracle and the source of exact surrogates.
Matrix dense_jacobian_fd(const std::function<Vector(const Vector&)>& f, const Vector& x, float eps);

// diag(J) estimated as mean_p v_p * (J v_p) with Rademacher probes; exact
// for diagonal J at any probe count.
Vector hutchinson_diag(const std::function<Vector(const Vector&)>& f, const Vector& x,
                       const JacobianProbeConfig& cfg);

// ||J||_F estimated from mean_p ||J v_p||^2 with Rademacher probes.
float hutchinson_frobenius(const std::function<Vector(const Vector&)>& f, const Vector& x,
                           const JacobianProbeConfig& cfg);

struct LayerJacobianReport {
  float sigma_max = 0.0f;      // largest singular value of the branch Jacobian J_g
  float frob_norm = 0.0f;      // ||J_g||_F
  float amplification = 0.0f;  // mean ||J_f v|| / ||v|| over probes
};

// Per-token diagnostics of layer l at probe position pos (default: last).
// g is the residual branch f(x) - x restricted to the probed position.
LayerJacobianReport layer_report(const ModelWeights& w, int layer_idx, const HiddenState& x,
                                 const JacobianProbeConfig& cfg, int pos = -1);

}  // namespace snlp
