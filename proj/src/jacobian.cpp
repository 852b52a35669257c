#include "snlp/jacobian.hpp"

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "snlp/linalg.hpp"

namespace snlp {

HiddenState fd_jvp(const std::function<HiddenState(const HiddenState&)>& f, const HiddenState& x,
                   const HiddenState& v, float eps) {
  if (!x.same_shape(v)) throw std::invalid_argument("fd_jvp: x and v shapes differ");
  if (!(eps > 0.0f)) throw std::invalid_argument("fd_jvp: eps must be positive");
  HiddenState xp = x;
  for (std::size_t i = 0; i < xp.data.size(); ++i) xp.data[i] += eps * v.data[i];
  HiddenState fx = f(x);
  HiddenState fxp = f(xp);
  if (!fx.same_shape(fxp)) throw std::invalid_argument("fd_jvp: f changed output shape");
  HiddenState out = fxp;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = (out.data[i] - fx.data[i]) / eps;
  return out;
}

Matrix dense_jacobian_fd(const std::function<Vector(const Vector&)>& f, const Vector& x,
                         float eps) {
  if (x.empty()) throw std::invalid_argument("dense_jacobian_fd: empty input");
  if (x.size() > 4096)
    throw std::invalid_argument("dense_jacobian_fd: refusing flattened dimension above 4096");
  if (!(eps > 0.0f)) throw std::invalid_argument("dense_jacobian_fd: eps must be positive");
  const int n = static_cast<int>(x.size());
  Vector fx = f(x);
  const int m = static_cast<int>(fx.size());
  Matrix j(m, n);
  Vector xp = x;
  for (int c = 0; c < n; ++c) {
    const float saved = xp[c];
    xp[c] = saved + eps;
    Vector fp = f(xp);
    xp[c] = saved;
    if (static_cast<int>(fp.size()) != m)
      throw std::invalid_argument("dense_jacobian_fd: f changed output dimension");
    for (int r = 0; r < m; ++r) j.at(r, c) = (fp[r] - fx[r]) / eps;
  }
  return j;
}

Vector hutchinson_diag(const std::function<Vector(const Vector&)>& f, const Vector& x,
                       const JacobianProbeConfig& cfg) {
  if (cfg.n_probes <= 0) throw std::invalid_argument("hutchinson_diag: n_probes must be positive");
  const int n = static_cast<int>(x.size());
  Prng prng(cfg.prng_seed);
  Vector fx = f(x);
  if (static_cast<int>(fx.size()) != n)
    throw std::invalid_argument("hutchinson_diag: map must preserve dimension");
  std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
  Vector v(static_cast<std::size_t>(n)), xp(static_cast<std::size_t>(n));
  for (int p = 0; p < cfg.n_probes; ++p) {
    for (int i = 0; i < n; ++i) v[i] = prng.rademacher();
    for (int i = 0; i < n; ++i) xp[i] = x[i] + cfg.fd_epsilon * v[i];
    Vector fp = f(xp);
    for (int i = 0; i < n; ++i) {
      const double jv = (static_cast<double>(fp[i]) - fx[i]) / cfg.fd_epsilon;
      acc[i] += static_cast<double>(v[i]) * jv;
    }
  }
  Vector out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = static_cast<float>(acc[i] / cfg.n_probes);
  return out;
}

float hutchinson_frobenius(const std::function<Vector(const Vector&)>& f, const Vector& x,
                           const JacobianProbeConfig& cfg) {
  if (cfg.n_probes <= 0)
    throw std::invalid_argument("hutchinson_frobenius: n_probes must be positive");
  const int n = static_cast<int>(x.size());
  Prng prng(cfg.prng_seed);
  Vector fx = f(x);
  Vector v(static_cast<std::size_t>(n)), xp(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (int p = 0; p < cfg.n_probes; ++p) {
    for (int i = 0; i < n; ++i) v[i] = prng.rademacher();
    for (int i = 0; i < n; ++i) xp[i] = x[i] + cfg.fd_epsilon * v[i];
    Vector fp = f(xp);
    if (fp.size() != fx.size())
      throw std::invalid_argument("hutchinson_frobenius: f changed output dimension");
    for (std::size_t i = 0; i < fp.size(); ++i) {
      const double jv = (static_cast<double>(fp[i]) - fx[i]) / cfg.fd_epsilon;
      acc += jv * jv;
    }
  }
  return static_cast<float>(std::sqrt(acc / cfg.n_probes));
}

LayerJacobianReport layer_report(const ModelWeights& w, int layer_idx, const HiddenState& x,
                                 const JacobianProbeConfig& cfg, int pos) {
  if (pos < 0) pos = x.rows - 1;
  if (pos < 0 || pos >= x.rows) throw std::invalid_argument("layer_report: bad probe position");
  const int n = w.config.width();
  if (n > 4096) throw std::invalid_argument("layer_report: hidden width above the dense guard");

  BlockProbe probe(w, layer_idx, x);
  Vector base_row(x.row(pos), x.row(pos) + n);

  // Per-token residual branch g(r) = f(r) - r at the probed position.
  auto g = [&](const Vector& r) {
    Vector out(static_cast<std::size_t>(n));
    probe.eval(pos, r.data(), out.data());
    for (int i = 0; i < n; ++i) out[i] -= r[i];
    return out;
  };
  auto f = [&](const Vector& r) {
    Vector out(static_cast<std::size_t>(n));
    probe.eval(pos, r.data(), out.data());
    return out;
  };

  LayerJacobianReport rep;
  Matrix jg = dense_jacobian_fd(g, base_row, cfg.fd_epsilon);
  Prng prng(cfg.prng_seed);
  rep.sigma_max = power_iteration_sigma_max(jg, 200, prng);
  rep.frob_norm = hutchinson_frobenius(g, base_row, cfg);

  // mean ||J_f v|| / ||v|| over Rademacher probes of the full block map.
  Prng aprng(cfg.prng_seed ^ 0x9e3779b97f4a7c15ull);
  Vector fx = f(base_row);
  Vector v(static_cast<std::size_t>(n)), xp(static_cast<std::size_t>(n));
  double amp = 0.0;
  for (int p = 0; p < cfg.n_probes; ++p) {
    for (int i = 0; i < n; ++i) v[i] = aprng.rademacher();
    for (int i = 0; i < n; ++i) xp[i] = base_row[i] + cfg.fd_epsilon * v[i];
    Vector fp = f(xp);
    double num = 0.0;
    for (int i = 0; i < n; ++i) {
      const double jv = (static_cast<double>(fp[i]) - fx[i]) / cfg.fd_epsilon;
      num += jv * jv;
    }
    amp += std::sqrt(num) / std::sqrt(static_cast<double>(n));
  }
  rep.amplification = static_cast<float>(amp / cfg.n_probes);
  return rep;
}

}  // namespace snlp
