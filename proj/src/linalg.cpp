#include "snlp/linalg.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace snlp {

namespace {

// Modified Gram-Schmidt in 64-bit; columns with negligible norm are replaced
// by zero (they carry no subspace information).
void orthonormalize_columns(std::vector<std::vector<double>>& cols) {
  for (std::size_t c = 0; c < cols.size(); ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double proj = 0.0;
      for (std::size_t i = 0; i < cols[c].size(); ++i) proj += cols[p][i] * cols[c][i];
      for (std::size_t i = 0; i < cols[c].size(); ++i) cols[c][i] -= proj * cols[p][i];
    }
    double nrm = 0.0;
    for (double v : cols[c]) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (nrm > 1e-300) {
      for (double& v : cols[c]) v /= nrm;
    } else {
      for (double& v : cols[c]) v = 0.0;
    }
  }
}

}  // namespace

float power_iteration_sigma_max(const Matrix& j, int iters, Prng& prng) {
  if (j.rows <= 0 || j.cols <= 0)
    throw std::invalid_argument("power_iteration_sigma_max: zero-dimensional operator");
  const int n = j.cols;
  std::vector<double> z(n), w(static_cast<std::size_t>(j.rows)), y(n);
  for (int i = 0; i < n; ++i) z[i] = prng.next_gaussian();
  double zn = 0.0;
  for (double v : z) zn += v * v;
  zn = std::sqrt(zn);
  if (zn == 0.0) return 0.0f;
  for (double& v : z) v /= zn;

  double rayleigh = 0.0;
  for (int it = 0; it < iters; ++it) {
    // w = J z ; y = J^T w ; rayleigh = z^T y = ||J z||^2 for unit z.
    for (int r = 0; r < j.rows; ++r) {
      const float* jr = j.row(r);
      double acc = 0.0;
      for (int c = 0; c < n; ++c) acc += static_cast<double>(jr[c]) * z[c];
      w[r] = acc;
    }
    for (int c = 0; c < n; ++c) y[c] = 0.0;
    for (int r = 0; r < j.rows; ++r) {
      const float* jr = j.row(r);
      const double wr = w[r];
      for (int c = 0; c < n; ++c) y[c] += wr * static_cast<double>(jr[c]);
    }
    rayleigh = 0.0;
    for (int c = 0; c < n; ++c) rayleigh += z[c] * y[c];
    double yn = 0.0;
    for (double v : y) yn += v * v;
    yn = std::sqrt(yn);
    if (yn == 0.0) return 0.0f;  // operator annihilates the iterate: sigma 0
    for (int c = 0; c < n; ++c) z[c] = y[c] / yn;
  }
  return static_cast<float>(std::sqrt(std::max(rayleigh, 0.0)));
}

float power_iteration_sigma_max(const std::function<Vector(const Vector&)>& apply, int dim,
                                int iters, Prng& prng) {
  if (dim <= 0) throw std::invalid_argument("power_iteration_sigma_max: dim must be positive");
  // Materialize the operator column-by-column; exact for linear maps and it
  // is what gives access to the transpose.
  Matrix j(dim, dim);
  Vector e(static_cast<std::size_t>(dim), 0.0f);
  for (int c = 0; c < dim; ++c) {
    e[c] = 1.0f;
    Vector col = apply(e);
    if (static_cast<int>(col.size()) != dim)
      throw std::invalid_argument("power_iteration_sigma_max: operator changed dimension");
    for (int r = 0; r < dim; ++r) j.at(r, c) = col[r];
    e[c] = 0.0f;
  }
  return power_iteration_sigma_max(j, iters, prng);
}

LeastSquaresFit least_squares_fit(const Matrix& x, const Matrix& y) {
  if (x.rows != y.rows) throw std::invalid_argument("least_squares_fit: row count mismatch");
  if (x.rows == 0) throw std::invalid_argument("least_squares_fit: empty system");
  const int n = x.rows, p = x.cols, q = y.cols;
  const int pa = p + 1;  // augmented with the all-ones intercept column
  const double ridge = 1e-6;

  // Normal equations G theta = R with G = Xa^T Xa + ridge I.
  std::vector<double> g(static_cast<std::size_t>(pa) * pa, 0.0);
  std::vector<double> r(static_cast<std::size_t>(pa) * q, 0.0);
  for (int i = 0; i < n; ++i) {
    const float* xi = x.row(i);
    const float* yi = y.row(i);
    for (int a = 0; a < pa; ++a) {
      const double xa = (a < p) ? static_cast<double>(xi[a]) : 1.0;
      for (int b = a; b < pa; ++b) {
        const double xb = (b < p) ? static_cast<double>(xi[b]) : 1.0;
        g[static_cast<std::size_t>(a) * pa + b] += xa * xb;
      }
      for (int c = 0; c < q; ++c)
        r[static_cast<std::size_t>(a) * q + c] += xa * static_cast<double>(yi[c]);
    }
  }
  for (int a = 0; a < pa; ++a) {
    for (int b = 0; b < a; ++b)
      g[static_cast<std::size_t>(a) * pa + b] = g[static_cast<std::size_t>(b) * pa + a];
    g[static_cast<std::size_t>(a) * pa + a] += ridge;
  }

  // Cholesky in 64-bit; a tiny pivot relative to the largest diagonal marks
  // rank deficiency that the ridge could not absorb.
  bool warn = false;
  double max_diag = ridge;
  for (int a = 0; a < pa; ++a)
    max_diag = std::max(max_diag, g[static_cast<std::size_t>(a) * pa + a]);
  std::vector<double> l(static_cast<std::size_t>(pa) * pa, 0.0);
  for (int a = 0; a < pa; ++a) {
    for (int b = 0; b <= a; ++b) {
      double s = g[static_cast<std::size_t>(a) * pa + b];
      for (int k = 0; k < b; ++k)
        s -= l[static_cast<std::size_t>(a) * pa + k] * l[static_cast<std::size_t>(b) * pa + k];
      if (a == b) {
        if (s < max_diag * 1e-12) {
          warn = true;
          s = std::max(s, ridge);
        }
        l[static_cast<std::size_t>(a) * pa + b] = std::sqrt(s);
      } else {
        l[static_cast<std::size_t>(a) * pa + b] = s / l[static_cast<std::size_t>(b) * pa + b];
      }
    }
  }

  // Solve L L^T theta = R column by column.
  LeastSquaresFit fit;
  fit.w = Matrix(p, q);
  fit.b.assign(static_cast<std::size_t>(q), 0.0f);
  fit.condition_warning = warn;
  std::vector<double> col(static_cast<std::size_t>(pa));
  for (int c = 0; c < q; ++c) {
    for (int a = 0; a < pa; ++a) {
      double s = r[static_cast<std::size_t>(a) * q + c];
      for (int k = 0; k < a; ++k) s -= l[static_cast<std::size_t>(a) * pa + k] * col[k];
      col[a] = s / l[static_cast<std::size_t>(a) * pa + a];
    }
    for (int a = pa - 1; a >= 0; --a) {
      double s = col[a];
      for (int k = a + 1; k < pa; ++k) s -= l[static_cast<std::size_t>(k) * pa + a] * col[k];
      col[a] = s / l[static_cast<std::size_t>(a) * pa + a];
    }
    for (int a = 0; a < p; ++a) fit.w.at(a, c) = static_cast<float>(col[a]);
    fit.b[c] = static_cast<float>(col[p]);
  }
  return fit;
}

Matrix truncated_svd_basis(const Matrix& x, int rank, Prng& prng) {
  if (rank <= 0) throw std::invalid_argument("truncated_svd_basis: rank must be positive");
  if (x.rows == 0 || x.cols == 0) throw std::invalid_argument("truncated_svd_basis: empty matrix");
  if (rank > x.cols) throw std::invalid_argument("truncated_svd_basis: rank exceeds column count");
  const int p = x.cols;

  std::vector<std::vector<double>> v(static_cast<std::size_t>(rank),
                                     std::vector<double>(static_cast<std::size_t>(p)));
  for (auto& col : v)
    for (double& e : col) e = prng.next_gaussian();
  orthonormalize_columns(v);

  std::vector<double> xv(static_cast<std::size_t>(x.rows));
  for (int step = 0; step < 3; ++step) {
    // V <- orth(X^T (X V)), one power step of X^T X per pass.
    std::vector<std::vector<double>> next(static_cast<std::size_t>(rank),
                                          std::vector<double>(static_cast<std::size_t>(p), 0.0));
    for (int c = 0; c < rank; ++c) {
      for (int i = 0; i < x.rows; ++i) {
        const float* xi = x.row(i);
        double acc = 0.0;
        for (int jj = 0; jj < p; ++jj) acc += static_cast<double>(xi[jj]) * v[c][jj];
        xv[i] = acc;
      }
      for (int i = 0; i < x.rows; ++i) {
        const float* xi = x.row(i);
        const double s = xv[i];
        for (int jj = 0; jj < p; ++jj) next[c][jj] += s * static_cast<double>(xi[jj]);
      }
    }
    orthonormalize_columns(next);
    v = std::move(next);
  }

  Matrix out(p, rank);
  for (int c = 0; c < rank; ++c)
    for (int i = 0; i < p; ++i) out.at(i, c) = static_cast<float>(v[c][i]);
  return out;
}

}  // namespace snlp
