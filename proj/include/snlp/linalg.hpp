#pragma once

#include <functional>

#include "snlp/matrix.hpp"
#include "snlp/prng.hpp"

namespace snlp {

// Largest singular value estimated by power iteration on v -> J^T (J v).
// The callback form materializes J column-by-column through `apply` (exact
// for a linear operator), which is how J^T is obtained when the operator is
// not symmetric. The Rayleigh quotient sequence is non-decreasing in iters
// and never exceeds the true sigma_max beyond rounding.
float power_iteration_sigma_max(const std::function<Vector(const Vector&)>& apply, int dim,
                                int iters, Prng& prng);
float power_iteration_sigma_max(const Matrix& j, int iters, Prng& prng);

struct LeastSquaresFit {
  Matrix w;   // (p x q) coefficients
  Vector b;   // (q) intercept
  bool condition_warning = false;  // rank deficiency beyond the ridge damping
};

// Minimizes ||X W + 1 b^T - Y||_F^2 with ridge 1e-6 on the normal equations,
// solved in 64-bit. X is (n x p), Y is (n x q).
LeastSquaresFit least_squares_fit(const Matrix& x, const Matrix& y);

// Orthonormal basis (cols x rank) of the dominant right singular subspace of
// X, computed by randomized subspace iteration with 3 power steps.
Matrix truncated_svd_basis(const Matrix& x, int rank, Prng& prng);

}  // namespace snlp
