#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace snlp {

// Row-major float32 matrix. All accumulating reductions over its data are
// done in 64-bit (see dot64 and friends below).
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0f) {}

  float* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const float* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

using Vector = std::vector<float>;

inline double dot64(const float* a, const float* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

// y = W x where W is (rows x cols) and x has cols entries.
inline void matvec(const Matrix& w, const float* x, float* y) {
  for (int r = 0; r < w.rows; ++r) y[r] = static_cast<float>(dot64(w.row(r), x, w.cols));
}

// y = W^T x streamed by rows: y_c = sum_r x_r W[r][c]. Used for the
// (d_model x vocab) readout so the inner loop stays row-contiguous.
inline void matvec_transposed(const Matrix& w, const float* x, float* y) {
  std::vector<double> acc(static_cast<std::size_t>(w.cols), 0.0);
  for (int r = 0; r < w.rows; ++r) {
    const float* wr = w.row(r);
    const double xr = x[r];
    if (xr == 0.0) continue;
    for (int c = 0; c < w.cols; ++c) acc[c] += xr * static_cast<double>(wr[c]);
  }
  for (int c = 0; c < w.cols; ++c) y[c] = static_cast<float>(acc[c]);
}

inline float max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    float d = std::fabs(a.data[i] - b.data[i]);
    if (d > m) m = d;
  }
  return m;
}

inline double frobenius_norm(const Matrix& a) {
  double acc = 0.0;
  for (float v : a.data) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

inline double l2_norm(const float* a, int n) { return std::sqrt(dot64(a, a, n)); }

inline bool all_finite(const Matrix& a) {
  for (float v : a.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline void check_shape(const Matrix& m, int rows, int cols, const std::string& what) {
  if (m.rows != rows || m.cols != cols)
    throw std::invalid_argument(what + ": expected " + std::to_string(rows) + "x" +
                                std::to_string(cols) + ", got " + std::to_string(m.rows) + "x" +
                                std::to_string(m.cols));
}

}  // namespace snlp
