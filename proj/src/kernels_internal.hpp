#pragma once

// Shared per-position kernels used by the block, probe, and fused-chunk
// paths. Keeping one implementation means the F=1 fused chunk runs the same
// arithmetic as the plain block.

#include <cmath>
#include <cstddef>
#include <vector>

#include "snlp/matrix.hpp"

namespace snlp::detail {

inline double gelu64(double x) { return 0.5 * x * (1.0 + std::erf(x / 1.4142135623730951)); }

inline void rmsnorm_row(const float* x, const float* gain, int d, float eps, float* y) {
  double ms = 0.0;
  for (int i = 0; i < d; ++i) ms += static_cast<double>(x[i]) * x[i];
  ms = ms / d + static_cast<double>(eps);
  const double inv = 1.0 / std::sqrt(ms);
  for (int i = 0; i < d; ++i)
    y[i] = static_cast<float>(static_cast<double>(x[i]) * inv * static_cast<double>(gain[i]));
}

struct RopeTable {
  int head_dim = 0;
  std::vector<double> inv_freq;

  RopeTable() = default;
  RopeTable(int d_model, int n_heads, float base) : head_dim(d_model / n_heads) {
    const int half = head_dim / 2;
    inv_freq.resize(static_cast<std::size_t>(half));
    for (int i = 0; i < half; ++i)
      inv_freq[i] = std::pow(static_cast<double>(base), -2.0 * i / head_dim);
  }

  void apply(float* v, int n_heads, int pos) const {
    const int half = head_dim / 2;
    for (int h = 0; h < n_heads; ++h) {
      float* hv = v + h * head_dim;
      for (int i = 0; i < half; ++i) {
        const double angle = static_cast<double>(pos) * inv_freq[i];
        const double c = std::cos(angle), s = std::sin(angle);
        const double x0 = hv[2 * i], x1 = hv[2 * i + 1];
        hv[2 * i] = static_cast<float>(x0 * c - x1 * s);
        hv[2 * i + 1] = static_cast<float>(x0 * s + x1 * c);
      }
    }
  }
};

// Attention output at one target position over roped keys/values k, v
// (rows 0..pos usable). q is the roped query row.
inline void attend_one(const float* q, const Matrix& k, const Matrix& v, int n_heads, int pos,
                       float* out) {
  const int d = k.cols;
  const int dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> score(static_cast<std::size_t>(pos) + 1);
  for (int h = 0; h < n_heads; ++h) {
    const int off = h * dh;
    double mx = -1e300;
    for (int s = 0; s <= pos; ++s) {
      score[s] = dot64(q + off, k.row(s) + off, dh) * scale;
      if (score[s] > mx) mx = score[s];
    }
    double z = 0.0;
    for (int s = 0; s <= pos; ++s) {
      score[s] = std::exp(score[s] - mx);
      z += score[s];
    }
    for (int i = 0; i < dh; ++i) {
      double acc = 0.0;
      for (int s = 0; s <= pos; ++s) acc += score[s] * static_cast<double>(v.row(s)[off + i]);
      out[off + i] = static_cast<float>(acc / z);
    }
  }
}

inline void combine_streams(const float* row, const Matrix& h_pre, int d, float* out) {
  const int m = h_pre.cols;
  for (int i = 0; i < d; ++i) {
    double acc = 0.0;
    for (int s = 0; s < m; ++s)
      acc += static_cast<double>(h_pre.at(0, s)) * static_cast<double>(row[s * d + i]);
    out[i] = static_cast<float>(acc);
  }
}

inline void mix_streams(const float* row, const float* branch, const Matrix& h_res,
                        const Matrix& h_post, int d, float* out) {
  const int m = h_res.rows;
  for (int dst = 0; dst < m; ++dst) {
    for (int i = 0; i < d; ++i) {
      double acc = static_cast<double>(h_post.at(dst, 0)) * static_cast<double>(branch[i]);
      for (int src = 0; src < m; ++src)
        acc += static_cast<double>(h_res.at(dst, src)) * static_cast<double>(row[src * d + i]);
      out[dst * d + i] = static_cast<float>(acc);
    }
  }
}

// y = rows [row_begin, row_begin+n_rows) of W applied to x.
inline void matvec_rows(const Matrix& w, int row_begin, int n_rows, const float* x, float* y) {
  for (int r = 0; r < n_rows; ++r) y[r] = static_cast<float>(dot64(w.row(row_begin + r), x, w.cols));
}

// y = W[:, col_begin:col_begin+n_cols] x for a row-major W.
inline void matvec_col_slice(const Matrix& w, int col_begin, int n_cols, const float* x, float* y) {
  for (int r = 0; r < w.rows; ++r)
    y[r] = static_cast<float>(dot64(w.row(r) + col_begin, x, n_cols));
}

}  // namespace snlp::detail
