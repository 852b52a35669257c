#include "snlp/scan.hpp"

#include <cstddef>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace snlp {

namespace {

// Tree-internal element held in 64-bit so the reordered combines of the
// tree agree with a left-to-right evaluation to well under 1e-6.
struct Affine {
  std::vector<double> a;
  std::vector<double> b;
};

// compose(earlier, later): the map applying `earlier` first, then `later`.
Affine compose(const Affine& earlier, const Affine& later) {
  const std::size_t w = earlier.a.size();
  Affine out;
  out.a.resize(w);
  out.b.resize(w);
  for (std::size_t i = 0; i < w; ++i) {
    out.a[i] = later.a[i] * earlier.a[i];
    out.b[i] = later.a[i] * earlier.b[i] + later.b[i];
  }
  return out;
}

void validate(const std::vector<AffineScanElement>& elems, const Vector& h0) {
  for (const AffineScanElement& e : elems) {
    if (e.a.size() != h0.size() || e.b.size() != h0.size())
      throw std::invalid_argument("affine_scan: element width does not match h0");
  }
}

}  // namespace

std::vector<Vector> affine_scan(const std::vector<AffineScanElement>& elems, const Vector& h0) {
  validate(elems, h0);
  const int n = static_cast<int>(elems.size());
  if (n == 0) return {};
  const std::size_t w = h0.size();

  int m = 1;
  while (m < n) m <<= 1;

  // Work array padded with identity elements (a=1, b=0).
  std::vector<Affine> work(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    Affine& e = work[i];
    e.a.resize(w);
    e.b.resize(w);
    if (i < n) {
      for (std::size_t j = 0; j < w; ++j) {
        e.a[j] = static_cast<double>(elems[i].a[j]);
        e.b[j] = static_cast<double>(elems[i].b[j]);
      }
    } else {
      for (std::size_t j = 0; j < w; ++j) {
        e.a[j] = 1.0;
        e.b[j] = 0.0;
      }
    }
  }

  // Up-sweep: index hi of each tree node accumulates the composition of its
  // whole block, later elements applied after earlier ones.
  for (int stride = 2; stride <= m; stride <<= 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = stride - 1; i < m; i += stride) work[i] = compose(work[i - stride / 2], work[i]);
  }

  // Down-sweep: turn block totals into exclusive prefixes.
  for (std::size_t j = 0; j < w; ++j) {
    work[m - 1].a[j] = 1.0;
    work[m - 1].b[j] = 0.0;
  }
  for (int stride = m; stride >= 2; stride >>= 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int i = stride - 1; i < m; i += stride) {
      // work[i] holds the node's exclusive prefix P, the left child its
      // subtree total T. Left child inherits P; right child gets T applied
      // after P.
      Affine left = work[i - stride / 2];
      work[i - stride / 2] = work[i];
      work[i] = compose(work[i], left);
    }
  }

  // work[j] is now the composition of elements 0..j-1; h_{j+1} = e_j(work[j](h0)).
  std::vector<Vector> out(static_cast<std::size_t>(n), Vector(w));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < w; ++i) {
      double base = work[j].a[i] * static_cast<double>(h0[i]) + work[j].b[i];
      double v = static_cast<double>(elems[j].a[i]) * base + static_cast<double>(elems[j].b[i]);
      out[j][i] = static_cast<float>(v);
    }
  }
  return out;
}

std::vector<Vector> affine_scan_serial(const std::vector<AffineScanElement>& elems,
                                       const Vector& h0) {
  validate(elems, h0);
  std::vector<Vector> out;
  out.reserve(elems.size());
  Vector h = h0;
  for (const AffineScanElement& e : elems) {
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = e.a[i] * h[i] + e.b[i];
    out.push_back(h);
  }
  return out;
}

}  // namespace snlp
