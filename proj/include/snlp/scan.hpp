#pragma once

#include <vector>

#include "snlp/matrix.hpp"

namespace snlp {

// One element of the elementwise affine recurrence h_j = a_j * h_{j-1} + b_j
// (all products elementwise, every vector the same width).
struct AffineScanElement {
  Vector a;
  Vector b;
};

// Solves the recurrence for j = 1..N given h_0 and returns [h_1, ..., h_N].
// Uses the associative composition
//   (a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2)
// in a Blelloch-style up/down-sweep tree. The combine order is fixed by the
// tree shape, so results are identical no matter how many threads run the
// per-level loops.
std::vector<Vector> affine_scan(const std::vector<AffineScanElement>& elems, const Vector& h0);

// Left-to-right serial evaluation of the same recurrence. Kept as the
// reference path for tests and the benchmark.
std::vector<Vector> affine_scan_serial(const std::vector<AffineScanElement>& elems,
                                       const Vector& h0);

}  // namespace snlp
