#pragma once

#include <vector>

#include "snlp/model.hpp"

namespace snlp {

// F contiguous Standard-variant layers merged into one execution unit.
// Input-side projections are concatenated along the output dimension,
// output-side projections along the input dimension; per-member norm gains
// are kept so each member still normalizes the shared input with its own
// gain.
struct ChunkWeights {
  std::vector<int> member_layers;       // 0-based, contiguous ascending
  Matrix wq_fused, wk_fused, wv_fused;  // (F*d) x d
  Matrix wo_fused;                      // d x (F*d)
  Matrix w_up_fused;                    // (F*d_ff) x d
  Matrix w_down_fused;                  // d x (F*d_ff)
  std::vector<Vector> attn_norm_gains;  // F entries of d
  std::vector<Vector> mlp_norm_gains;   // F entries of d

  int fuse_width() const { return static_cast<int>(member_layers.size()); }
};

// Merges layers [first_layer, first_layer + fuse). Standard variant only;
// throws for HC models or out-of-range member sets.
ChunkWeights build_fused_chunk(const ModelWeights& w, int first_layer, int fuse);

// One parallel pass of the chunk at shared input h:
//   u   = h + sum_l a_l(h)            (every member attention branch at h)
//   out = u + sum_l mlp_l(u)          (every member MLP branch at the shared u)
// For fuse = 1 this is the plain block.
HiddenState chunk_forward(const ChunkWeights& chunk, const ModelWeights& w, const HiddenState& h);

// The part of chunk_forward that independent per-layer evaluation misses:
//   sum_l [ mlp_l(h + sum_r a_r(h)) - mlp_l(h + a_l(h)) ]
// Identically zero when fuse = 1; shrinks with the branch scale.
HiddenState cross_coupling_term(const ChunkWeights& chunk, const ModelWeights& w,
                                const HiddenState& h);

}  // namespace snlp
