#pragma once

#include <cstdint>
#include <string>

#include "snlp/model.hpp"

namespace snlp {

// Canonical JSON form of a model configuration (alphabetical keys, so a
// given config always serializes to the same bytes).
std::string model_config_to_json(const ModelConfig& cfg);

// Strict parse: unknown keys are errors.
ModelConfig model_config_from_json(const std::string& text);

// Binary checkpoint layout: magic "SNLP1\n", an 8-byte little-endian length,
// the config JSON, then every weight array as raw little-endian float32 in
// a fixed order (embedding; per layer: attn_norm_gain, wq, wk, wv, wo,
// [HC: h_pre/h_post/h_res attn], mlp_norm_gain, w_up, w_down,
// [HC: h_pre/h_post/h_res mlp]; final_norm_gain; lm_head).
void save_checkpoint(const ModelWeights& w, const std::string& path);

// Parse errors name the byte offset of the problem.
ModelWeights load_checkpoint(const std::string& path);

// FNV-1a over the file bytes; the hash printed by model initialization.
std::uint64_t file_content_hash(const std::string& path);

std::uint64_t fnv1a64(const void* data, std::size_t n);

}  // namespace snlp
