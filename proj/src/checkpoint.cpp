#include "snlp/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace snlp {

namespace {

constexpr char kMagic[] = "SNLP1\n";
constexpr std::size_t kMagicLen = 6;

void require_keys(const nlohmann::json& obj, const std::vector<std::string>& allowed,
                  const std::string& where) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const std::string& k : allowed)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known) throw std::invalid_argument(where + ": unknown key '" + item.key() + "'");
  }
}

// Little-endian on-disk layout regardless of host order.
void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_f32_le(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float read_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

// The serialized array sequence shared by save and load. visit(name, data,
// count) is called once per array in checkpoint order.
template <typename Weights, typename Visit>
void for_each_array(Weights& w, Visit&& visit) {
  visit("token_embedding", w.token_embedding.data);
  const bool hc = w.config.variant == Variant::Hc;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& layer = w.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    visit(p + "attn_norm_gain", layer.attn_norm_gain);
    visit(p + "wq", layer.wq.data);
    visit(p + "wk", layer.wk.data);
    visit(p + "wv", layer.wv.data);
    visit(p + "wo", layer.wo.data);
    if (hc) {
      visit(p + "h_pre_attn", layer.h_pre_attn.data);
      visit(p + "h_post_attn", layer.h_post_attn.data);
      visit(p + "h_res_attn", layer.h_res_attn.data);
    }
    visit(p + "mlp_norm_gain", layer.mlp_norm_gain);
    visit(p + "w_up", layer.w_up.data);
    visit(p + "w_down", layer.w_down.data);
    if (hc) {
      visit(p + "h_pre_mlp", layer.h_pre_mlp.data);
      visit(p + "h_post_mlp", layer.h_post_mlp.data);
      visit(p + "h_res_mlp", layer.h_res_mlp.data);
    }
  }
  visit("final_norm_gain", w.final_norm_gain);
  visit("lm_head", w.lm_head.data);
}

}  // namespace

std::string model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["d_ff"] = cfg.d_ff;
  j["d_model"] = cfg.d_model;
  j["hc_streams"] = cfg.hc_streams;
  j["max_seq_len"] = cfg.max_seq_len;
  j["n_heads"] = cfg.n_heads;
  j["n_layers"] = cfg.n_layers;
  j["rope_base"] = cfg.rope_base;
  j["variant"] = variant_name(cfg.variant);
  j["vocab_size"] = cfg.vocab_size;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("model config JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("model config JSON: expected an object");
  require_keys(j,
               {"d_ff", "d_model", "hc_streams", "max_seq_len", "n_heads", "n_layers",
                "rope_base", "variant", "vocab_size"},
               "model config");
  ModelConfig cfg;
  if (j.contains("n_layers")) cfg.n_layers = j.at("n_layers").get<int>();
  if (j.contains("d_model")) cfg.d_model = j.at("d_model").get<int>();
  if (j.contains("n_heads")) cfg.n_heads = j.at("n_heads").get<int>();
  if (j.contains("d_ff")) cfg.d_ff = j.at("d_ff").get<int>();
  if (j.contains("vocab_size")) cfg.vocab_size = j.at("vocab_size").get<int>();
  if (j.contains("max_seq_len")) cfg.max_seq_len = j.at("max_seq_len").get<int>();
  if (j.contains("variant")) cfg.variant = variant_from_name(j.at("variant").get<std::string>());
  if (j.contains("hc_streams")) cfg.hc_streams = j.at("hc_streams").get<int>();
  if (j.contains("rope_base")) cfg.rope_base = j.at("rope_base").get<float>();
  cfg.validate();
  return cfg;
}

void save_checkpoint(const ModelWeights& w, const std::string& path) {
  const std::string config_json = model_config_to_json(w.config);
  std::string out;
  out.append(kMagic, kMagicLen);
  append_u64_le(out, config_json.size());
  out += config_json;
  for_each_array(w, [&](const std::string&, const std::vector<float>& data) {
    for (float f : data) append_f32_le(out, f);
  });
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("cannot open '" + path + "' for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("write to '" + path + "' failed");
}

ModelWeights load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();

  if (n < kMagicLen || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0)
    throw std::runtime_error("checkpoint '" + path + "': bad magic at byte offset 0");
  if (n < kMagicLen + 8)
    throw std::runtime_error("checkpoint '" + path + "': truncated length field at byte offset " +
                             std::to_string(kMagicLen));
  const std::uint64_t json_len = read_u64_le(p + kMagicLen);
  const std::size_t json_off = kMagicLen + 8;
  if (n < json_off + json_len)
    throw std::runtime_error("checkpoint '" + path + "': truncated config JSON at byte offset " +
                             std::to_string(json_off));
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(bytes.substr(json_off, json_len));
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint '" + path + "': config at byte offset " +
                             std::to_string(json_off) + ": " + e.what());
  }

  // Build a weight skeleton with the right shapes, then fill it in order.
  Prng scratch(0);
  ModelWeights w = init_model(cfg, scratch, 0.0f);
  std::size_t off = json_off + json_len;
  for_each_array(w, [&](const std::string& name, std::vector<float>& data) {
    const std::size_t need = data.size() * 4;
    if (off + need > n)
      throw std::runtime_error("checkpoint '" + path + "': truncated while reading " + name +
                               " at byte offset " + std::to_string(off));
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_f32_le(p + off + i * 4);
    off += need;
  });
  if (off != n)
    throw std::runtime_error("checkpoint '" + path + "': " + std::to_string(n - off) +
                             " trailing bytes at byte offset " + std::to_string(off));
  return w;
}

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t file_content_hash(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open '" + path + "' for hashing");
  std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace snlp
