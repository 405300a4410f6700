#pragma once
#include <json.hpp>
#include <set>
#include <string>

#include "vit.hpp"

namespace bf {

using nlohmann::json;

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw error(ERR_CONFIG, where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw error(ERR_CONFIG, where + ": unknown key '" + it.key() + "'");
}

inline uint64_t get_u64(const json& j, const std::string& key, uint64_t def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_number_unsigned() && !j.at(key).is_number_integer())
    throw error(ERR_CONFIG, "field '" + key + "' must be a non-negative integer");
  const auto v = j.at(key).get<int64_t>();
  if (v < 0) throw error(ERR_CONFIG, "field '" + key + "' must be non-negative");
  return uint64_t(v);
}

inline double get_num(const json& j, const std::string& key, double def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_number()) throw error(ERR_CONFIG, "field '" + key + "' must be a number");
  return j.at(key).get<double>();
}

inline std::string get_str(const json& j, const std::string& key, const std::string& def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_string()) throw error(ERR_CONFIG, "field '" + key + "' must be a string");
  return j.at(key).get<std::string>();
}

inline bool get_bool(const json& j, const std::string& key, bool def) {
  if (!j.contains(key)) return def;
  if (!j.at(key).is_boolean()) throw error(ERR_CONFIG, "field '" + key + "' must be a boolean");
  return j.at(key).get<bool>();
}

inline json model_config_to_json(const ModelConfig& c) {
  return json{{"image_size", c.image_size}, {"channels", c.channels},
              {"patch_size", c.patch_size}, {"dim", c.dim},
              {"heads", c.heads},           {"ffn_hidden", c.ffn_hidden},
              {"deploy_blocks", c.deploy_blocks}, {"branches", c.branches},
              {"num_classes", c.num_classes},     {"attn_affine", c.attn_affine},
              {"ln_eps", c.ln_eps}};
}

inline ModelConfig model_config_from_json(const json& j) {
  check_keys(j,
             {"image_size", "channels", "patch_size", "dim", "heads", "ffn_hidden",
              "deploy_blocks", "branches", "num_classes", "attn_affine", "ln_eps"},
             "model");
  ModelConfig c;
  c.image_size = get_u64(j, "image_size", c.image_size);
  c.channels = get_u64(j, "channels", c.channels);
  c.patch_size = get_u64(j, "patch_size", c.patch_size);
  c.dim = get_u64(j, "dim", c.dim);
  c.heads = get_u64(j, "heads", c.heads);
  c.ffn_hidden = get_u64(j, "ffn_hidden", c.ffn_hidden);
  c.deploy_blocks = get_u64(j, "deploy_blocks", c.deploy_blocks);
  c.branches = get_u64(j, "branches", c.branches);
  c.num_classes = get_u64(j, "num_classes", c.num_classes);
  c.attn_affine = get_str(j, "attn_affine", c.attn_affine);
  c.ln_eps = get_num(j, "ln_eps", c.ln_eps);
  c.validate();
  return c;
}

}  // namespace bf
