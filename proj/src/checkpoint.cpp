#include "checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "json_util.hpp"

namespace bf {
namespace {

constexpr char kMagic[4] = {'R', 'V', 'J', 'F'};
constexpr uint32_t kVersion = 1;

void put_u32le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

uint32_t read_u32le(const unsigned char* p) {
  return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

uint64_t read_u64le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

struct NamedTensor {
  std::string name;
  const Tensor* t;
};

void write_container(const std::string& path, const json& config, const PhaseMeta& phase,
                     const std::vector<NamedTensor>& tensors) {
  std::string payload;
  json index = json::array();
  for (const auto& nt : tensors) {
    json entry;
    entry["name"] = nt.name;
    entry["shape"] = nt.t->shape;
    entry["offset"] = payload.size();
    entry["byte_len"] = nt.t->data.size() * 8;
    index.push_back(std::move(entry));
    for (double d : nt.t->data) put_u64le(payload, std::bit_cast<uint64_t>(d));
  }

  json header;
  header["config"] = config;
  header["phase"] = {{"step", phase.step}, {"lambda", phase.lambda}};
  header["dtype"] = "f64";
  header["tensors"] = std::move(index);
  const std::string htext = header.dump();

  std::string blob;
  blob.append(kMagic, 4);
  put_u32le(blob, kVersion);
  put_u64le(blob, htext.size());
  blob += htext;
  blob += payload;
  const auto crc =
      crc32(0, reinterpret_cast<const Bytef*>(payload.data()), uInt(payload.size()));
  put_u32le(blob, uint32_t(crc));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw error(ERR_CONFIG, "cannot open '" + path + "' for writing");
  f.write(blob.data(), std::streamsize(blob.size()));
  if (!f) throw error(ERR_CONFIG, "short write to '" + path + "'");
}

struct Container {
  json config;
  PhaseMeta phase;
  // name -> tensor, insertion order preserved for error reporting
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& take(const std::string& name, const std::vector<size_t>& shape) {
    for (auto& [n, t] : tensors)
      if (n == name) {
        if (t.shape != shape)
          throw error(ERR_CONFIG, "checkpoint tensor '" + name + "' has shape " + t.shape_str() +
                                      ", expected " + Tensor::zeros(shape).shape_str());
        taken.push_back(name);
        return t;
      }
    throw error(ERR_CONFIG, "checkpoint is missing tensor '" + name + "'");
  }

  void expect_all_taken() const {
    for (const auto& [n, t] : tensors) {
      bool found = false;
      for (const auto& k : taken)
        if (k == n) {
          found = true;
          break;
        }
      if (!found) throw error(ERR_CONFIG, "checkpoint has unexpected tensor '" + n + "'");
    }
  }

 private:
  std::vector<std::string> taken;
};

Container read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw error(ERR_CONFIG, "cannot open '" + path + "'");
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  const size_t n = blob.size();

  if (n < 4) throw ckpt_error(ckpt_error::truncated, "checkpoint shorter than its magic");
  if (std::memcmp(blob.data(), kMagic, 4) != 0)
    throw ckpt_error(ckpt_error::bad_magic, "bad checkpoint magic (not an RVJF file)");
  if (n < 16) throw ckpt_error(ckpt_error::truncated, "checkpoint header cut short");
  const uint32_t version = read_u32le(p + 4);
  if (version != kVersion)
    throw ckpt_error(ckpt_error::version_mismatch, "unsupported checkpoint version " +
                                                       std::to_string(version) + " (want " +
                                                       std::to_string(kVersion) + ")");
  const uint64_t hlen = read_u64le(p + 8);
  if (16 + hlen + 4 > n)
    throw ckpt_error(ckpt_error::truncated, "checkpoint ends inside the JSON header");
  json header;
  try {
    header = json::parse(blob.begin() + 16, blob.begin() + 16 + std::ptrdiff_t(hlen));
  } catch (const json::exception& e) {
    throw error(ERR_CONFIG, std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const size_t payload_off = 16 + hlen;
  const size_t payload_len = n - payload_off - 4;

  if (get_str(header, "dtype", "") != "f64")
    throw error(ERR_CONFIG, "checkpoint dtype must be f64");

  // Index bounds first so a file cut mid-payload reads as truncation, not as
  // a checksum mismatch.
  size_t expect_end = 0;
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const uint64_t off = entry.at("offset").get<uint64_t>();
    const uint64_t len = entry.at("byte_len").get<uint64_t>();
    if (off + len > payload_len || len % 8 != 0)
      throw ckpt_error(ckpt_error::truncated,
                       "checkpoint tensor '" + name + "' points past the end of the payload");
    expect_end = std::max(expect_end, size_t(off + len));
  }
  if (expect_end != payload_len)
    throw ckpt_error(ckpt_error::truncated, "checkpoint payload length disagrees with its index");

  const uint32_t want = read_u32le(p + n - 4);
  const auto got = crc32(0, p + payload_off, uInt(payload_len));
  if (uint32_t(got) != want)
    throw ckpt_error(ckpt_error::checksum, "checkpoint payload checksum mismatch");

  Container c;
  c.config = header.at("config");
  if (header.contains("phase")) {
    c.phase.step = get_u64(header.at("phase"), "step", 0);
    c.phase.lambda = get_num(header.at("phase"), "lambda", 0.0);
  }
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<size_t>>();
    const uint64_t off = entry.at("offset").get<uint64_t>();
    const uint64_t len = entry.at("byte_len").get<uint64_t>();
    Tensor t = Tensor::zeros(shape);
    if (t.data.size() * 8 != len)
      throw error(ERR_CONFIG, "checkpoint tensor '" + name + "' byte length disagrees with shape");
    for (size_t i = 0; i < t.data.size(); ++i)
      t.data[i] = std::bit_cast<double>(read_u64le(p + payload_off + off + 8 * i));
    c.tensors.emplace_back(name, std::move(t));
  }
  return c;
}

json deployed_config_json(const DeployedViT& m) {
  json cfg;
  cfg["model_kind"] = "deployed";
  cfg["model"] = model_config_to_json(m.cfg);
  json affine = json::array(), scales = json::array();
  for (const auto& blk : m.blocks) {
    affine.push_back(json::array({blk.ln1.has_affine, blk.ln2.has_affine}));
    scales.push_back(blk.attn.scale);
  }
  cfg["norm_affine"] = std::move(affine);
  cfg["attn_scale"] = std::move(scales);
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const MultiBranchViT& m, const PhaseMeta& phase) {
  json cfg;
  cfg["model_kind"] = "multibranch";
  cfg["model"] = model_config_to_json(m.cfg);
  std::vector<NamedTensor> tensors;
  for (const auto& [name, v] : named_params(m)) tensors.push_back({name, &v->val});
  write_container(path, cfg, phase, tensors);
}

void save_checkpoint(const std::string& path, const DeployedViT& m, const PhaseMeta& phase) {
  std::vector<NamedTensor> tensors;
  tensors.push_back({"embed.W_p", &m.embed.W_p});
  tensors.push_back({"embed.b_p", &m.embed.b_p});
  tensors.push_back({"embed.pos", &m.embed.pos});
  for (size_t k = 0; k < m.blocks.size(); ++k) {
    const auto& blk = m.blocks[k];
    const std::string pre = "blocks." + std::to_string(k) + ".";
    if (blk.ln1.has_affine) {
      tensors.push_back({pre + "ln1.gamma", &blk.ln1.gamma});
      tensors.push_back({pre + "ln1.beta", &blk.ln1.beta});
    }
    if (blk.ln2.has_affine) {
      tensors.push_back({pre + "ln2.gamma", &blk.ln2.gamma});
      tensors.push_back({pre + "ln2.beta", &blk.ln2.beta});
    }
    for (size_t i = 0; i < blk.attn.W.size(); ++i) {
      const std::string h = "." + std::to_string(i);
      tensors.push_back({pre + "attn.W" + h, &blk.attn.W[i]});
      tensors.push_back({pre + "attn.V" + h, &blk.attn.V[i]});
      tensors.push_back({pre + "attn.O" + h, &blk.attn.O[i]});
    }
    tensors.push_back({pre + "ffn.W1", &blk.W1});
    tensors.push_back({pre + "ffn.b1", &blk.b1});
    tensors.push_back({pre + "ffn.W2", &blk.W2});
    tensors.push_back({pre + "ffn.b2", &blk.b2});
  }
  tensors.push_back({"head.W", &m.head_W});
  tensors.push_back({"head.b", &m.head_b});
  write_container(path, deployed_config_json(m), phase, tensors);
}

ModelKind peek_kind(const std::string& path) {
  auto c = read_container(path);
  const auto kind = get_str(c.config, "model_kind", "");
  if (kind == "multibranch") return ModelKind::multibranch;
  if (kind == "deployed") return ModelKind::deployed;
  throw error(ERR_CONFIG, "checkpoint has unknown model_kind '" + kind + "'");
}

MultiBranchViT load_multibranch(const std::string& path, PhaseMeta* phase) {
  auto c = read_container(path);
  if (get_str(c.config, "model_kind", "") != "multibranch")
    throw error(ERR_MODEL_MISMATCH, "checkpoint '" + path + "' does not hold a branched model");
  MultiBranchViT m = make_model(model_config_from_json(c.config.at("model")), 0);
  for (auto& [name, v] : named_params(m)) {
    const Tensor& t = c.take(name, v->val.shape);
    v->val.data = t.data;
  }
  c.expect_all_taken();
  if (phase) *phase = c.phase;
  return m;
}

DeployedViT load_deployed(const std::string& path, PhaseMeta* phase) {
  auto c = read_container(path);
  if (get_str(c.config, "model_kind", "") != "deployed")
    throw error(ERR_MODEL_MISMATCH, "checkpoint '" + path + "' does not hold a deployed model");
  DeployedViT m;
  m.cfg = model_config_from_json(c.config.at("model"));
  const auto& affine = c.config.at("norm_affine");
  const auto& scales = c.config.at("attn_scale");
  if (affine.size() != m.cfg.deploy_blocks || scales.size() != m.cfg.deploy_blocks)
    throw error(ERR_CONFIG, "checkpoint norm_affine/attn_scale length disagrees with deploy_blocks");

  const size_t d = m.cfg.dim, dk = m.cfg.head_dim(), N = m.cfg.token_count();
  m.embed.W_p = c.take("embed.W_p", {m.cfg.patch_dim(), d});
  m.embed.b_p = c.take("embed.b_p", {d});
  m.embed.pos = c.take("embed.pos", {N, d});
  m.blocks.resize(m.cfg.deploy_blocks);
  for (size_t k = 0; k < m.blocks.size(); ++k) {
    auto& blk = m.blocks[k];
    const std::string pre = "blocks." + std::to_string(k) + ".";
    blk.ln1.has_affine = affine.at(k).at(0).get<bool>();
    blk.ln2.has_affine = affine.at(k).at(1).get<bool>();
    if (blk.ln1.has_affine) {
      blk.ln1.gamma = c.take(pre + "ln1.gamma", {d});
      blk.ln1.beta = c.take(pre + "ln1.beta", {d});
    }
    if (blk.ln2.has_affine) {
      blk.ln2.gamma = c.take(pre + "ln2.gamma", {d});
      blk.ln2.beta = c.take(pre + "ln2.beta", {d});
    }
    blk.attn.scale = scales.at(k).get<double>();
    blk.attn.W.resize(m.cfg.heads);
    blk.attn.V.resize(m.cfg.heads);
    blk.attn.O.resize(m.cfg.heads);
    for (size_t i = 0; i < m.cfg.heads; ++i) {
      const std::string h = "." + std::to_string(i);
      blk.attn.W[i] = c.take(pre + "attn.W" + h, {d, d});
      blk.attn.V[i] = c.take(pre + "attn.V" + h, {d, dk});
      blk.attn.O[i] = c.take(pre + "attn.O" + h, {dk, d});
    }
    blk.W1 = c.take(pre + "ffn.W1", {d, m.cfg.ffn_hidden});
    blk.b1 = c.take(pre + "ffn.b1", {m.cfg.ffn_hidden});
    blk.W2 = c.take(pre + "ffn.W2", {m.cfg.ffn_hidden, d});
    blk.b2 = c.take(pre + "ffn.b2", {d});
  }
  m.head_W = c.take("head.W", {d, m.cfg.num_classes});
  m.head_b = c.take("head.b", {m.cfg.num_classes});
  c.expect_all_taken();
  if (phase) *phase = c.phase;
  return m;
}

}  // namespace bf
