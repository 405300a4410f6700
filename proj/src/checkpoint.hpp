#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "reparam.hpp"
#include "vit.hpp"

namespace bf {

// Container layout (all integers little-endian):
//   "RVJF" | u32 version=1 | u64 header_len | UTF-8 JSON header
//   | raw f64 payload | u32 crc32(payload)
// The JSON header carries {config, phase, dtype, tensors[{name,shape,offset,
// byte_len}]}; offsets are relative to the payload start.

struct PhaseMeta {
  uint64_t step = 0;
  double lambda = 0.0;
};

struct ckpt_error : error {
  enum Kind { bad_magic, version_mismatch, truncated, checksum };
  Kind kind;
  ckpt_error(Kind k, const std::string& m) : error(ERR_CONFIG, m), kind(k) {}
};

enum class ModelKind { multibranch, deployed };

void save_checkpoint(const std::string& path, const MultiBranchViT& m, const PhaseMeta& phase);
void save_checkpoint(const std::string& path, const DeployedViT& m, const PhaseMeta& phase);

ModelKind peek_kind(const std::string& path);
MultiBranchViT load_multibranch(const std::string& path, PhaseMeta* phase = nullptr);
DeployedViT load_deployed(const std::string& path, PhaseMeta* phase = nullptr);

}  // namespace bf
