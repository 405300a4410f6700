#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "autograd.hpp"
#include "schedule.hpp"

namespace bf {

struct ModelConfig {
  size_t image_size = 28;
  size_t channels = 1;
  size_t patch_size = 7;
  size_t dim = 64;
  size_t heads = 4;
  size_t ffn_hidden = 128;
  size_t deploy_blocks = 2;
  size_t branches = 2;
  size_t num_classes = 10;
  std::string attn_affine = "scale_only";  // scale_only: pre-attention shift pinned to 0 | full
  double ln_eps = 1e-5;

  size_t grid() const { return image_size / patch_size; }
  size_t token_count() const { return grid() * grid(); }
  size_t head_dim() const { return dim / heads; }
  size_t patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
  bool same_arch(const ModelConfig& o) const;
};

struct PatchEmbedParams {
  Var W_p;  // patch_dim x d
  Var b_p;  // d
  Var pos;  // N x d
};

// Per-branch, per-head projections, indexed [branch*heads + head].
struct BranchAttentionParams {
  size_t branches = 0, heads = 0;
  std::vector<Var> Wq, Wk, Wv;  // each d x d_h
  std::vector<Var> Wo;          // each d_h x d
  Var& wq(size_t b, size_t i) { return Wq[b * heads + i]; }
  Var& wk(size_t b, size_t i) { return Wk[b * heads + i]; }
  Var& wv(size_t b, size_t i) { return Wv[b * heads + i]; }
  Var& wo(size_t b, size_t i) { return Wo[b * heads + i]; }
  const Var& wq(size_t b, size_t i) const { return Wq[b * heads + i]; }
  const Var& wk(size_t b, size_t i) const { return Wk[b * heads + i]; }
  const Var& wv(size_t b, size_t i) const { return Wv[b * heads + i]; }
  const Var& wo(size_t b, size_t i) const { return Wo[b * heads + i]; }
};

struct BranchFfnParams {
  std::vector<Var> W1, b1, W2, b2;  // per branch: d x f, f, f x d, d
};

// One parallel block. The normalization affines sit before the branch split
// and are shared by every branch.
struct BranchBlock {
  Var ln1_gamma, ln1_beta;
  Var ln2_gamma, ln2_beta;
  BranchAttentionParams attn;
  BranchFfnParams ffn;
};

struct MultiBranchViT {
  ModelConfig cfg;
  PatchEmbedParams embed;
  std::vector<BranchBlock> blocks;
  Var head_W, head_b;
};

MultiBranchViT make_model(const ModelConfig& cfg, uint64_t seed);
std::vector<std::pair<std::string, Var>> named_params(const MultiBranchViT& m);
std::vector<Var> trainable_params(const MultiBranchViT& m);

// Per-branch module outputs captured for the diversity penalty and the
// feature-similarity report.
struct BranchFeatures {
  std::vector<Var> attn, ffn;  // n entries each, [B,N,d]
};
struct ActLog {
  std::vector<BranchFeatures> blocks;
};

// Cut the image grid into non-overlapping patches, flattened row-major as
// (channel, y, x) within each patch. images is [B,C,H,W] or [C,H,W].
Tensor patches_of(const Tensor& images, const ModelConfig& cfg);
Var patch_embed(Tape* t, const Tensor& images, const PatchEmbedParams& p, const ModelConfig& cfg);

// Score mixing matrix Wq*Wk^T so branch score terms add linearly.
Tensor fused_qk(const Tensor& Wq, const Tensor& Wk);

// Scores for one (branch, head): Xn*(W_b + lambda*sum_other W_b')*Xn^T divided
// by the rectified scale. Plain-tensor form used by tests and oracles.
Tensor joined_scores(const Tensor& Xn, const BranchAttentionParams& attn, size_t b, size_t i,
                     double lambda, size_t d_k);

Var branch_attention_forward(Tape* t, const Var& Xn, const BranchAttentionParams& attn,
                             double lambda, size_t d_k, std::vector<Var>* branch_outs = nullptr);

// Standard concat-then-project attention, the equivalence oracle for the
// summed per-head projections. Single sample, single branch.
Tensor concat_mhsa_oracle(const Tensor& Xn, const std::vector<Tensor>& Wq,
                          const std::vector<Tensor>& Wk, const std::vector<Tensor>& Wv,
                          const Tensor& Wo_full, size_t d_k);

Var branch_ffn_forward(Tape* t, const Var& Xn, const BranchFfnParams& ffn, double lambda,
                       std::vector<Var>* branch_outs = nullptr);

Var block_forward(Tape* t, const Var& X, const BranchBlock& blk, double lambda,
                  const ModelConfig& cfg, BranchFeatures* feats = nullptr);

Var model_forward(Tape* t, const Tensor& images, const MultiBranchViT& m, double lambda,
                  ActLog* act = nullptr);

// Mean branch-diversity across every (block x {attention, ffn}) site.
Var mean_diversity(Tape* t, const ActLog& act);
Var total_aux_loss(Tape* t, const ActLog& act, const DiversityConfig& cfg);

}  // namespace bf
