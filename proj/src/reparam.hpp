#pragma once
#include <cstdint>
#include <vector>

#include "vit.hpp"

namespace bf {

// Collapsed attention of one block: per head a dense d x d score matrix (rank
// at most branches*d_h), summed value/output projections, and the fixed
// pre-softmax divisor.
struct FusedAttentionParams {
  std::vector<Tensor> W;  // per head, d x d
  std::vector<Tensor> V;  // per head, d x d_h
  std::vector<Tensor> O;  // per head, d_h x d
  double scale = 1.0;
};

// Normalization stage of a deployed block: parameter-free once its affine has
// been folded into the neighboring weights.
struct NormStage {
  bool has_affine = true;
  Tensor gamma, beta;
};

struct FusedBlockParams {
  NormStage ln1, ln2;
  FusedAttentionParams attn;
  Tensor W1, b1, W2, b2;
};

struct PatchEmbedTensors {
  Tensor W_p, b_p, pos;
};

struct DeployedViT {
  ModelConfig cfg;  // cfg.branches records how many branches were folded in
  PatchEmbedTensors embed;
  std::vector<FusedBlockParams> blocks;
  Tensor head_W, head_b;
};

FusedAttentionParams collapse_attention(const BranchAttentionParams& attn, size_t branches,
                                        size_t d_k);
void collapse_ffn(const BranchFfnParams& ffn, Tensor& W1, Tensor& b1, Tensor& W2, Tensor& b2);

// Whole-model collapse; affines stay in place (fold them with absorb_all).
DeployedViT collapse_model(const MultiBranchViT& m);

// gamma folds into the first FFN matrix, the shift into its bias:
// (g.u+b)W1 + b1 == u(diag(g)W1) + (W1^T b + b1)
void absorb_ln_forward_ffn(const Tensor& gamma, const Tensor& beta, Tensor& W1, Tensor& b1);

// Scale-only fold into the score/value matrices by diagonal conjugation;
// requires the shift to be exactly zero.
void absorb_ln_forward_attn(const Tensor& gamma, const Tensor& beta, FusedAttentionParams& attn);

// Fold backward into the producing layer's output: W2' = W2 diag(g),
// b2' = g.b2 + b.
void absorb_ln_backward(const Tensor& gamma, const Tensor& beta, Tensor& W2, Tensor& b2);

void absorb_ln_into_patch_embed(const Tensor& gamma, const Tensor& beta, PatchEmbedTensors& embed);

// Runs every absorption pass; afterwards all norm stages the passes could
// reach are parameter-free.
void absorb_all(DeployedViT& dp);

Tensor deployed_forward(const Tensor& images, const DeployedViT& dp);

struct VerifyReport {
  size_t probes = 0;
  uint64_t seed = 0;
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Drives both models over seeded random inputs at full mixing and compares
// logits. rel = abs / largest |logit| seen across both models.
VerifyReport verify_equivalence(const MultiBranchViT& mb, const DeployedViT& dp, size_t probes,
                                uint64_t seed);

}  // namespace bf
