#include "reparam.hpp"

#include <cmath>

namespace bf {

FusedAttentionParams collapse_attention(const BranchAttentionParams& attn, size_t branches,
                                        size_t d_k) {
  FusedAttentionParams out;
  out.scale = rectified_scale(1.0, branches, d_k);
  for (size_t i = 0; i < attn.heads; ++i) {
    Tensor W = fused_qk(attn.wq(0, i)->val, attn.wk(0, i)->val);
    Tensor V = attn.wv(0, i)->val;
    Tensor O = attn.wo(0, i)->val;
    for (size_t b = 1; b < branches; ++b) {
      t_axpy(W, fused_qk(attn.wq(b, i)->val, attn.wk(b, i)->val), 1.0);
      t_axpy(V, attn.wv(b, i)->val, 1.0);
      t_axpy(O, attn.wo(b, i)->val, 1.0);
    }
    out.W.push_back(std::move(W));
    out.V.push_back(std::move(V));
    out.O.push_back(std::move(O));
  }
  return out;
}

void collapse_ffn(const BranchFfnParams& ffn, Tensor& W1, Tensor& b1, Tensor& W2, Tensor& b2) {
  W1 = ffn.W1[0]->val;
  b1 = ffn.b1[0]->val;
  W2 = ffn.W2[0]->val;
  b2 = ffn.b2[0]->val;
  for (size_t b = 1; b < ffn.W1.size(); ++b) {
    t_axpy(W1, ffn.W1[b]->val, 1.0);
    t_axpy(b1, ffn.b1[b]->val, 1.0);
    t_axpy(W2, ffn.W2[b]->val, 1.0);
    t_axpy(b2, ffn.b2[b]->val, 1.0);
  }
}

DeployedViT collapse_model(const MultiBranchViT& m) {
  DeployedViT dp;
  dp.cfg = m.cfg;
  dp.embed.W_p = m.embed.W_p->val;
  dp.embed.b_p = m.embed.b_p->val;
  dp.embed.pos = m.embed.pos->val;
  for (const auto& blk : m.blocks) {
    FusedBlockParams fb;
    fb.ln1 = {true, blk.ln1_gamma->val, blk.ln1_beta->val};
    fb.ln2 = {true, blk.ln2_gamma->val, blk.ln2_beta->val};
    fb.attn = collapse_attention(blk.attn, m.cfg.branches, m.cfg.head_dim());
    collapse_ffn(blk.ffn, fb.W1, fb.b1, fb.W2, fb.b2);
    dp.blocks.push_back(std::move(fb));
  }
  dp.head_W = m.head_W->val;
  dp.head_b = m.head_b->val;
  return dp;
}

void absorb_ln_forward_ffn(const Tensor& gamma, const Tensor& beta, Tensor& W1, Tensor& b1) {
  const size_t d = W1.shape[0], f = W1.shape[1];
  if (gamma.numel() != d || beta.numel() != d || b1.numel() != f)
    throw error(ERR_CONFIG, "absorb_ln_forward_ffn: width mismatch");
  for (size_t r = 0; r < d; ++r)
    for (size_t c = 0; c < f; ++c) b1.data[c] += beta.data[r] * W1.at(r, c);
  for (size_t r = 0; r < d; ++r)
    for (size_t c = 0; c < f; ++c) W1.at(r, c) *= gamma.data[r];
}

void absorb_ln_forward_attn(const Tensor& gamma, const Tensor& beta, FusedAttentionParams& attn) {
  if (max_abs(beta) != 0.0)
    throw error(ERR_CONFIG,
                "absorb_ln_forward_attn: nonzero shift cannot be folded by conjugation; use "
                "absorb_ln_backward");
  const size_t d = gamma.numel();
  for (auto& W : attn.W) {
    for (size_t r = 0; r < d; ++r)
      for (size_t c = 0; c < d; ++c) W.at(r, c) *= gamma.data[r] * gamma.data[c];
  }
  for (auto& V : attn.V) {
    const size_t dh = V.shape[1];
    for (size_t r = 0; r < d; ++r)
      for (size_t c = 0; c < dh; ++c) V.at(r, c) *= gamma.data[r];
  }
}

void absorb_ln_backward(const Tensor& gamma, const Tensor& beta, Tensor& W2, Tensor& b2) {
  const size_t f = W2.shape[0], d = W2.shape[1];
  if (gamma.numel() != d || beta.numel() != d || b2.numel() != d)
    throw error(ERR_CONFIG, "absorb_ln_backward: width mismatch");
  for (size_t r = 0; r < f; ++r)
    for (size_t c = 0; c < d; ++c) W2.at(r, c) *= gamma.data[c];
  for (size_t c = 0; c < d; ++c) b2.data[c] = gamma.data[c] * b2.data[c] + beta.data[c];
}

void absorb_ln_into_patch_embed(const Tensor& gamma, const Tensor& beta, PatchEmbedTensors& embed) {
  const size_t p = embed.W_p.shape[0], d = embed.W_p.shape[1];
  if (gamma.numel() != d || beta.numel() != d) throw error(ERR_CONFIG, "absorb_ln_into_patch_embed: width mismatch");
  for (size_t r = 0; r < p; ++r)
    for (size_t c = 0; c < d; ++c) embed.W_p.at(r, c) *= gamma.data[c];
  for (size_t c = 0; c < d; ++c) embed.b_p.data[c] = gamma.data[c] * embed.b_p.data[c] + beta.data[c];
  for (size_t r = 0; r < embed.pos.shape[0]; ++r)
    for (size_t c = 0; c < d; ++c) embed.pos.at(r, c) *= gamma.data[c];
  // note: the patch-embedding fold rescales the whole residual stream; the
  // verifier, not this pass, decides whether the surrounding architecture
  // kept the function intact
}

void absorb_all(DeployedViT& dp) {
  for (size_t k = 0; k < dp.blocks.size(); ++k) {
    FusedBlockParams& blk = dp.blocks[k];
    if (blk.ln1.has_affine) {
      if (max_abs(blk.ln1.beta) == 0.0) {
        absorb_ln_forward_attn(blk.ln1.gamma, blk.ln1.beta, blk.attn);
      } else if (k == 0) {
        absorb_ln_into_patch_embed(blk.ln1.gamma, blk.ln1.beta, dp.embed);
      } else {
        absorb_ln_backward(blk.ln1.gamma, blk.ln1.beta, dp.blocks[k - 1].W2, dp.blocks[k - 1].b2);
      }
      blk.ln1 = {false, {}, {}};
    }
    if (blk.ln2.has_affine) {
      absorb_ln_forward_ffn(blk.ln2.gamma, blk.ln2.beta, blk.W1, blk.b1);
      blk.ln2 = {false, {}, {}};
    }
  }
}

static Tensor normalized(const Tensor& X, const NormStage& st, double eps) {
  Tensor Xn = X;
  normalize_rows_inplace(Xn, eps);
  if (st.has_affine) affine_rows_inplace(Xn, st.gamma, st.beta);
  return Xn;
}

Tensor deployed_forward(const Tensor& images, const DeployedViT& dp) {
  const ModelConfig& cfg = dp.cfg;
  Tensor X = t_mm(patches_of(images, cfg), dp.embed.W_p);
  t_add_bias_rows(X, dp.embed.b_p);
  t_add_table_rows(X, dp.embed.pos);
  for (const auto& blk : dp.blocks) {
    Tensor Xn = normalized(X, blk.ln1, cfg.ln_eps);
    for (size_t i = 0; i < blk.attn.W.size(); ++i) {
      // scores via exactly two products: Y = Xn W[i], then S = Y Xn^T
      Tensor Y = t_mm(Xn, blk.attn.W[i]);
      Tensor S = t_bmm_nt(Y, Xn);
      t_scale_inplace(S, 1.0 / blk.attn.scale);
      softmax_rows_inplace(S);
      Tensor H = t_bmm(S, t_mm(Xn, blk.attn.V[i]));
      t_axpy(X, t_mm(H, blk.attn.O[i]), 1.0);
    }
    Tensor Xn2 = normalized(X, blk.ln2, cfg.ln_eps);
    Tensor Hid = t_mm(Xn2, blk.W1);
    t_add_bias_rows(Hid, blk.b1);
    gelu_inplace(Hid);
    Tensor F = t_mm(Hid, blk.W2);
    t_add_bias_rows(F, blk.b2);
    t_axpy(X, F, 1.0);
  }
  // token mean then classifier
  const size_t B = X.shape[0], N = X.shape[1], d = X.shape[2];
  Tensor pooled = Tensor::zeros({B, d});
  for (size_t s = 0; s < B; ++s)
    for (size_t n = 0; n < N; ++n)
      for (size_t j = 0; j < d; ++j) pooled.data[s * d + j] += X.data[(s * N + n) * d + j] / double(N);
  Tensor logits = t_mm(pooled, dp.head_W);
  t_add_bias_rows(logits, dp.head_b);
  return logits;
}

VerifyReport verify_equivalence(const MultiBranchViT& mb, const DeployedViT& dp, size_t probes,
                                uint64_t seed) {
  if (probes == 0) throw error(ERR_CONFIG, "verify_equivalence: probes must be positive");
  if (!mb.cfg.same_arch(dp.cfg))
    throw error(ERR_MODEL_MISMATCH, "verify_equivalence: model architectures differ");
  Rng rng(splitmix64(seed));
  VerifyReport rep;
  rep.probes = probes;
  rep.seed = seed;
  double scale_den = 0.0;
  Tensor images = rng.normal_tensor({probes, mb.cfg.channels, mb.cfg.image_size, mb.cfg.image_size});
  Var a = model_forward(nullptr, images, mb, 1.0);
  Tensor b = deployed_forward(images, dp);
  rep.max_abs_err = max_abs_diff(a->val, b);
  scale_den = std::max(max_abs(a->val), max_abs(b));
  rep.max_rel_err = rep.max_abs_err / std::max(scale_den, 1e-30);
  rep.pass = rep.max_rel_err <= 1e-8;
  return rep;
}

}  // namespace bf
