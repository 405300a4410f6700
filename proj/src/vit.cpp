#include "vit.hpp"

#include <cmath>

namespace bf {

void ModelConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
    throw error(ERR_CONFIG, "model.image_size must be a positive multiple of model.patch_size");
  if (dim == 0 || heads == 0 || dim % heads != 0)
    throw error(ERR_CONFIG, "model.dim must be a positive multiple of model.heads");
  if (branches < 1) throw error(ERR_CONFIG, "model.branches must be >= 1");
  if (deploy_blocks < 1) throw error(ERR_CONFIG, "model.deploy_blocks must be >= 1");
  if (num_classes < 2) throw error(ERR_CONFIG, "model.num_classes must be >= 2");
  if (ffn_hidden == 0) throw error(ERR_CONFIG, "model.ffn_hidden must be positive");
  if (channels == 0) throw error(ERR_CONFIG, "model.channels must be positive");
  if (attn_affine != "scale_only" && attn_affine != "full")
    throw error(ERR_CONFIG, "model.attn_affine must be 'scale_only' or 'full'");
  if (!(ln_eps >= 0)) throw error(ERR_CONFIG, "model.ln_eps must be >= 0");
}

bool ModelConfig::same_arch(const ModelConfig& o) const {
  return image_size == o.image_size && channels == o.channels && patch_size == o.patch_size &&
         dim == o.dim && heads == o.heads && ffn_hidden == o.ffn_hidden &&
         deploy_blocks == o.deploy_blocks && num_classes == o.num_classes && ln_eps == o.ln_eps;
}

MultiBranchViT make_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(splitmix64(seed));
  const size_t d = cfg.dim, dh = cfg.head_dim(), f = cfg.ffn_hidden;
  const double std_ = 0.02;
  MultiBranchViT m;
  m.cfg = cfg;
  m.embed.W_p = leaf(rng.trunc_normal_tensor({cfg.patch_dim(), d}, std_), true);
  m.embed.b_p = leaf(Tensor::zeros({d}), true);
  m.embed.pos = leaf(rng.trunc_normal_tensor({cfg.token_count(), d}, std_), true);
  for (size_t k = 0; k < cfg.deploy_blocks; ++k) {
    BranchBlock blk;
    blk.ln1_gamma = leaf(Tensor::full({d}, 1.0), true);
    // scale_only pins the pre-attention shift at zero so it can be folded
    // into the score/value weights exactly
    blk.ln1_beta = leaf(Tensor::zeros({d}), cfg.attn_affine == "full");
    blk.ln2_gamma = leaf(Tensor::full({d}, 1.0), true);
    blk.ln2_beta = leaf(Tensor::zeros({d}), true);
    blk.attn.branches = cfg.branches;
    blk.attn.heads = cfg.heads;
    for (size_t b = 0; b < cfg.branches; ++b)
      for (size_t i = 0; i < cfg.heads; ++i) {
        blk.attn.Wq.push_back(leaf(rng.trunc_normal_tensor({d, dh}, std_), true));
        blk.attn.Wk.push_back(leaf(rng.trunc_normal_tensor({d, dh}, std_), true));
        blk.attn.Wv.push_back(leaf(rng.trunc_normal_tensor({d, dh}, std_), true));
        blk.attn.Wo.push_back(leaf(rng.trunc_normal_tensor({dh, d}, std_), true));
      }
    for (size_t b = 0; b < cfg.branches; ++b) {
      blk.ffn.W1.push_back(leaf(rng.trunc_normal_tensor({d, f}, std_), true));
      blk.ffn.b1.push_back(leaf(Tensor::zeros({f}), true));
      blk.ffn.W2.push_back(leaf(rng.trunc_normal_tensor({f, d}, std_), true));
      blk.ffn.b2.push_back(leaf(Tensor::zeros({d}), true));
    }
    m.blocks.push_back(std::move(blk));
  }
  m.head_W = leaf(rng.trunc_normal_tensor({d, cfg.num_classes}, std_), true);
  m.head_b = leaf(Tensor::zeros({cfg.num_classes}), true);
  return m;
}

std::vector<std::pair<std::string, Var>> named_params(const MultiBranchViT& m) {
  std::vector<std::pair<std::string, Var>> out;
  out.emplace_back("embed.W_p", m.embed.W_p);
  out.emplace_back("embed.b_p", m.embed.b_p);
  out.emplace_back("embed.pos", m.embed.pos);
  for (size_t k = 0; k < m.blocks.size(); ++k) {
    const auto& blk = m.blocks[k];
    const std::string pre = "blocks." + std::to_string(k) + ".";
    out.emplace_back(pre + "ln1_gamma", blk.ln1_gamma);
    out.emplace_back(pre + "ln1_beta", blk.ln1_beta);
    out.emplace_back(pre + "ln2_gamma", blk.ln2_gamma);
    out.emplace_back(pre + "ln2_beta", blk.ln2_beta);
    for (size_t b = 0; b < blk.attn.branches; ++b)
      for (size_t i = 0; i < blk.attn.heads; ++i) {
        const std::string bi = std::to_string(b) + "." + std::to_string(i);
        out.emplace_back(pre + "attn.Wq." + bi, blk.attn.wq(b, i));
        out.emplace_back(pre + "attn.Wk." + bi, blk.attn.wk(b, i));
        out.emplace_back(pre + "attn.Wv." + bi, blk.attn.wv(b, i));
        out.emplace_back(pre + "attn.Wo." + bi, blk.attn.wo(b, i));
      }
    for (size_t b = 0; b < blk.ffn.W1.size(); ++b) {
      const std::string bs = std::to_string(b);
      out.emplace_back(pre + "ffn.W1." + bs, blk.ffn.W1[b]);
      out.emplace_back(pre + "ffn.b1." + bs, blk.ffn.b1[b]);
      out.emplace_back(pre + "ffn.W2." + bs, blk.ffn.W2[b]);
      out.emplace_back(pre + "ffn.b2." + bs, blk.ffn.b2[b]);
    }
  }
  out.emplace_back("head.W", m.head_W);
  out.emplace_back("head.b", m.head_b);
  return out;
}

std::vector<Var> trainable_params(const MultiBranchViT& m) {
  std::vector<Var> out;
  for (auto& [name, v] : named_params(m))
    if (v->trainable) out.push_back(v);
  return out;
}

Tensor patches_of(const Tensor& images, const ModelConfig& cfg) {
  Tensor imgs = images;
  if (imgs.ndim() == 3) imgs.shape.insert(imgs.shape.begin(), 1);
  if (imgs.ndim() != 4 || imgs.shape[1] != cfg.channels || imgs.shape[2] != cfg.image_size ||
      imgs.shape[3] != cfg.image_size)
    throw error(ERR_CONFIG, "patches_of: image batch " + images.shape_str() + " does not match " +
                                std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_size) +
                                "x" + std::to_string(cfg.image_size));
  const size_t B = imgs.shape[0], C = cfg.channels, H = cfg.image_size, ps = cfg.patch_size;
  const size_t g = cfg.grid(), N = cfg.token_count(), P = cfg.patch_dim();
  Tensor out = Tensor::zeros({B, N, P});
  for (size_t s = 0; s < B; ++s)
    for (size_t py = 0; py < g; ++py)
      for (size_t px = 0; px < g; ++px) {
        double* dst = out.data.data() + (s * N + py * g + px) * P;
        for (size_t c = 0; c < C; ++c)
          for (size_t iy = 0; iy < ps; ++iy)
            for (size_t ix = 0; ix < ps; ++ix)
              *dst++ = imgs.data[((s * C + c) * H + py * ps + iy) * H + px * ps + ix];
      }
  return out;
}

Var patch_embed(Tape* t, const Tensor& images, const PatchEmbedParams& p, const ModelConfig& cfg) {
  Var x = mm(t, constant(patches_of(images, cfg)), p.W_p);
  x = add_bias(t, x, p.b_p);
  return add_rows(t, x, p.pos);
}

Tensor fused_qk(const Tensor& Wq, const Tensor& Wk) { return t_mm_nt(Wq, Wk); }

// Mix one branch's weight with every other branch's, the shared mixing rule
// for score matrices and value projections.
static Var joined_weight(Tape* t, size_t b, double lambda, const std::vector<Var>& per_branch) {
  Var acc = per_branch[b];
  if (lambda != 0.0)
    for (size_t o = 0; o < per_branch.size(); ++o)
      if (o != b) acc = add_scaled(t, acc, per_branch[o], lambda);
  return acc;
}

Tensor joined_scores(const Tensor& Xn, const BranchAttentionParams& attn, size_t b, size_t i,
                     double lambda, size_t d_k) {
  if (lambda < 0.0 || lambda > 1.0)
    throw error(ERR_CONFIG, "joined_scores: lambda outside [0,1]");
  Tensor W = fused_qk(attn.wq(b, i)->val, attn.wk(b, i)->val);
  if (lambda != 0.0)
    for (size_t o = 0; o < attn.branches; ++o)
      if (o != b) t_axpy(W, fused_qk(attn.wq(o, i)->val, attn.wk(o, i)->val), lambda);
  Tensor S = t_mm_nt(t_mm(Xn, W), Xn);
  t_scale_inplace(S, 1.0 / rectified_scale(lambda, attn.branches, d_k));
  return S;
}

Var branch_attention_forward(Tape* t, const Var& Xn, const BranchAttentionParams& attn,
                             double lambda, size_t d_k, std::vector<Var>* branch_outs) {
  if (lambda < 0.0 || lambda > 1.0)
    throw error(ERR_CONFIG, "branch_attention_forward: lambda outside [0,1]");
  const size_t n = attn.branches, h = attn.heads;
  const double inv_scale = 1.0 / rectified_scale(lambda, n, d_k);
  // score mixing matrices per (branch, head)
  std::vector<Var> fq(n * h);
  for (size_t b = 0; b < n; ++b)
    for (size_t i = 0; i < h; ++i) fq[b * h + i] = mm_nt(t, attn.wq(b, i), attn.wk(b, i));
  Var block_out;
  for (size_t b = 0; b < n; ++b) {
    Var branch_out;
    for (size_t i = 0; i < h; ++i) {
      std::vector<Var> head_fq(n), head_wv(n);
      for (size_t o = 0; o < n; ++o) {
        head_fq[o] = fq[o * h + i];
        head_wv[o] = attn.wv(o, i);
      }
      Var W = joined_weight(t, b, lambda, head_fq);
      Var V = joined_weight(t, b, lambda, head_wv);
      Var S = scale(t, bmm_nt(t, mm(t, Xn, W), Xn), inv_scale);
      Var P = row_softmax(t, S);
      Var H = bmm(t, P, mm(t, Xn, V));
      Var O = mm(t, H, attn.wo(b, i));
      branch_out = branch_out ? add(t, branch_out, O) : O;
    }
    if (branch_outs) branch_outs->push_back(branch_out);
    block_out = block_out ? add(t, block_out, branch_out) : branch_out;
  }
  return block_out;
}

Tensor concat_mhsa_oracle(const Tensor& Xn, const std::vector<Tensor>& Wq,
                          const std::vector<Tensor>& Wk, const std::vector<Tensor>& Wv,
                          const Tensor& Wo_full, size_t d_k) {
  const size_t h = Wq.size();
  const size_t N = Xn.shape[0], dh = Wq[0].shape[1];
  Tensor Hcat = Tensor::zeros({N, h * dh});
  for (size_t i = 0; i < h; ++i) {
    Tensor S = t_mm_nt(t_mm(Xn, Wq[i]), t_mm(Xn, Wk[i]));
    t_scale_inplace(S, 1.0 / std::sqrt(double(d_k)));
    softmax_rows_inplace(S);
    Tensor H = t_mm(S, t_mm(Xn, Wv[i]));
    for (size_t r = 0; r < N; ++r)
      for (size_t c = 0; c < dh; ++c) Hcat.at(r, i * dh + c) = H.at(r, c);
  }
  return t_mm(Hcat, Wo_full);
}

Var branch_ffn_forward(Tape* t, const Var& Xn, const BranchFfnParams& ffn, double lambda,
                       std::vector<Var>* branch_outs) {
  if (lambda < 0.0 || lambda > 1.0)
    throw error(ERR_CONFIG, "branch_ffn_forward: lambda outside [0,1]");
  const size_t n = ffn.W1.size();
  std::vector<Var> hidden(n);
  for (size_t b = 0; b < n; ++b) hidden[b] = add_bias(t, mm(t, Xn, ffn.W1[b]), ffn.b1[b]);
  Var out;
  for (size_t b = 0; b < n; ++b) {
    Var joined = hidden[b];
    if (lambda != 0.0)
      for (size_t o = 0; o < n; ++o)
        if (o != b) joined = add_scaled(t, joined, hidden[o], lambda);
    Var y = add_bias(t, mm(t, gelu(t, joined), ffn.W2[b]), ffn.b2[b]);
    if (branch_outs) branch_outs->push_back(y);
    out = out ? add(t, out, y) : y;
  }
  return out;
}

Var block_forward(Tape* t, const Var& X, const BranchBlock& blk, double lambda,
                  const ModelConfig& cfg, BranchFeatures* feats) {
  Var xn1 = affine(t, layer_norm(t, X, cfg.ln_eps), blk.ln1_gamma, blk.ln1_beta);
  Var a = branch_attention_forward(t, xn1, blk.attn, lambda, cfg.head_dim(),
                                   feats ? &feats->attn : nullptr);
  Var x1 = add(t, X, a);
  Var xn2 = affine(t, layer_norm(t, x1, cfg.ln_eps), blk.ln2_gamma, blk.ln2_beta);
  Var f = branch_ffn_forward(t, xn2, blk.ffn, lambda, feats ? &feats->ffn : nullptr);
  return add(t, x1, f);
}

Var model_forward(Tape* t, const Tensor& images, const MultiBranchViT& m, double lambda,
                  ActLog* act) {
  Var x = patch_embed(t, images, m.embed, m.cfg);
  for (const auto& blk : m.blocks) {
    BranchFeatures* feats = nullptr;
    if (act) {
      act->blocks.emplace_back();
      feats = &act->blocks.back();
    }
    x = block_forward(t, x, blk, lambda, m.cfg, feats);
  }
  Var pooled = mean_tokens(t, x);
  return add_bias(t, mm(t, pooled, m.head_W), m.head_b);
}

Var mean_diversity(Tape* t, const ActLog& act) {
  Var acc;
  size_t sites = 0;
  for (const auto& blk : act.blocks) {
    for (const auto* feats : {&blk.attn, &blk.ffn}) {
      Var d = diversity_loss(t, *feats);
      acc = acc ? add(t, acc, d) : d;
      ++sites;
    }
  }
  if (!acc || sites == 0) return constant(Tensor::scalar(0.0));
  return scale(t, acc, 1.0 / double(sites));
}

Var total_aux_loss(Tape* t, const ActLog& act, const DiversityConfig& cfg) {
  if (!cfg.enabled) return constant(Tensor::scalar(0.0));
  return scale(t, mean_diversity(t, act), cfg.alpha);
}

}  // namespace bf
