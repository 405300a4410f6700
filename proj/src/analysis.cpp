#include "analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

namespace bf {
namespace {

double cosine(const double* a, const double* b, size_t n) {
  double ab = 0, aa = 0, bb = 0;
  for (size_t i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  if (a == b) return 1.0;  // exact unit diagonal
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

std::vector<double> flatten_concat(const std::vector<const Tensor*>& parts) {
  std::vector<double> out;
  size_t total = 0;
  for (const auto* t : parts) total += t->data.size();
  out.reserve(total);
  for (const auto* t : parts) out.insert(out.end(), t->data.begin(), t->data.end());
  return out;
}

SimilarityMatrix cosine_matrix(size_t block, const std::string& module, const std::string& kind,
                               const std::vector<std::vector<double>>& vecs) {
  const size_t n = vecs.size();
  SimilarityMatrix sm{block, module, kind, Tensor::zeros({n, n})};
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i; j < n; ++j) {
      const double c = cosine(vecs[i].data(), vecs[j].data(), vecs[i].size());
      sm.M.at(i, j) = c;
      sm.M.at(j, i) = c;
    }
  return sm;
}

double percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * double(v.size() - 1);
  const size_t lo = size_t(pos);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - double(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

template <typename F>
json time_forward(F&& fwd, size_t iters, size_t warmup) {
  using clock = std::chrono::steady_clock;
  for (size_t i = 0; i < warmup; ++i) fwd();
  std::vector<double> ms(iters);
  for (size_t i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    fwd();
    const auto t1 = clock::now();
    ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  return json{{"median_ms", percentile(ms, 0.5)},
              {"p10_ms", percentile(ms, 0.1)},
              {"p90_ms", percentile(ms, 0.9)}};
}

}  // namespace

json flops_report(const ModelConfig& cfg, size_t token_override) {
  cfg.validate();
  const size_t N = token_override ? token_override : cfg.token_count();
  const size_t d = cfg.dim, h = cfg.heads, dk = cfg.head_dim(), f = cfg.ffn_hidden;
  const size_t L = cfg.deploy_blocks, n = cfg.branches, classes = cfg.num_classes;
  const size_t pdim = cfg.patch_dim();

  // All counts are MACs doubled into FLOPs.
  const uint64_t patch_embed = 2ull * N * pdim * d;
  const uint64_t scores_traditional = 2ull * (2ull * N * d * d + uint64_t(N) * N * d);
  const uint64_t scores_fused = 2ull * (uint64_t(h) * N * d * d + uint64_t(N) * N * d);
  const uint64_t scores_fused_literal = 2ull * h * (uint64_t(N) * d * d + uint64_t(N) * N * d);
  // Value projection, attention-weighted sum, output projection; h*dk = d.
  const uint64_t value_output = 2ull * (N * d * (h * dk) + uint64_t(N) * N * (h * dk) + N * (h * dk) * d);
  const uint64_t ffn = 2ull * (2ull * N * d * f);
  const uint64_t head = 2ull * d * classes;

  const uint64_t per_block_common = value_output + ffn;
  const uint64_t total_traditional = patch_embed + L * (scores_traditional + per_block_common) + head;
  const uint64_t total_fused = patch_embed + L * (scores_fused + per_block_common) + head;

  const uint64_t attn_params_deployed = uint64_t(h) * d * d + 2ull * d * dk * h;
  const uint64_t attn_params_multibranch = uint64_t(n) * h * (3ull * d * dk + uint64_t(dk) * d);
  const uint64_t ffn_params_single = uint64_t(d) * f + f + uint64_t(f) * d + d;
  const uint64_t embed_params = uint64_t(pdim) * d + d + uint64_t(N) * d;
  const uint64_t head_params = uint64_t(d) * classes + classes;

  json rep;
  rep["convention"] = "flops = 2 * macs";
  rep["dims"] = {{"tokens", N},      {"dim", d},   {"heads", h},
                 {"head_dim", dk},   {"ffn_hidden", f}, {"blocks", L},
                 {"branches", n},    {"patch_dim", pdim}, {"num_classes", classes}};
  rep["components"] = {{"patch_embed", patch_embed},
                       {"attn_scores_traditional_per_block", scores_traditional},
                       {"attn_scores_fused_per_block", scores_fused},
                       {"fused_scores_per_head_literal", scores_fused_literal},
                       {"attn_value_output_per_block", value_output},
                       {"ffn_per_block", ffn},
                       {"head", head}};
  rep["totals"] = {{"traditional", total_traditional}, {"fused", total_fused}};
  rep["params"] = {{"attention_per_block_deployed", attn_params_deployed},
                   {"attention_per_block_multibranch", attn_params_multibranch},
                   {"ffn_per_block_deployed", ffn_params_single},
                   {"ffn_per_block_multibranch", uint64_t(n) * ffn_params_single},
                   {"patch_embed", embed_params},
                   {"head", head_params},
                   {"total_deployed", embed_params + head_params +
                                          L * (attn_params_deployed + ffn_params_single)}};
  return rep;
}

std::vector<SimilarityMatrix> weights_similarity(const MultiBranchViT& m) {
  if (m.cfg.branches < 2)
    throw error(ERR_NOTHING_TO_ANALYZE, "similarity needs at least two branches");
  std::vector<SimilarityMatrix> out;
  for (size_t k = 0; k < m.blocks.size(); ++k) {
    const auto& blk = m.blocks[k];
    std::vector<std::vector<double>> attn_vecs, ffn_vecs;
    for (size_t b = 0; b < m.cfg.branches; ++b) {
      std::vector<const Tensor*> parts;
      for (size_t i = 0; i < m.cfg.heads; ++i) parts.push_back(&blk.attn.wq(b, i)->val);
      for (size_t i = 0; i < m.cfg.heads; ++i) parts.push_back(&blk.attn.wk(b, i)->val);
      for (size_t i = 0; i < m.cfg.heads; ++i) parts.push_back(&blk.attn.wv(b, i)->val);
      for (size_t i = 0; i < m.cfg.heads; ++i) parts.push_back(&blk.attn.wo(b, i)->val);
      attn_vecs.push_back(flatten_concat(parts));
      ffn_vecs.push_back(flatten_concat(
          {&blk.ffn.W1[b]->val, &blk.ffn.b1[b]->val, &blk.ffn.W2[b]->val, &blk.ffn.b2[b]->val}));
    }
    out.push_back(cosine_matrix(k, "attention", "weights", attn_vecs));
    out.push_back(cosine_matrix(k, "ffn", "weights", ffn_vecs));
  }
  return out;
}

std::vector<SimilarityMatrix> features_similarity(const MultiBranchViT& m, double lambda,
                                                  const DatasetHandle& data, size_t probe_batches,
                                                  size_t batch_size, uint64_t seed) {
  if (m.cfg.branches < 2)
    throw error(ERR_NOTHING_TO_ANALYZE, "similarity needs at least two branches");
  if (data.count == 0) throw error(ERR_CONFIG, "feature similarity needs a non-empty dataset");
  if (probe_batches == 0 || batch_size == 0)
    throw error(ERR_CONFIG, "feature similarity needs probe_batches > 0 and batch_size > 0");

  const size_t n = m.cfg.branches;
  const size_t L = m.blocks.size();
  // Accumulate mean row cosine per (block, module, pair) across batches.
  std::vector<Tensor> attn_acc(L, Tensor::zeros({n, n})), ffn_acc(L, Tensor::zeros({n, n}));

  Rng rng(splitmix64(seed));
  for (size_t pb = 0; pb < probe_batches; ++pb) {
    std::vector<size_t> idx(std::min(batch_size, data.count));
    for (auto& v : idx) v = rng.below(data.count);
    const Tensor images = gather_images(data, idx);
    ActLog act;
    model_forward(nullptr, images, m, lambda, &act);
    for (size_t k = 0; k < L; ++k) {
      auto site = [&](const std::vector<Var>& feats, Tensor& acc) {
        const size_t d = feats[0]->val.last_dim();
        const size_t rows = feats[0]->val.numel() / d;
        for (size_t i = 0; i < n; ++i)
          for (size_t j = i; j < n; ++j) {
            double mean = 0.0;
            for (size_t r = 0; r < rows; ++r)
              mean += cosine(feats[i]->val.data.data() + r * d, feats[j]->val.data.data() + r * d, d);
            mean /= double(rows);
            acc.at(i, j) += mean;
            if (j != i) acc.at(j, i) += mean;
          }
      };
      site(act.blocks[k].attn, attn_acc[k]);
      site(act.blocks[k].ffn, ffn_acc[k]);
    }
  }

  std::vector<SimilarityMatrix> out;
  for (size_t k = 0; k < L; ++k) {
    for (auto& v : attn_acc[k].data) v /= double(probe_batches);
    for (auto& v : ffn_acc[k].data) v /= double(probe_batches);
    out.push_back({k, "attention", "features", std::move(attn_acc[k])});
    out.push_back({k, "ffn", "features", std::move(ffn_acc[k])});
  }
  return out;
}

void write_similarity_csv(const std::string& path, const SimilarityMatrix& sm) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw error(ERR_CONFIG, "cannot open '" + path + "' for writing");
  f << "i,j,cosine\n";
  const size_t n = sm.M.rows();
  char buf[40];
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", sm.M.at(i, j));
      f << i << ',' << j << ',' << buf << '\n';
    }
}

json similarity_json(const std::vector<SimilarityMatrix>& mats) {
  json sites = json::array();
  for (const auto& sm : mats) {
    json rows = json::array();
    for (size_t i = 0; i < sm.M.rows(); ++i) {
      json row = json::array();
      for (size_t j = 0; j < sm.M.cols(); ++j) row.push_back(sm.M.at(i, j));
      rows.push_back(std::move(row));
    }
    sites.push_back(json{{"block", sm.block},
                         {"module", sm.module},
                         {"kind", sm.kind},
                         {"matrix", std::move(rows)}});
  }
  return json{{"sites", std::move(sites)}};
}

ClassicViT make_classic(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  const size_t d = cfg.dim, dk = cfg.head_dim();
  Rng rng(splitmix64(seed));
  auto w = [&](std::initializer_list<size_t> shape) {
    return rng.trunc_normal_tensor(std::vector<size_t>(shape), 0.02);
  };
  ClassicViT m;
  m.cfg = cfg;
  m.embed.W_p = w({cfg.patch_dim(), d});
  m.embed.b_p = Tensor::zeros({d});
  m.embed.pos = w({cfg.token_count(), d});
  m.blocks.resize(cfg.deploy_blocks);
  for (auto& blk : m.blocks) {
    blk.ln1_gamma = Tensor::full({d}, 1.0);
    blk.ln1_beta = Tensor::zeros({d});
    blk.ln2_gamma = Tensor::full({d}, 1.0);
    blk.ln2_beta = Tensor::zeros({d});
    for (size_t i = 0; i < cfg.heads; ++i) {
      blk.Wq.push_back(w({d, dk}));
      blk.Wk.push_back(w({d, dk}));
      blk.Wv.push_back(w({d, dk}));
    }
    blk.Wo = w({d, d});
    blk.W1 = w({d, cfg.ffn_hidden});
    blk.b1 = Tensor::zeros({cfg.ffn_hidden});
    blk.W2 = w({cfg.ffn_hidden, d});
    blk.b2 = Tensor::zeros({d});
  }
  m.head_W = w({d, cfg.num_classes});
  m.head_b = Tensor::zeros({cfg.num_classes});
  return m;
}

Tensor classic_forward(const Tensor& images, const ClassicViT& m) {
  const auto& cfg = m.cfg;
  const size_t d = cfg.dim, dk = cfg.head_dim(), N = cfg.token_count();
  Tensor X = t_mm(patches_of(images, cfg), m.embed.W_p);
  t_add_bias_rows(X, m.embed.b_p);
  t_add_table_rows(X, m.embed.pos);
  const size_t B = X.numel() / (N * d);

  const double scale = 1.0 / std::sqrt(double(dk));
  for (const auto& blk : m.blocks) {
    Tensor Xn = X;
    normalize_rows_inplace(Xn, cfg.ln_eps);
    affine_rows_inplace(Xn, blk.ln1_gamma, blk.ln1_beta);
    Tensor Hcat = Tensor::zeros({B, N, d});
    for (size_t i = 0; i < cfg.heads; ++i) {
      const Tensor Q = t_mm(Xn, blk.Wq[i]);
      const Tensor K = t_mm(Xn, blk.Wk[i]);
      Tensor S = t_bmm_nt(Q, K);
      t_scale_inplace(S, scale);
      softmax_rows_inplace(S);
      const Tensor H = t_bmm(S, t_mm(Xn, blk.Wv[i]));  // [B,N,dk]
      for (size_t b = 0; b < B; ++b)
        for (size_t r = 0; r < N; ++r)
          std::copy_n(H.data.begin() + std::ptrdiff_t((b * N + r) * dk), dk,
                      Hcat.data.begin() + std::ptrdiff_t((b * N + r) * d + i * dk));
    }
    t_axpy(X, t_mm(Hcat, blk.Wo), 1.0);

    Tensor Xn2 = X;
    normalize_rows_inplace(Xn2, cfg.ln_eps);
    affine_rows_inplace(Xn2, blk.ln2_gamma, blk.ln2_beta);
    Tensor Hf = t_mm(Xn2, blk.W1);
    t_add_bias_rows(Hf, blk.b1);
    gelu_inplace(Hf);
    Tensor F = t_mm(Hf, blk.W2);
    t_add_bias_rows(F, blk.b2);
    t_axpy(X, F, 1.0);
  }

  Tensor pooled = Tensor::zeros({B, d});
  for (size_t b = 0; b < B; ++b)
    for (size_t r = 0; r < N; ++r)
      for (size_t c = 0; c < d; ++c) pooled.data[b * d + c] += X.data[(b * N + r) * d + c];
  for (auto& v : pooled.data) v /= double(N);
  Tensor logits = t_mm(pooled, m.head_W);
  t_add_bias_rows(logits, m.head_b);
  return logits;
}

json bench_models(const DeployedViT& dp, const ModelConfig& baseline_cfg, size_t iters,
                  size_t warmup, size_t batch, uint64_t seed) {
  if (iters == 0) throw error(ERR_CONFIG, "bench needs --iters > 0");
  if (batch == 0) throw error(ERR_CONFIG, "bench needs a positive batch size");
  const ClassicViT baseline = make_classic(baseline_cfg, seed);
  Rng rng(splitmix64(seed));
  const Tensor images = rng.normal_tensor(
      {batch, dp.cfg.channels, dp.cfg.image_size, dp.cfg.image_size});

  volatile double sink = 0.0;  // keep the forwards from being optimized out
  json deployed = time_forward(
      [&] { sink = deployed_forward(images, dp).data[0]; }, iters, warmup);
  json classic = time_forward(
      [&] { sink = classic_forward(images, baseline).data[0]; }, iters, warmup);
  (void)sink;

  const double speedup = classic.at("median_ms").get<double>() /
                         std::max(1e-12, deployed.at("median_ms").get<double>());
  return json{{"deployed", std::move(deployed)},
              {"baseline", std::move(classic)},
              {"speedup", speedup},
              {"iters", iters},
              {"warmup", warmup},
              {"batch", batch},
              {"seed", seed},
              {"deployed_blocks", dp.cfg.deploy_blocks},
              {"baseline_blocks", baseline_cfg.deploy_blocks}};
}

}  // namespace bf
