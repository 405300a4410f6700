#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "json_util.hpp"
#include "reparam.hpp"
#include "vit.hpp"

namespace bf {

// Closed-form FLOP counts (2 FLOPs per multiply-accumulate) plus parameter
// totals. token_override replaces the config's token count, for geometries
// like N=197 that a square patch grid cannot express.
json flops_report(const ModelConfig& cfg, size_t token_override = 0);

struct SimilarityMatrix {
  size_t block = 0;
  std::string module;  // attention | ffn
  std::string kind;    // weights | features
  Tensor M;            // branches x branches, cosine entries
};

// Cosine between flattened per-branch parameter vectors, one matrix per
// (block, module) site.
std::vector<SimilarityMatrix> weights_similarity(const MultiBranchViT& m);

// Mean cosine between per-branch module outputs over seeded probe batches
// drawn from the dataset.
std::vector<SimilarityMatrix> features_similarity(const MultiBranchViT& m, double lambda,
                                                  const DatasetHandle& data, size_t probe_batches,
                                                  size_t batch_size, uint64_t seed);

void write_similarity_csv(const std::string& path, const SimilarityMatrix& sm);
json similarity_json(const std::vector<SimilarityMatrix>& mats);

// Traditional transformer baseline used only as the timing yardstick: per-head
// projections, concatenated heads, monolithic output matrix.
struct ClassicViT {
  ModelConfig cfg;  // branches is ignored (always a single path)
  PatchEmbedTensors embed;
  struct Block {
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    std::vector<Tensor> Wq, Wk, Wv;  // per head, d x d_h
    Tensor Wo;                       // d x d
    Tensor W1, b1, W2, b2;
  };
  std::vector<Block> blocks;
  Tensor head_W, head_b;
};

ClassicViT make_classic(const ModelConfig& cfg, uint64_t seed);
Tensor classic_forward(const Tensor& images, const ClassicViT& m);

// Wall-clock per-forward stats for the deployed model against an equal-width
// classic baseline, same process and thread.
json bench_models(const DeployedViT& dp, const ModelConfig& baseline_cfg, size_t iters,
                  size_t warmup, size_t batch, uint64_t seed);

}  // namespace bf
