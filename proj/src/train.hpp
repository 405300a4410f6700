#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "dataset.hpp"
#include "json_util.hpp"
#include "schedule.hpp"
#include "vit.hpp"

namespace bf {

struct TrainConfig {
  std::string optimizer = "adamw";  // adamw | sgd_momentum
  double base_lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double momentum = 0.9;
  size_t batch_size = 128;
  uint64_t total_steps = 0;
  uint64_t lr_warmup_steps = 0;  // defaults to 5% of total_steps when absent in JSON
  std::string lr_schedule = "cosine_decay";
  JoinSchedule join;
  DiversityConfig diversity;
  uint64_t seed = 0;
  json dataset;  // see make_train_eval_datasets
  uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  uint64_t eval_every = 0;        // 0: evaluate once at the end
  ModelConfig model;

  // Optional early stop: check train accuracy every train_acc_every steps and
  // stop once it reaches stop_at_train_acc (0 disables).
  double stop_at_train_acc = 0.0;
  uint64_t train_acc_every = 50;
  std::string resume_from;

  void validate() const;
};

TrainConfig train_config_from_json(const json& j);
json train_config_to_json(const TrainConfig& c);

struct OptimizerState {
  uint64_t step = 0;
  std::vector<Tensor> m, v;  // AdamW moments; SGD-M uses m as velocity
};

OptimizerState init_optimizer_state(const std::vector<Var>& params);

// Plain-tensor helpers shared by training and evaluation.
double cross_entropy_value(const Tensor& logits, const std::vector<size_t>& labels);
size_t argmax_matches(const Tensor& logits, const std::vector<size_t>& labels);

void adamw_step(const std::vector<Var>& params, OptimizerState& st, double lr, double wd,
                double beta1, double beta2, double eps);
void sgd_momentum_step(const std::vector<Var>& params, OptimizerState& st, double lr,
                       double momentum);

double lr_at(uint64_t step, const TrainConfig& cfg);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  size_t count = 0, correct = 0;
};

EvalResult evaluate_model(const MultiBranchViT& m, double lambda, const DatasetHandle& data,
                          size_t batch_size);
EvalResult evaluate_deployed(const DeployedViT& m, const DatasetHandle& data, size_t batch_size);

struct MetricsRow {
  uint64_t step = 0;
  double lambda = 0.0, lr = 0.0, loss = 0.0, div_loss = 0.0, distill_loss = 0.0;
  double eval_acc = 0.0;
  bool has_eval = false;
};

struct TrainResult {
  MultiBranchViT model;
  std::vector<MetricsRow> metrics;
  PhaseMeta final_phase;
  EvalResult final_eval;
  uint64_t steps_run = 0;
  bool early_stopped = false;
};

// Runs the configured number of steps (or resumes partway through them) and
// returns the trained model plus one metrics row per step. Checkpoints land
// in checkpoint_dir when it is non-empty. Deterministic for a fixed config.
TrainResult train_loop(const TrainConfig& cfg, const std::string& checkpoint_dir = "");

// Fixed-header CSV, one row per step; eval_acc is blank on rows without one.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

}  // namespace bf
