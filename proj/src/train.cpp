#include "train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace bf {
namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<size_t> strided_subset(size_t count, size_t want) {
  // Spread across the whole range so class-grouped datasets stay balanced.
  want = std::min(count, want);
  std::vector<size_t> idx(want);
  for (size_t i = 0; i < want; ++i) idx[i] = i * count / want;
  return idx;
}

struct BatchSampler {
  size_t count, batch;
  Rng rng;
  std::vector<size_t> perm;
  size_t pos;

  BatchSampler(size_t count_, size_t batch_, uint64_t seed)
      : count(count_), batch(std::min(batch_, count_)), rng(seed), perm(count_), pos(count_) {
    for (size_t i = 0; i < count; ++i) perm[i] = i;
  }

  std::vector<size_t> next() {
    if (pos + batch > count) {  // drop the ragged tail, reshuffle
      rng.shuffle(perm);
      pos = 0;
    }
    std::vector<size_t> out(perm.begin() + std::ptrdiff_t(pos),
                            perm.begin() + std::ptrdiff_t(pos + batch));
    pos += batch;
    return out;
  }
};

template <typename Forward>
EvalResult evaluate_with(const DatasetHandle& data, size_t batch_size, Forward&& fwd) {
  if (data.count == 0) throw error(ERR_CONFIG, "cannot evaluate on an empty dataset");
  batch_size = std::max<size_t>(1, std::min(batch_size, data.count));
  EvalResult r;
  double loss_sum = 0.0;
  for (size_t start = 0; start < data.count; start += batch_size) {
    const size_t n = std::min(batch_size, data.count - start);
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = start + i;
    const Tensor logits = fwd(gather_images(data, idx));
    const auto labels = gather_labels(data, idx);
    r.correct += argmax_matches(logits, labels);
    loss_sum += cross_entropy_value(logits, labels) * double(n);
  }
  r.count = data.count;
  r.accuracy = double(r.correct) / double(r.count);
  r.mean_loss = loss_sum / double(r.count);
  return r;
}

}  // namespace

void TrainConfig::validate() const {
  if (optimizer != "adamw" && optimizer != "sgd_momentum")
    throw error(ERR_CONFIG, "optimizer must be adamw or sgd_momentum, got '" + optimizer + "'");
  if (lr_schedule != "cosine_decay")
    throw error(ERR_CONFIG, "lr_schedule: only cosine_decay is supported");
  if (!(base_lr > 0)) throw error(ERR_CONFIG, "base_lr must be positive");
  if (weight_decay < 0) throw error(ERR_CONFIG, "weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw error(ERR_CONFIG, "beta1/beta2 must lie in [0,1)");
  if (!(momentum >= 0 && momentum < 1)) throw error(ERR_CONFIG, "momentum must lie in [0,1)");
  if (batch_size == 0) throw error(ERR_CONFIG, "batch_size must be positive");
  if (total_steps == 0) throw error(ERR_CONFIG, "total_steps must be positive");
  if (lr_warmup_steps > total_steps)
    throw error(ERR_CONFIG, "lr_warmup_steps cannot exceed total_steps");
  lambda_formula(join.kind, 0.5);  // rejects unknown schedule kinds
  if (diversity.alpha < 0) throw error(ERR_CONFIG, "diversity.alpha must be non-negative");
  if (model.branches >= 2 &&
      total_steps < join.join_start_step + join.warmup_steps + join.adjust_steps)
    throw error(ERR_CONFIG,
                "total_steps must cover join.join_start_step + join.warmup_steps + "
                "join.adjust_steps when more than one branch is trained");
  if (stop_at_train_acc < 0 || stop_at_train_acc > 1)
    throw error(ERR_CONFIG, "stop_at_train_acc must lie in [0,1]");
  if (stop_at_train_acc > 0 && train_acc_every == 0)
    throw error(ERR_CONFIG, "train_acc_every must be positive when stop_at_train_acc is set");
  model.validate();
}

TrainConfig train_config_from_json(const json& j) {
  check_keys(j,
             {"optimizer", "base_lr", "weight_decay", "beta1", "beta2", "adam_eps", "momentum",
              "batch_size", "total_steps", "lr_warmup_steps", "lr_schedule", "join", "diversity",
              "seed", "dataset", "checkpoint_every", "eval_every", "model", "stop_at_train_acc",
              "train_acc_every", "resume_from"},
             "config");
  TrainConfig c;
  c.optimizer = get_str(j, "optimizer", c.optimizer);
  c.base_lr = get_num(j, "base_lr", c.base_lr);
  c.weight_decay = get_num(j, "weight_decay", c.weight_decay);
  c.beta1 = get_num(j, "beta1", c.beta1);
  c.beta2 = get_num(j, "beta2", c.beta2);
  c.adam_eps = get_num(j, "adam_eps", c.adam_eps);
  c.momentum = get_num(j, "momentum", c.momentum);
  c.batch_size = get_u64(j, "batch_size", c.batch_size);
  c.total_steps = get_u64(j, "total_steps", 0);
  c.lr_warmup_steps = get_u64(j, "lr_warmup_steps", std::max<uint64_t>(1, c.total_steps / 20));
  c.lr_schedule = get_str(j, "lr_schedule", c.lr_schedule);
  if (j.contains("join")) {
    const auto& js = j.at("join");
    check_keys(js, {"kind", "join_start_step", "warmup_steps", "adjust_steps"}, "join");
    c.join.kind = get_str(js, "kind", c.join.kind);
    c.join.join_start_step = get_u64(js, "join_start_step", c.join.join_start_step);
    c.join.warmup_steps = get_u64(js, "warmup_steps", c.join.warmup_steps);
    c.join.adjust_steps = get_u64(js, "adjust_steps", c.join.adjust_steps);
  } else {
    c.join.join_start_step = (c.total_steps * 3) / 10;
    c.join.warmup_steps = 1000;
    c.join.adjust_steps = 2000;
  }
  if (j.contains("diversity")) {
    const auto& dv = j.at("diversity");
    check_keys(dv, {"alpha", "enabled"}, "diversity");
    c.diversity.alpha = get_num(dv, "alpha", c.diversity.alpha);
    c.diversity.enabled = get_bool(dv, "enabled", c.diversity.enabled);
  }
  c.seed = get_u64(j, "seed", c.seed);
  if (!j.contains("dataset")) throw error(ERR_CONFIG, "config needs a 'dataset' object");
  c.dataset = j.at("dataset");
  c.checkpoint_every = get_u64(j, "checkpoint_every", c.checkpoint_every);
  c.eval_every = get_u64(j, "eval_every", c.eval_every);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  c.stop_at_train_acc = get_num(j, "stop_at_train_acc", c.stop_at_train_acc);
  c.train_acc_every = get_u64(j, "train_acc_every", c.train_acc_every);
  c.resume_from = get_str(j, "resume_from", c.resume_from);
  c.validate();
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  json j;
  j["optimizer"] = c.optimizer;
  j["base_lr"] = c.base_lr;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["momentum"] = c.momentum;
  j["batch_size"] = c.batch_size;
  j["total_steps"] = c.total_steps;
  j["lr_warmup_steps"] = c.lr_warmup_steps;
  j["lr_schedule"] = c.lr_schedule;
  j["join"] = {{"kind", c.join.kind},
               {"join_start_step", c.join.join_start_step},
               {"warmup_steps", c.join.warmup_steps},
               {"adjust_steps", c.join.adjust_steps}};
  j["diversity"] = {{"alpha", c.diversity.alpha}, {"enabled", c.diversity.enabled}};
  j["seed"] = c.seed;
  j["dataset"] = c.dataset;
  j["checkpoint_every"] = c.checkpoint_every;
  j["eval_every"] = c.eval_every;
  j["model"] = model_config_to_json(c.model);
  j["stop_at_train_acc"] = c.stop_at_train_acc;
  j["train_acc_every"] = c.train_acc_every;
  j["resume_from"] = c.resume_from;
  return j;
}

OptimizerState init_optimizer_state(const std::vector<Var>& params) {
  OptimizerState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& p : params) {
    st.m.push_back(Tensor::zeros(p->val.shape));
    st.v.push_back(Tensor::zeros(p->val.shape));
  }
  return st;
}

double cross_entropy_value(const Tensor& logits, const std::vector<size_t>& labels) {
  const size_t k = logits.last_dim();
  const size_t rows = logits.numel() / k;
  if (rows != labels.size()) throw error(ERR_CONFIG, "logit rows do not match label count");
  double sum = 0.0;
  for (size_t r = 0; r < rows; ++r) {
    const double* row = logits.data.data() + r * k;
    if (labels[r] >= k) throw error(ERR_CONFIG, "label out of range");
    double mx = row[0];
    for (size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double lse = 0.0;
    for (size_t j = 0; j < k; ++j) lse += std::exp(row[j] - mx);
    sum += std::log(lse) + mx - row[labels[r]];
  }
  return sum / double(rows);
}

size_t argmax_matches(const Tensor& logits, const std::vector<size_t>& labels) {
  const size_t k = logits.last_dim();
  const size_t rows = logits.numel() / k;
  if (rows != labels.size()) throw error(ERR_CONFIG, "logit rows do not match label count");
  size_t hits = 0;
  for (size_t r = 0; r < rows; ++r) {
    const double* row = logits.data.data() + r * k;
    size_t best = 0;
    for (size_t j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    hits += (best == labels[r]);
  }
  return hits;
}

void adamw_step(const std::vector<Var>& params, OptimizerState& st, double lr, double wd,
                double beta1, double beta2, double eps) {
  if (st.m.size() != params.size())
    throw error(ERR_CONFIG, "optimizer state does not match the parameter list");
  st.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(beta2, double(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->val;
    const Tensor& g = params[i]->grad;
    const bool has_grad = !g.data.empty();
    for (size_t k = 0; k < p.data.size(); ++k) {
      const double gk = has_grad ? g.data[k] : 0.0;
      double& m = st.m[i].data[k];
      double& v = st.v[i].data[k];
      m = beta1 * m + (1.0 - beta1) * gk;
      v = beta2 * v + (1.0 - beta2) * gk * gk;
      const double update = (m / bc1) / (std::sqrt(v / bc2) + eps);
      p.data[k] -= lr * (update + wd * p.data[k]);
    }
  }
}

void sgd_momentum_step(const std::vector<Var>& params, OptimizerState& st, double lr,
                       double momentum) {
  if (st.m.size() != params.size())
    throw error(ERR_CONFIG, "optimizer state does not match the parameter list");
  st.step += 1;
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->val;
    const Tensor& g = params[i]->grad;
    const bool has_grad = !g.data.empty();
    for (size_t k = 0; k < p.data.size(); ++k) {
      const double gk = has_grad ? g.data[k] : 0.0;
      double& v = st.m[i].data[k];
      v = momentum * v + gk;
      p.data[k] -= lr * v;
    }
  }
}

double lr_at(uint64_t step, const TrainConfig& cfg) {
  if (step >= cfg.total_steps) return 0.0;
  if (step < cfg.lr_warmup_steps)
    return cfg.base_lr * double(step) / double(cfg.lr_warmup_steps);
  const double span = double(cfg.total_steps - cfg.lr_warmup_steps);
  const double t = double(step - cfg.lr_warmup_steps) / span;
  return cfg.base_lr * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

EvalResult evaluate_model(const MultiBranchViT& m, double lambda, const DatasetHandle& data,
                          size_t batch_size) {
  return evaluate_with(data, batch_size, [&](const Tensor& images) {
    return model_forward(nullptr, images, m, lambda)->val;
  });
}

EvalResult evaluate_deployed(const DeployedViT& m, const DatasetHandle& data, size_t batch_size) {
  return evaluate_with(data, batch_size,
                       [&](const Tensor& images) { return deployed_forward(images, m); });
}

TrainResult train_loop(const TrainConfig& cfg, const std::string& checkpoint_dir) {
  cfg.validate();
  auto [train_data, eval_data] = make_train_eval_datasets(cfg.dataset, cfg.seed);
  if (train_data.classes > cfg.model.num_classes)
    throw error(ERR_CONFIG, "dataset has more classes than the model head");
  if (train_data.image_size != cfg.model.image_size || train_data.channels != cfg.model.channels)
    throw error(ERR_CONFIG, "dataset image geometry does not match the model config");

  TrainResult res;
  uint64_t start_step = 0;
  if (!cfg.resume_from.empty()) {
    PhaseMeta phase;
    res.model = load_multibranch(cfg.resume_from, &phase);
    if (!res.model.cfg.same_arch(cfg.model))
      throw error(ERR_MODEL_MISMATCH, "resume checkpoint architecture does not match the config");
    start_step = phase.step;
    if (start_step >= cfg.total_steps)
      throw error(ERR_CONFIG, "resume checkpoint is already at or past total_steps");
  } else {
    res.model = make_model(cfg.model, cfg.seed);
  }

  const auto params = trainable_params(res.model);
  OptimizerState opt = init_optimizer_state(params);
  opt.step = start_step;

  BatchSampler sampler(train_data.count, cfg.batch_size, splitmix64(cfg.seed ^ 0x9e3779b97f4a7c15ull));
  for (uint64_t s = 0; s < start_step; ++s) sampler.next();  // deterministic resume order

  const auto acc_subset = strided_subset(train_data.count, 512);
  const bool want_div_metric = res.model.cfg.branches >= 2;

  auto save_to = [&](const std::string& name, uint64_t step_count) {
    if (checkpoint_dir.empty()) return std::string();
    const std::string path = checkpoint_dir + "/" + name;
    save_checkpoint(path, res.model, PhaseMeta{step_count, lambda_at(step_count, cfg.join)});
    return path;
  };

  for (uint64_t s = start_step; s < cfg.total_steps; ++s) {
    const double lambda = lambda_at(s, cfg.join);
    const auto idx = sampler.next();
    const Tensor images = gather_images(train_data, idx);
    const auto labels_sz = gather_labels(train_data, idx);
    std::vector<int> labels(labels_sz.begin(), labels_sz.end());

    MetricsRow row;
    row.step = s;
    row.lambda = lambda;
    row.lr = lr_at(s, cfg);
    try {
      Tape tape;
      ActLog act;
      const Var logits = model_forward(&tape, images, res.model, lambda, &act);
      const Var ce = cross_entropy(&tape, logits, labels);
      const Var aux = total_aux_loss(&tape, act, cfg.diversity);
      const Var loss = add(&tape, ce, aux);
      if (!loss->val.all_finite())
        throw error(ERR_DIVERGED, "training loss became non-finite");
      row.loss = loss->val.data[0];
      if (want_div_metric) row.div_loss = mean_diversity(&tape, act)->val.data[0];

      zero_grad(params);
      tape.backward(loss);
    } catch (const error& e) {
      if (e.code == ERR_DIVERGED)
        throw error(ERR_DIVERGED,
                    std::string(e.what()) + " at step " + std::to_string(s) + "; aborting");
      throw;
    }

    if (cfg.optimizer == "adamw")
      adamw_step(params, opt, row.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps);
    else
      sgd_momentum_step(params, opt, row.lr, cfg.momentum);

    const uint64_t done = s + 1;
    if (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
      const auto ev =
          evaluate_model(res.model, lambda_at(done, cfg.join), eval_data, cfg.batch_size);
      row.eval_acc = ev.accuracy;
      row.has_eval = true;
    }
    res.metrics.push_back(row);

    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps)
      save_to("ckpt_step_" + std::to_string(done) + ".rvjf", done);

    res.steps_run = done;
    if (cfg.stop_at_train_acc > 0 && done % cfg.train_acc_every == 0) {
      const Tensor sub = gather_images(train_data, acc_subset);
      const auto sub_labels = gather_labels(train_data, acc_subset);
      const Tensor sub_logits =
          model_forward(nullptr, sub, res.model, lambda_at(done, cfg.join))->val;
      const double acc =
          double(argmax_matches(sub_logits, sub_labels)) / double(sub_labels.size());
      if (acc >= cfg.stop_at_train_acc) {
        res.early_stopped = true;
        break;
      }
    }
  }

  res.final_phase = PhaseMeta{res.steps_run, lambda_at(res.steps_run, cfg.join)};
  res.final_eval = evaluate_model(res.model, res.final_phase.lambda, eval_data, cfg.batch_size);
  if (!res.metrics.empty()) {
    res.metrics.back().eval_acc = res.final_eval.accuracy;
    res.metrics.back().has_eval = true;
  }
  save_to("final.rvjf", res.final_phase.step);
  return res;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw error(ERR_CONFIG, "cannot open '" + path + "' for writing");
  f << "step,lambda,lr,loss,div_loss,distill_loss,eval_acc\n";
  for (const auto& r : rows) {
    f << r.step << ',' << fmt_g(r.lambda) << ',' << fmt_g(r.lr) << ',' << fmt_g(r.loss) << ','
      << fmt_g(r.div_loss) << ',' << fmt_g(r.distill_loss) << ','
      << (r.has_eval ? fmt_g(r.eval_acc) : "") << '\n';
  }
  if (!f) throw error(ERR_CONFIG, "short write to '" + path + "'");
}

}  // namespace bf
