#include "branchfold.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>

#include "analysis.hpp"
#include "checkpoint.hpp"
#include "reparam.hpp"
#include "train.hpp"

using namespace bf;

struct bf_model {
  ModelKind kind;
  std::optional<MultiBranchViT> mb;
  std::optional<DeployedViT> dp;
  PhaseMeta phase;
  const ModelConfig& cfg() const { return kind == ModelKind::multibranch ? mb->cfg : dp->cfg; }
};

namespace {

char* dup_cstr(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (p) std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void set_msg(char** errmsg, const std::string& s) {
  if (errmsg) *errmsg = dup_cstr(s);
}

const char* ckpt_kind_name(ckpt_error::Kind k) {
  switch (k) {
    case ckpt_error::bad_magic: return "bad_magic";
    case ckpt_error::version_mismatch: return "version_mismatch";
    case ckpt_error::truncated: return "truncated";
    case ckpt_error::checksum: return "checksum_mismatch";
  }
  return "checkpoint_error";
}

template <typename F>
int guarded(char** errmsg, F&& body) {
  try {
    return body();
  } catch (const ckpt_error& e) {
    set_msg(errmsg, std::string(ckpt_kind_name(e.kind)) + ": " + e.what());
    return e.code;
  } catch (const error& e) {
    set_msg(errmsg, e.what());
    return e.code;
  } catch (const std::exception& e) {
    set_msg(errmsg, e.what());
    return ERR_CONFIG;
  }
}

json load_json_arg(const char* arg, const char* what) {
  if (!arg || !*arg) throw error(ERR_CONFIG, std::string(what) + " is required");
  std::string s(arg);
  const auto first = s.find_first_not_of(" \t\r\n");
  std::string text;
  if (first != std::string::npos && s[first] == '{') {
    text = s;
  } else {
    std::ifstream f(s);
    if (!f) throw error(ERR_CONFIG, std::string(what) + ": cannot open '" + s + "'");
    text.assign((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  }
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw error(ERR_CONFIG, std::string(what) + ": invalid JSON: " + e.what());
  }
}

DatasetHandle eval_dataset_from(const json& spec, uint64_t seed) {
  return make_train_eval_datasets(spec, seed).second;
}

json eval_result_json(const EvalResult& r) {
  return json{{"accuracy", r.accuracy}, {"correct", r.correct}, {"count", r.count}};
}

bf_model* load_handle(const char* path) {
  if (!path || !*path) throw error(ERR_CONFIG, "checkpoint path is required");
  auto* h = new bf_model{};
  try {
    h->kind = peek_kind(path);
    if (h->kind == ModelKind::multibranch)
      h->mb = load_multibranch(path, &h->phase);
    else
      h->dp = load_deployed(path, &h->phase);
  } catch (...) {
    delete h;
    throw;
  }
  return h;
}

}  // namespace

extern "C" {

const char* bf_version(void) { return "0.1.0"; }

void bf_string_free(char* s) { std::free(s); }
void bf_buffer_free(double* p) { std::free(p); }

int bf_train(const char* config_json_or_path, const char* out_dir, char** summary_json,
             char** errmsg) {
  return guarded(errmsg, [&] {
    const TrainConfig cfg = train_config_from_json(load_json_arg(config_json_or_path, "config"));
    const std::string dir = out_dir ? out_dir : "";
    if (!dir.empty()) std::filesystem::create_directories(dir);
    const TrainResult res = train_loop(cfg, dir);
    json summary;
    summary["steps_run"] = res.steps_run;
    summary["early_stopped"] = res.early_stopped;
    summary["final_lambda"] = res.final_phase.lambda;
    summary["final_loss"] = res.metrics.empty() ? 0.0 : res.metrics.back().loss;
    summary["final_eval_accuracy"] = res.final_eval.accuracy;
    summary["seed"] = cfg.seed;
    if (!dir.empty()) {
      write_metrics_csv(dir + "/metrics.csv", res.metrics);
      summary["checkpoint"] = dir + "/final.rvjf";
      summary["metrics_csv"] = dir + "/metrics.csv";
    }
    if (summary_json) *summary_json = dup_cstr(summary.dump(2));
    return 0;
  });
}

int bf_collapse(const char* checkpoint_in, const char* checkpoint_out, int absorb, int force,
                char** summary_json, char** errmsg) {
  return guarded(errmsg, [&] {
    if (!checkpoint_out || !*checkpoint_out)
      throw error(ERR_CONFIG, "collapse needs an output path");
    PhaseMeta phase;
    const MultiBranchViT mb = load_multibranch(checkpoint_in, &phase);
    if (phase.lambda != 1.0 && !force)
      throw error(ERR_NOT_JOINED,
                  "checkpoint phase has lambda " + std::to_string(phase.lambda) +
                      " (< 1); branches are not fully joined. Pass force to collapse anyway");
    DeployedViT dp = collapse_model(mb);
    if (absorb) absorb_all(dp);
    save_checkpoint(checkpoint_out, dp, phase);
    json summary{{"out", checkpoint_out},
                 {"branches_folded", mb.cfg.branches},
                 {"blocks", dp.cfg.deploy_blocks},
                 {"lambda", phase.lambda},
                 {"step", phase.step},
                 {"absorbed", absorb != 0},
                 {"forced", force != 0}};
    if (summary_json) *summary_json = dup_cstr(summary.dump(2));
    return 0;
  });
}

int bf_verify(const char* multibranch_ckpt, const char* deployed_ckpt, uint64_t probes,
              uint64_t seed, char** report_json, char** errmsg) {
  return guarded(errmsg, [&] {
    const MultiBranchViT mb = load_multibranch(multibranch_ckpt);
    const DeployedViT dp = load_deployed(deployed_ckpt);
    const VerifyReport rep = verify_equivalence(mb, dp, probes, seed);
    const json j{{"probes", rep.probes},
                 {"seed", rep.seed},
                 {"max_abs_err", rep.max_abs_err},
                 {"max_rel_err", rep.max_rel_err},
                 {"pass", rep.pass}};
    if (report_json) *report_json = dup_cstr(j.dump(2));
    return rep.pass ? 0 : ERR_VERIFY;
  });
}

int bf_eval(const char* checkpoint, const char* dataset_json_or_path, char** result_json,
            char** errmsg) {
  return guarded(errmsg, [&] {
    bf_model* h = load_handle(checkpoint);
    EvalResult r;
    try {
      const DatasetHandle data =
          eval_dataset_from(load_json_arg(dataset_json_or_path, "dataset"), 0);
      if (data.image_size != h->cfg().image_size || data.channels != h->cfg().channels)
        throw error(ERR_CONFIG, "dataset image geometry does not match the checkpoint");
      if (data.classes > h->cfg().num_classes)
        throw error(ERR_CONFIG, "dataset has more classes than the model head");
      r = h->kind == ModelKind::multibranch
              ? evaluate_model(*h->mb, h->phase.lambda, data, 128)
              : evaluate_deployed(*h->dp, data, 128);
    } catch (...) {
      bf_model_free(h);
      throw;
    }
    bf_model_free(h);
    if (result_json) *result_json = dup_cstr(eval_result_json(r).dump(2));
    return 0;
  });
}

int bf_flops(const char* config_json_or_path, uint64_t token_override, char** report_json,
             char** errmsg) {
  return guarded(errmsg, [&] {
    json j = load_json_arg(config_json_or_path, "config");
    if (j.contains("model")) j = j.at("model");
    const json rep = flops_report(model_config_from_json(j), token_override);
    if (report_json) *report_json = dup_cstr(rep.dump(2));
    return 0;
  });
}

int bf_bench(const char* deployed_ckpt, uint64_t iters, uint64_t warmup, uint64_t batch,
             uint64_t seed, char** report_json, char** errmsg) {
  return guarded(errmsg, [&] {
    if (iters == 0) throw error(ERR_CONFIG, "bench needs --iters > 0");
    const DeployedViT dp = load_deployed(deployed_ckpt);
    ModelConfig baseline = dp.cfg;
    baseline.deploy_blocks = dp.cfg.deploy_blocks * std::max<size_t>(1, dp.cfg.branches);
    baseline.branches = 1;
    const json rep = bench_models(dp, baseline, iters, warmup, batch, seed);
    if (report_json) *report_json = dup_cstr(rep.dump(2));
    return 0;
  });
}

int bf_analyze(const char* checkpoint, const char* kind, const char* dataset_json_or_path,
               const char* out_dir, uint64_t probes, uint64_t seed, char** summary_json,
               char** errmsg) {
  return guarded(errmsg, [&] {
    const std::string k = kind ? kind : "";
    if (k != "weights" && k != "features")
      throw error(ERR_CONFIG, "analyze kind must be weights or features");
    PhaseMeta phase;
    MultiBranchViT mb = load_multibranch(checkpoint, &phase);

    std::vector<SimilarityMatrix> mats;
    if (k == "weights") {
      mats = weights_similarity(mb);
    } else {
      if (!dataset_json_or_path || !*dataset_json_or_path)
        throw error(ERR_CONFIG, "analyze --kind features needs a dataset");
      const DatasetHandle data =
          eval_dataset_from(load_json_arg(dataset_json_or_path, "dataset"), seed);
      if (probes == 0) throw error(ERR_CONFIG, "analyze needs probes > 0");
      mats = features_similarity(mb, phase.lambda, data, probes,
                                 std::min<size_t>(32, data.count), seed);
    }

    json summary = similarity_json(mats);
    summary["kind"] = k;
    summary["lambda"] = phase.lambda;
    if (k == "features") summary["seed"] = seed;
    if (out_dir && *out_dir) {
      std::filesystem::create_directories(out_dir);
      json files = json::array();
      for (const auto& sm : mats) {
        const std::string path = std::string(out_dir) + "/similarity_" + k + "_block" +
                                 std::to_string(sm.block) + "_" + sm.module + ".csv";
        write_similarity_csv(path, sm);
        files.push_back(path);
      }
      summary["csv_files"] = std::move(files);
    }
    if (summary_json) *summary_json = dup_cstr(summary.dump(2));
    return 0;
  });
}

int bf_model_load(const char* path, bf_model** out, char** errmsg) {
  return guarded(errmsg, [&] {
    if (!out) throw error(ERR_CONFIG, "bf_model_load needs an output handle");
    *out = load_handle(path);
    return 0;
  });
}

void bf_model_free(bf_model* m) { delete m; }

const char* bf_model_kind(const bf_model* m) {
  return m && m->kind == ModelKind::deployed ? "deployed" : "multibranch";
}

int bf_model_config_json(const bf_model* m, char** config_json, char** errmsg) {
  return guarded(errmsg, [&] {
    if (!m) throw error(ERR_CONFIG, "null model handle");
    if (config_json) *config_json = dup_cstr(model_config_to_json(m->cfg()).dump(2));
    return 0;
  });
}

int bf_model_phase(const bf_model* m, uint64_t* step, double* lambda) {
  if (!m) return ERR_CONFIG;
  if (step) *step = m->phase.step;
  if (lambda) *lambda = m->phase.lambda;
  return 0;
}

int bf_model_save(const bf_model* m, const char* path, char** errmsg) {
  return guarded(errmsg, [&] {
    if (!m || !path || !*path) throw error(ERR_CONFIG, "model handle and path are required");
    if (m->kind == ModelKind::multibranch)
      save_checkpoint(path, *m->mb, m->phase);
    else
      save_checkpoint(path, *m->dp, m->phase);
    return 0;
  });
}

int bf_model_logits(const bf_model* m, const double* images, const uint64_t* shape, uint64_t ndim,
                    double lambda, double** out_data, uint64_t* out_rows, uint64_t* out_cols,
                    char** errmsg) {
  return guarded(errmsg, [&] {
    if (!m || !images || !shape || ndim < 3 || ndim > 4)
      throw error(ERR_CONFIG, "bf_model_logits needs a handle and a 3- or 4-d image tensor");
    std::vector<size_t> sh(shape, shape + ndim);
    Tensor in = Tensor::zeros(sh);
    std::memcpy(in.data.data(), images, in.data.size() * sizeof(double));
    const Tensor logits = m->kind == ModelKind::multibranch
                              ? model_forward(nullptr, in, *m->mb, lambda)->val
                              : deployed_forward(in, *m->dp);
    const size_t cols = logits.last_dim();
    const size_t rows = logits.numel() / cols;
    auto* buf = static_cast<double*>(std::malloc(logits.numel() * sizeof(double)));
    if (!buf) throw error(ERR_CONFIG, "out of memory");
    std::memcpy(buf, logits.data.data(), logits.numel() * sizeof(double));
    if (out_data) *out_data = buf;
    else std::free(buf);
    if (out_rows) *out_rows = rows;
    if (out_cols) *out_cols = cols;
    return 0;
  });
}

}  // extern "C"
