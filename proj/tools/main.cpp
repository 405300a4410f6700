// Command-line front end; all real work goes through the C API.
#include <CLI11.hpp>
#include <branchfold.h>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <string>

namespace {

int write_or_print(const char* text, const std::string& out_path) {
  if (out_path.empty()) {
    std::printf("%s\n", text);
    return 0;
  }
  std::ofstream f(out_path, std::ios::trunc);
  if (!f) {
    std::fprintf(stderr, "error: cannot open '%s' for writing\n", out_path.c_str());
    return 2;
  }
  f << text << '\n';
  return f ? 0 : 2;
}

void print_flops_table(const char* report_json) {
  try {
    const auto rep = nlohmann::json::parse(report_json);
    std::printf("\ncomponent,flops\n");
    for (const auto& [key, val] : rep.at("components").items())
      std::printf("%s,%llu\n", key.c_str(), static_cast<unsigned long long>(val.get<uint64_t>()));
    for (const auto& [key, val] : rep.at("totals").items())
      std::printf("total_%s,%llu\n", key.c_str(), static_cast<unsigned long long>(val.get<uint64_t>()));
  } catch (const std::exception&) {
    // stdout already carries the JSON; the table is best-effort
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-branch transformer training with exact single-path folding"};
  app.require_subcommand(1);

  std::string config, out;
  uint64_t seed = 0;
  app.add_option("--config", config, "Config JSON, inline or a path");
  app.add_option("--seed", seed, "RNG seed");
  app.add_option("--out", out, "Output path (directory or file, command-specific)");

  auto* c_train = app.add_subcommand("train", "Train per --config, writing into --out");

  std::string collapse_in;
  bool absorb = false, force = false;
  auto* c_collapse = app.add_subcommand("collapse", "Fold a joined checkpoint into --out");
  c_collapse->add_option("input", collapse_in, "Multi-branch checkpoint")->required();
  c_collapse->add_flag("--absorb", absorb, "Also fold normalization affines into weights");
  c_collapse->add_flag("--force", force, "Collapse even when lambda < 1");

  std::string v_model, v_deployed;
  uint64_t probes = 8;
  auto* c_verify = app.add_subcommand("verify", "Check a deployed checkpoint against its source");
  c_verify->add_option("--model", v_model, "Multi-branch checkpoint")->required();
  c_verify->add_option("--deployed", v_deployed, "Deployed checkpoint")->required();
  c_verify->add_option("--probes", probes, "Random probe inputs");

  std::string e_model, e_data;
  auto* c_eval = app.add_subcommand("eval", "Accuracy of a checkpoint on a dataset");
  c_eval->add_option("--model", e_model, "Checkpoint (either kind)")->required();
  c_eval->add_option("--data", e_data, "Dataset JSON, inline or a path")->required();

  uint64_t tokens = 0;
  auto* c_flops = app.add_subcommand("flops", "Closed-form FLOP and parameter accounting");
  c_flops->add_option("--tokens", tokens, "Override the token count implied by the patch grid");

  std::string b_model;
  uint64_t iters = 30, warmup = 5, batch = 8;
  auto* c_bench = app.add_subcommand("bench", "Time deployed vs equal-width classic baseline");
  c_bench->add_option("--model", b_model, "Deployed checkpoint")->required();
  c_bench->add_option("--iters", iters, "Timed iterations");
  c_bench->add_option("--warmup", warmup, "Untimed warmup iterations");
  c_bench->add_option("--batch", batch, "Images per forward");

  std::string a_model, a_kind = "weights", a_data;
  uint64_t a_probes = 4;
  auto* c_analyze = app.add_subcommand("analyze", "Branch similarity matrices");
  c_analyze->add_option("--model", a_model, "Multi-branch checkpoint")->required();
  c_analyze->add_option("--kind", a_kind, "weights | features");
  c_analyze->add_option("--data", a_data, "Dataset JSON (features kind)");
  c_analyze->add_option("--probes", a_probes, "Probe batches (features kind)");

  for (auto* sub : {c_train, c_collapse, c_verify, c_eval, c_flops, c_bench, c_analyze})
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  char* result = nullptr;
  char* err = nullptr;
  int rc = 0;
  bool printed = false;

  if (c_train->parsed()) {
    if (config.empty() || out.empty()) {
      std::fprintf(stderr, "error: train needs --config and --out DIR\n");
      return 2;
    }
    rc = bf_train(config.c_str(), out.c_str(), &result, &err);
    out.clear();  // --out named the run directory; the summary prints to stdout
  } else if (c_collapse->parsed()) {
    if (out.empty()) {
      std::fprintf(stderr, "error: collapse needs --out CHECKPOINT\n");
      return 2;
    }
    rc = bf_collapse(collapse_in.c_str(), out.c_str(), absorb, force, &result, &err);
    out.clear();  // result JSON goes to stdout; --out already names the checkpoint
  } else if (c_verify->parsed()) {
    rc = bf_verify(v_model.c_str(), v_deployed.c_str(), probes, seed, &result, &err);
  } else if (c_eval->parsed()) {
    rc = bf_eval(e_model.c_str(), e_data.c_str(), &result, &err);
  } else if (c_flops->parsed()) {
    if (config.empty()) {
      std::fprintf(stderr, "error: flops needs --config\n");
      return 2;
    }
    rc = bf_flops(config.c_str(), tokens, &result, &err);
    if (rc == 0 && result && !out.empty()) {
      const int wrc = write_or_print(result, out);
      if (wrc != 0) rc = wrc;
      print_flops_table(result);
      printed = true;
    } else if (rc == 0 && result) {
      std::printf("%s\n", result);
      print_flops_table(result);
      printed = true;
    }
  } else if (c_bench->parsed()) {
    rc = bf_bench(b_model.c_str(), iters, warmup, batch, seed, &result, &err);
  } else if (c_analyze->parsed()) {
    rc = bf_analyze(a_model.c_str(), a_kind.c_str(), a_data.empty() ? nullptr : a_data.c_str(),
                    out.empty() ? nullptr : out.c_str(), a_probes, seed, &result, &err);
    out.clear();  // --out named the CSV directory; the summary prints to stdout
  }

  if (err) {
    std::fprintf(stderr, "error: %s\n", err);
    bf_string_free(err);
  }
  if (result && !printed) {
    const int wrc = write_or_print(result, out);
    if (rc == 0 && wrc != 0) rc = wrc;
  }
  bf_string_free(result);
  return rc;
}
