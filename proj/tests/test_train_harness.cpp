#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "train.hpp"

using namespace bf;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  REQUIRE(f.good());
}

void put_u32be(std::string& out, uint32_t v) {
  out.push_back(char((v >> 24) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char(v & 0xff));
}

json tiny_train_json(uint64_t seed) {
  return json::parse(R"({
    "optimizer": "adamw",
    "base_lr": 0.002,
    "batch_size": 4,
    "total_steps": 6,
    "lr_warmup_steps": 2,
    "join": {"kind": "linear", "join_start_step": 1, "warmup_steps": 2, "adjust_steps": 3},
    "diversity": {"alpha": 0.05, "enabled": true},
    "seed": )" + std::to_string(seed) + R"(,
    "dataset": {"kind": "synthetic", "classes": 2, "samples_per_class": 8, "image_size": 4},
    "model": {"image_size": 4, "patch_size": 2, "dim": 8, "heads": 2, "ffn_hidden": 8,
              "deploy_blocks": 1, "branches": 2, "num_classes": 2}
  })");
}

}  // namespace

TEST_CASE("cross entropy hits the closed forms") {
  CHECK(cross_entropy_value(Tensor::zeros({1, 4}), {2}) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(cross_entropy_value(Tensor::zeros({3, 7}), {0, 3, 6}) ==
        doctest::Approx(std::log(7.0)).epsilon(1e-12));
  // a confident correct answer costs almost nothing
  CHECK(cross_entropy_value(Tensor::from({1, 2}, {10.0, -10.0}), {0}) ==
        doctest::Approx(2.0611536224385579e-9).epsilon(1e-6));
  // the mean over identical rows equals the single-row value
  const Tensor one = Tensor::from({1, 3}, {0.3, -1.2, 0.9});
  const Tensor two = Tensor::from({2, 3}, {0.3, -1.2, 0.9, 0.3, -1.2, 0.9});
  CHECK(cross_entropy_value(two, {1, 1}) == cross_entropy_value(one, {1}));
  CHECK_THROWS_AS(cross_entropy_value(one, {3}), error);
  CHECK_THROWS_AS(cross_entropy_value(one, {0, 1}), error);

  CHECK(argmax_matches(Tensor::from({2, 3}, {1, 5, 2, 9, 0, 1}), {1, 0}) == 2);
  CHECK(argmax_matches(Tensor::from({2, 3}, {1, 5, 2, 9, 0, 1}), {2, 0}) == 1);
}

TEST_CASE("adamw decouples weight decay and takes sign-like first steps") {
  auto p = leaf(Tensor::from({2}, {1.0, -2.0}), true);
  std::vector<Var> params{p};
  auto st = init_optimizer_state(params);

  // zero gradient: only the decay term moves the weights
  const double lr = 0.1, wd = 0.05;
  adamw_step(params, st, lr, wd, 0.9, 0.999, 1e-8);
  CHECK(p->val.data[0] == doctest::Approx(1.0 * (1 - lr * wd)).epsilon(1e-14));
  CHECK(p->val.data[1] == doctest::Approx(-2.0 * (1 - lr * wd)).epsilon(1e-14));
  adamw_step(params, st, lr, wd, 0.9, 0.999, 1e-8);
  CHECK(p->val.data[0] == doctest::Approx(1.0 * (1 - lr * wd) * (1 - lr * wd)).epsilon(1e-14));

  // with bias correction the first update is lr * sign(g) up to eps
  auto q = leaf(Tensor::from({2}, {0.0, 0.0}), true);
  q->grad = Tensor::from({2}, {0.5, -0.03});
  std::vector<Var> qs{q};
  auto st2 = init_optimizer_state(qs);
  adamw_step(qs, st2, lr, 0.0, 0.9, 0.999, 1e-8);
  CHECK(q->val.data[0] == doctest::Approx(-lr).epsilon(1e-6));
  CHECK(q->val.data[1] == doctest::Approx(lr).epsilon(1e-6));
  // constant gradient keeps the corrected update sign-like on step two
  adamw_step(qs, st2, lr, 0.0, 0.9, 0.999, 1e-8);
  CHECK(q->val.data[0] == doctest::Approx(-2 * lr).epsilon(1e-6));

  auto mismatched = init_optimizer_state({});
  CHECK_THROWS_AS(adamw_step(qs, mismatched, lr, 0.0, 0.9, 0.999, 1e-8), error);
}

TEST_CASE("sgd momentum accumulates velocity over constant gradients") {
  auto p = leaf(Tensor::from({1}, {1.0}), true);
  p->grad = Tensor::from({1}, {0.25});
  std::vector<Var> params{p};
  auto st = init_optimizer_state(params);
  const double lr = 0.1, m = 0.9;
  sgd_momentum_step(params, st, lr, m);
  CHECK(p->val.data[0] == doctest::Approx(1.0 - lr * 0.25).epsilon(1e-14));
  sgd_momentum_step(params, st, lr, m);
  CHECK(p->val.data[0] == doctest::Approx(1.0 - lr * 0.25 * (2.0 + m)).epsilon(1e-12));
}

TEST_CASE("learning rate warms up linearly and decays along a half cosine") {
  TrainConfig cfg;
  cfg.base_lr = 0.4;
  cfg.total_steps = 1000;
  cfg.lr_warmup_steps = 100;
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(50, cfg) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(lr_at(100, cfg) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(lr_at(550, cfg) == doctest::Approx(0.2).epsilon(1e-12));  // decay midpoint
  CHECK(lr_at(1000, cfg) == 0.0);
  CHECK(lr_at(5000, cfg) == 0.0);
  for (uint64_t s = 100; s < 1000; s += 37) CHECK(lr_at(s, cfg) >= lr_at(s + 37, cfg));
}

TEST_CASE("config json round-trips, fills defaults and rejects junk") {
  json j = tiny_train_json(7);
  TrainConfig c = train_config_from_json(j);
  CHECK(c.seed == 7);
  CHECK(c.join.kind == "linear");
  json back = train_config_to_json(c);
  TrainConfig c2 = train_config_from_json(back);
  CHECK(train_config_to_json(c2) == back);

  // defaults: lr warmup at one twentieth, ramp start at three tenths
  json d = json::parse(R"({"total_steps": 20000,
                           "dataset": {"kind": "synthetic", "classes": 2}})");
  TrainConfig cd = train_config_from_json(d);
  CHECK(cd.lr_warmup_steps == 1000);
  CHECK(cd.join.join_start_step == 6000);
  CHECK(cd.join.warmup_steps == 1000);
  CHECK(cd.join.adjust_steps == 2000);
  CHECK(cd.batch_size == 128);
  CHECK(cd.weight_decay == 0.05);

  json bad = j;
  bad["optimizer"] = "lion";
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("optimizer"), error);
  bad = j;
  bad["batch_size"] = 0;
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("batch_size"), error);
  bad = j;
  bad["turbo"] = true;
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("unknown key"), error);
  bad = j;
  bad["join"]["kind"] = "quadratic";
  CHECK_THROWS_AS(train_config_from_json(bad), error);
  bad = j;
  bad.erase("dataset");
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("dataset"), error);
  bad = j;
  bad["lr_warmup_steps"] = 99;  // > total_steps
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("lr_warmup_steps"), error);

  // joining budget must fit when more than one branch trains
  bad = j;
  bad["total_steps"] = 5;
  bad["lr_warmup_steps"] = 1;
  CHECK_THROWS_WITH_AS(train_config_from_json(bad), doctest::Contains("total_steps"), error);
  bad["model"]["branches"] = 1;  // single branch: no joining budget needed
  CHECK_NOTHROW(train_config_from_json(bad));
}

TEST_CASE("synthetic data is seed-deterministic with reusable templates") {
  const DatasetHandle a = synth_dataset(9, 3, 4, 6);
  const DatasetHandle b = synth_dataset(9, 3, 4, 6);
  CHECK(a.count == 12);
  CHECK(a.classes == 3);
  CHECK(a.images.shape == std::vector<size_t>{12, 1, 6, 6});
  CHECK(a.images.data == b.images.data);
  CHECK(a.labels == b.labels);
  for (size_t l : a.labels) CHECK(l < 3);

  const DatasetHandle c = synth_dataset(10, 3, 4, 6);
  CHECK(a.images.data != c.images.data);

  // zero noise leaves the pure class templates; fresh salt only moves the noise
  const DatasetHandle t1 = synth_dataset(9, 3, 4, 6, 0.0, 1);
  const DatasetHandle t2 = synth_dataset(9, 3, 4, 6, 0.0, 2);
  CHECK(t1.images.data == t2.images.data);
  const DatasetHandle n1 = synth_dataset(9, 3, 4, 6, 0.3, 1);
  const DatasetHandle n2 = synth_dataset(9, 3, 4, 6, 0.3, 2);
  CHECK(n1.images.data != n2.images.data);

  CHECK_THROWS_AS(synth_dataset(9, 1, 4, 6), error);
  CHECK_THROWS_AS(synth_dataset(9, 2, 0, 6), error);

  json spec = json::parse(
      R"({"kind": "synthetic", "classes": 2, "samples_per_class": 6, "image_size": 4,
          "noise_std": 0.0})");
  auto [train, eval] = make_train_eval_datasets(spec, 55);
  CHECK(train.count == 12);
  CHECK(eval.count == 2);  // eval split defaults to a quarter per class
  CHECK(train.images.data[0] == eval.images.data[0]);  // same template at zero noise
}

TEST_CASE("idx ingest decodes big-endian pairs and standardizes pixels") {
  bftest::TempDir dir("idx");
  std::string img;
  put_u32be(img, 0x00000803);
  put_u32be(img, 2);  // count
  put_u32be(img, 2);  // rows
  put_u32be(img, 2);  // cols
  const unsigned char pix[8] = {255, 0, 128, 64, 10, 20, 30, 40};
  for (unsigned char p : pix) img.push_back(char(p));
  std::string lab;
  put_u32be(lab, 0x00000801);
  put_u32be(lab, 2);
  lab.push_back(char(1));
  lab.push_back(char(0));
  spit(dir.file("img.idx"), img);
  spit(dir.file("lab.idx"), lab);

  const DatasetHandle ds = ingest_mnist_idx(dir.file("img.idx"), dir.file("lab.idx"));
  CHECK(ds.count == 2);
  CHECK(ds.image_size == 2);
  CHECK(ds.classes == 2);
  CHECK(ds.labels == std::vector<size_t>{1, 0});
  CHECK(ds.images.data[0] == doctest::Approx((1.0 - 0.1307) / 0.3081).epsilon(1e-6));
  CHECK(ds.images.data[0] == doctest::Approx(2.8215).epsilon(1e-3));
  CHECK(ds.images.data[1] == doctest::Approx((0.0 - 0.1307) / 0.3081).epsilon(1e-6));

  std::string bad_magic = img;
  bad_magic[3] = 0x04;
  spit(dir.file("badmagic.idx"), bad_magic);
  CHECK_THROWS_WITH_AS(ingest_mnist_idx(dir.file("badmagic.idx"), dir.file("lab.idx")),
                       doctest::Contains("magic"), error);

  std::string short_img = img.substr(0, img.size() - 3);
  spit(dir.file("short.idx"), short_img);
  CHECK_THROWS_AS(ingest_mnist_idx(dir.file("short.idx"), dir.file("lab.idx")), error);

  std::string lab3;
  put_u32be(lab3, 0x00000801);
  put_u32be(lab3, 3);
  lab3.append(3, char(0));
  spit(dir.file("lab3.idx"), lab3);
  CHECK_THROWS_AS(ingest_mnist_idx(dir.file("img.idx"), dir.file("lab3.idx")), error);

  CHECK_THROWS_AS(ingest_mnist_idx(dir.file("missing.idx"), dir.file("lab.idx")), error);
}

TEST_CASE("checkpoints round-trip bit for bit and classify corruption") {
  bftest::TempDir dir("ckpt");
  ModelConfig mc;
  mc.image_size = 4;
  mc.patch_size = 2;
  mc.dim = 8;
  mc.heads = 2;
  mc.ffn_hidden = 8;
  mc.deploy_blocks = 1;
  mc.branches = 2;
  mc.num_classes = 2;
  MultiBranchViT m = make_model(mc, 3);
  const std::string path = dir.file("m.rvjf");
  save_checkpoint(path, m, PhaseMeta{17, 0.25});

  CHECK(peek_kind(path) == ModelKind::multibranch);
  PhaseMeta phase;
  MultiBranchViT m2 = load_multibranch(path, &phase);
  CHECK(phase.step == 17);
  CHECK(phase.lambda == 0.25);
  const auto pa = named_params(m), pb = named_params(m2);
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second->val.data == pb[i].second->val.data);
  }

  // deployed round-trip, including absorbed (parameter-free) norm stages
  DeployedViT dp = collapse_model(m);
  absorb_all(dp);
  const std::string dpath = dir.file("d.rvjf");
  save_checkpoint(dpath, dp, PhaseMeta{17, 1.0});
  CHECK(peek_kind(dpath) == ModelKind::deployed);
  const DeployedViT dp2 = load_deployed(dpath);
  CHECK_FALSE(dp2.blocks[0].ln1.has_affine);
  Rng rng(4);
  const Tensor probe = rng.normal_tensor({2, 1, 4, 4});
  CHECK(deployed_forward(probe, dp).data == deployed_forward(probe, dp2).data);

  CHECK_THROWS_AS(load_deployed(path), error);  // wrong model kind
  try {
    load_deployed(path);
  } catch (const error& e) {
    CHECK(e.code == ERR_MODEL_MISMATCH);
  }

  const std::string good = slurp(path);

  auto expect_kind = [&](const std::string& bytes, ckpt_error::Kind want) {
    spit(dir.file("bad.rvjf"), bytes);
    try {
      load_multibranch(dir.file("bad.rvjf"));
      FAIL("expected a checkpoint error");
    } catch (const ckpt_error& e) {
      CHECK(e.kind == want);
    }
  };

  std::string tampered = good;
  tampered[0] = 'X';
  expect_kind(tampered, ckpt_error::bad_magic);

  tampered = good;
  tampered[4] = char(2);  // unsupported version
  expect_kind(tampered, ckpt_error::version_mismatch);

  expect_kind(good.substr(0, 3), ckpt_error::truncated);
  expect_kind(good.substr(0, 20), ckpt_error::truncated);
  expect_kind(good.substr(0, good.size() - 6), ckpt_error::truncated);

  uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= uint64_t(uint8_t(good[8 + i])) << (8 * i);
  tampered = good;
  tampered[16 + header_len + 24] ^= char(0x40);  // flip a payload bit
  expect_kind(tampered, ckpt_error::checksum);
}

TEST_CASE("evaluation walks every sample in chunks and rejects empty data") {
  ModelConfig mc;
  mc.image_size = 4;
  mc.patch_size = 2;
  mc.dim = 8;
  mc.heads = 2;
  mc.ffn_hidden = 8;
  mc.deploy_blocks = 1;
  mc.branches = 2;
  mc.num_classes = 3;
  MultiBranchViT m = make_model(mc, 12);
  const DatasetHandle ds = synth_dataset(13, 3, 3, 4);  // 9 samples

  const EvalResult whole = evaluate_model(m, 0.5, ds, 64);
  const EvalResult chunked = evaluate_model(m, 0.5, ds, 2);
  CHECK(whole.count == 9);
  CHECK(chunked.count == 9);
  CHECK(whole.correct == chunked.correct);
  CHECK(whole.accuracy == doctest::Approx(chunked.accuracy).epsilon(1e-15));
  CHECK(whole.mean_loss == doctest::Approx(chunked.mean_loss).epsilon(1e-12));

  // at full mixing the collapsed model scores the same samples correct
  const DeployedViT dp = collapse_model(m);
  const EvalResult mb1 = evaluate_model(m, 1.0, ds, 4);
  const EvalResult dep = evaluate_deployed(dp, ds, 4);
  CHECK(mb1.correct == dep.correct);
  CHECK(mb1.accuracy == dep.accuracy);

  DatasetHandle empty;
  CHECK_THROWS_WITH_AS(evaluate_model(m, 0.5, empty, 4), doctest::Contains("empty"), error);
}

TEST_CASE("training is bit-for-bit deterministic for a fixed config") {
  const TrainConfig cfg = train_config_from_json(tiny_train_json(21));
  const TrainResult a = train_loop(cfg);
  const TrainResult b = train_loop(cfg);
  REQUIRE(a.metrics.size() == b.metrics.size());
  REQUIRE(a.steps_run == 6);
  for (size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].loss == b.metrics[i].loss);
    CHECK(a.metrics[i].div_loss == b.metrics[i].div_loss);
    CHECK(a.metrics[i].lambda == lambda_at(a.metrics[i].step, cfg.join));
    CHECK(a.metrics[i].lr == lr_at(a.metrics[i].step, cfg));
    CHECK(a.metrics[i].distill_loss == 0.0);
  }
  const auto pa = named_params(a.model), pb = named_params(b.model);
  for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].second->val.data == pb[i].second->val.data);
  CHECK(a.final_eval.accuracy == b.final_eval.accuracy);
  CHECK(a.final_phase.step == 6);
  CHECK(a.final_phase.lambda == 1.0);

  // a different seed moves the numbers
  const TrainResult c = train_loop(train_config_from_json(tiny_train_json(22)));
  CHECK(c.metrics.front().loss != a.metrics.front().loss);
}

TEST_CASE("metrics csv carries the fixed header and blank unevaluated cells") {
  bftest::TempDir dir("csv");
  const TrainConfig cfg = train_config_from_json(tiny_train_json(31));
  const TrainResult r = train_loop(cfg);
  const std::string path = dir.file("metrics.csv");
  write_metrics_csv(path, r.metrics);

  std::ifstream f(path);
  std::string line;
  REQUIRE(std::getline(f, line));
  CHECK(line == "step,lambda,lr,loss,div_loss,distill_loss,eval_acc");
  std::vector<std::string> rows;
  while (std::getline(f, line)) rows.push_back(line);
  REQUIRE(rows.size() == r.metrics.size());
  for (size_t i = 0; i + 1 < rows.size(); ++i) CHECK(rows[i].back() == ',');  // no eval yet
  CHECK(rows.back().back() != ',');  // final row carries the eval accuracy
  CHECK(rows[0].substr(0, 2) == "0,");
}

TEST_CASE("training aborts with a divergence error when the loss leaves the reals") {
  json j = tiny_train_json(41);
  j["base_lr"] = 1e12;
  j["total_steps"] = 80;
  j["lr_warmup_steps"] = 0;
  j["join"] = {{"kind", "linear"},
               {"join_start_step", 0},
               {"warmup_steps", 0},
               {"adjust_steps", 0}};
  j["model"]["branches"] = 1;
  try {
    train_loop(train_config_from_json(j));
    FAIL("expected divergence");
  } catch (const error& e) {
    CHECK(e.code == ERR_DIVERGED);
    CHECK(std::string(e.what()).find("at step") != std::string::npos);
    CHECK(std::string(e.what()).find("aborting") != std::string::npos);
  }
}

TEST_CASE("resume picks up the step counter and replays the same batch order") {
  bftest::TempDir dir("resume");
  json j = tiny_train_json(51);
  j["total_steps"] = 8;
  j["join"]["adjust_steps"] = 5;
  j["checkpoint_every"] = 4;
  const TrainConfig full_cfg = train_config_from_json(j);
  const TrainResult full = train_loop(full_cfg, dir.path.string());
  REQUIRE(std::filesystem::exists(dir.file("ckpt_step_4.rvjf")));
  REQUIRE(std::filesystem::exists(dir.file("final.rvjf")));

  json rj = j;
  rj["resume_from"] = dir.file("ckpt_step_4.rvjf");
  const TrainResult resumed = train_loop(train_config_from_json(rj));
  REQUIRE(resumed.metrics.size() == 4);
  CHECK(resumed.metrics.front().step == 4);
  CHECK(resumed.steps_run == 8);
  // the first resumed forward sees the same weights and the same batch
  CHECK(resumed.metrics.front().loss == full.metrics[4].loss);

  json arch = rj;
  arch["model"]["dim"] = 16;
  CHECK_THROWS_AS(train_loop(train_config_from_json(arch)), error);
  try {
    train_loop(train_config_from_json(arch));
  } catch (const error& e) {
    CHECK(e.code == ERR_MODEL_MISMATCH);
  }

  json done = rj;
  done["resume_from"] = dir.file("final.rvjf");
  CHECK_THROWS_WITH_AS(train_loop(train_config_from_json(done)),
                       doctest::Contains("total_steps"), error);
}

TEST_CASE("an accuracy target stops training at the next cadence check") {
  json j = tiny_train_json(61);
  j["total_steps"] = 50;
  j["join"]["adjust_steps"] = 47;
  j["stop_at_train_acc"] = 0.01;  // any argmax hit clears this
  j["train_acc_every"] = 3;
  const TrainResult r = train_loop(train_config_from_json(j));
  CHECK(r.early_stopped);
  CHECK(r.steps_run == 3);
  CHECK(r.metrics.size() == 3);
  CHECK(r.final_phase.step == 3);
}

TEST_CASE("a single-branch model learns the noiseless synthetic task") {
  json j = json::parse(R"({
    "optimizer": "adamw",
    "base_lr": 0.003,
    "batch_size": 8,
    "total_steps": 150,
    "lr_warmup_steps": 10,
    "join": {"kind": "linear", "join_start_step": 0, "warmup_steps": 0, "adjust_steps": 0},
    "seed": 71,
    "dataset": {"kind": "synthetic", "classes": 2, "samples_per_class": 16, "image_size": 4,
                "noise_std": 0.1},
    "model": {"image_size": 4, "patch_size": 2, "dim": 8, "heads": 2, "ffn_hidden": 8,
              "deploy_blocks": 1, "branches": 1, "num_classes": 2}
  })");
  const TrainResult r = train_loop(train_config_from_json(j));
  double first = 0.0, last = 0.0;
  for (size_t i = 0; i < 10; ++i) {
    first += r.metrics[i].loss / 10.0;
    last += r.metrics[r.metrics.size() - 10 + i].loss / 10.0;
  }
  CHECK(last < 0.8 * first);
  CHECK(r.final_eval.accuracy >= 0.9);
}

TEST_CASE("the train loop rejects data that does not fit the model") {
  json j = tiny_train_json(81);
  j["dataset"]["image_size"] = 6;
  CHECK_THROWS_WITH_AS(train_loop(train_config_from_json(j)), doctest::Contains("geometry"),
                       error);
  j = tiny_train_json(81);
  j["dataset"]["classes"] = 5;
  CHECK_THROWS_WITH_AS(train_loop(train_config_from_json(j)), doctest::Contains("classes"),
                       error);
}
