#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "schedule.hpp"
#include "support.hpp"
#include "vit.hpp"

using namespace bf;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.image_size = 2;
  c.channels = 1;
  c.patch_size = 1;  // 4 tokens
  c.dim = 8;
  c.heads = 2;
  c.ffn_hidden = 16;
  c.deploy_blocks = 1;
  c.branches = 2;
  c.num_classes = 3;
  return c;
}

BranchAttentionParams random_attn(Rng& rng, size_t n, size_t h, size_t d, size_t dh) {
  BranchAttentionParams a;
  a.branches = n;
  a.heads = h;
  for (size_t b = 0; b < n; ++b)
    for (size_t i = 0; i < h; ++i) {
      a.Wq.push_back(leaf(rng.normal_tensor({d, dh}, 0.3), true));
      a.Wk.push_back(leaf(rng.normal_tensor({d, dh}, 0.3), true));
      a.Wv.push_back(leaf(rng.normal_tensor({d, dh}, 0.3), true));
      a.Wo.push_back(leaf(rng.normal_tensor({dh, d}, 0.3), true));
    }
  return a;
}

}  // namespace

TEST_CASE("config validation names the offending field") {
  ModelConfig c = tiny_cfg();
  c.patch_size = 3;  // 2 % 3 != 0
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("image_size"), error);
  c = tiny_cfg();
  c.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("dim"), error);
  c = tiny_cfg();
  c.branches = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("branches"), error);
  c = tiny_cfg();
  c.deploy_blocks = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("deploy_blocks"), error);
  c = tiny_cfg();
  c.attn_affine = "none";
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("attn_affine"), error);
  CHECK_NOTHROW(tiny_cfg().validate());
  CHECK(tiny_cfg().token_count() == 4);
  ModelConfig desk;  // defaults
  CHECK(desk.token_count() == 16);
  CHECK(desk.head_dim() == 16);
  CHECK(desk.patch_dim() == 49);
}

TEST_CASE("patches flatten channel-major and walk the grid in row-major order") {
  ModelConfig c = tiny_cfg();
  c.image_size = 2;
  c.patch_size = 2;  // one patch covering the image
  c.channels = 2;
  const Tensor img = Tensor::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor p = patches_of(img, c);
  CHECK(p.shape == std::vector<size_t>{1, 1, 8});
  CHECK(p.data == std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});

  ModelConfig c2 = tiny_cfg();  // patch 1, 2x2 grid
  const Tensor img2 = Tensor::from({1, 2, 2}, {10, 20, 30, 40});
  const Tensor p2 = patches_of(img2, c2);
  CHECK(p2.shape == std::vector<size_t>{1, 4, 1});
  // token order (py,px): (0,0),(0,1),(1,0),(1,1)
  CHECK(p2.data == std::vector<double>{10, 20, 30, 40});

  const Tensor bad = Tensor::zeros({1, 3, 3});
  CHECK_THROWS_AS(patches_of(bad, c2), error);
}

TEST_CASE("patch embedding is tokens x W_p plus bias plus position table") {
  ModelConfig c = tiny_cfg();
  c.dim = 2;
  c.heads = 1;
  PatchEmbedParams p;
  p.W_p = leaf(Tensor::from({1, 2}, {1, -1}), true);
  p.b_p = leaf(Tensor::from({2}, {0.5, 0.25}), true);
  p.pos = leaf(Tensor::from({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}), true);
  const Tensor img = Tensor::from({1, 2, 2}, {10, 20, 30, 40});
  const Tensor out = patch_embed(nullptr, img, p, c)->val;
  CHECK(out.shape == std::vector<size_t>{1, 4, 2});
  const std::vector<double> want = {10 + 0.5 + 1, -10 + 0.25 + 2, 20 + 0.5 + 3, -20 + 0.25 + 4,
                                    30 + 0.5 + 5, -30 + 0.25 + 6, 40 + 0.5 + 7, -40 + 0.25 + 8};
  for (size_t i = 0; i < want.size(); ++i) CHECK(out.data[i] == doctest::Approx(want[i]).epsilon(1e-12));

  // batching stacks samples without crosstalk
  ModelConfig desk;
  Rng rng(5);
  PatchEmbedParams dp;
  dp.W_p = leaf(rng.normal_tensor({desk.patch_dim(), desk.dim}), true);
  dp.b_p = leaf(rng.normal_tensor({desk.dim}), true);
  dp.pos = leaf(rng.normal_tensor({desk.token_count(), desk.dim}), true);
  const Tensor batch = rng.normal_tensor({3, 1, 28, 28});
  const Tensor full = patch_embed(nullptr, batch, dp, desk)->val;
  CHECK(full.shape == std::vector<size_t>{3, 16, 64});
  Tensor one = Tensor::zeros({1, 1, 28, 28});
  std::copy_n(batch.data.begin() + 2 * 784, 784, one.data.begin());
  const Tensor single = patch_embed(nullptr, one, dp, desk)->val;
  for (size_t i = 0; i < single.numel(); ++i)
    CHECK(full.data[2 * 16 * 64 + i] == single.data[i]);
}

TEST_CASE("query and key projections fuse into one matrix") {
  const Tensor Wq = Tensor::from({2, 1}, {3, 4});
  const Tensor Wk = Tensor::from({2, 1}, {6, 8});
  const Tensor W = fused_qk(Wq, Wk);
  CHECK(W.shape == std::vector<size_t>{2, 2});
  CHECK(W.data == std::vector<double>{18, 24, 24, 32});

  Rng rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const size_t N = 3 + trial % 4, d = 4 + (trial % 3) * 2, dh = 1 + trial % 3;
    const Tensor X = rng.normal_tensor({N, d});
    const Tensor q = rng.normal_tensor({d, dh});
    const Tensor k = rng.normal_tensor({d, dh});
    const Tensor lhs = t_mm_nt(t_mm(X, fused_qk(q, k)), X);
    const Tensor rhs = t_mm_nt(t_mm(X, q), t_mm(X, k));
    const double scale_den = std::max(max_abs(lhs), 1e-30);
    worst = std::max(worst, max_abs_diff(lhs, rhs) / scale_den);
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("joined scores reduce to own-branch scores at lambda 0") {
  Rng rng(21);
  const size_t d = 6, dh = 3, N = 5;
  auto attn = random_attn(rng, 3, 1, d, dh);
  const Tensor Xn = rng.normal_tensor({N, d});
  const Tensor S = joined_scores(Xn, attn, 1, 0, 0.0, dh);
  Tensor want = t_mm_nt(t_mm(Xn, fused_qk(attn.wq(1, 0)->val, attn.wk(1, 0)->val)), Xn);
  t_scale_inplace(want, 1.0 / std::sqrt(double(dh)));
  CHECK(max_abs_diff(S, want) <= 1e-12);
}

TEST_CASE("joined scores are branch-symmetric at lambda 1 and use the rectified divisor") {
  Rng rng(22);
  const size_t d = 8, dh = 4, N = 5, n = 2;
  auto attn = random_attn(rng, n, 1, d, dh);
  const Tensor Xn = rng.normal_tensor({N, d});
  const Tensor S0 = joined_scores(Xn, attn, 0, 0, 1.0, 64);
  const Tensor S1 = joined_scores(Xn, attn, 1, 0, 1.0, 64);
  CHECK(max_abs_diff(S0, S1) <= 1e-12);

  // same sum, divided by sqrt(1+(n-1))*sqrt(64) = 11.3137...
  Tensor raw = fused_qk(attn.wq(0, 0)->val, attn.wk(0, 0)->val);
  t_axpy(raw, fused_qk(attn.wq(1, 0)->val, attn.wk(1, 0)->val), 1.0);
  Tensor want = t_mm_nt(t_mm(Xn, raw), Xn);
  t_scale_inplace(want, 1.0 / 11.313708498984761);
  CHECK(max_abs_diff(S0, want) <= 1e-12);

  CHECK_THROWS_AS(joined_scores(Xn, attn, 0, 0, -0.1, dh), error);
  CHECK_THROWS_AS(joined_scores(Xn, attn, 0, 0, 1.1, dh), error);
}

TEST_CASE("summed per-head outputs match the concatenate-then-project oracle") {
  Rng rng(31);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const size_t h = 1 + trial % 3;
    const size_t dh = 2 + trial % 3;
    const size_t d = h * dh * (1 + trial % 2);
    const size_t N = 3 + trial % 4;
    auto attn = random_attn(rng, 1, h, d, dh);
    const Tensor Xn = rng.normal_tensor({N, d});

    Tensor X3 = Xn;
    X3.shape = {1, N, d};
    Tensor block = branch_attention_forward(nullptr, constant(X3), attn, 0.0, dh)->val;
    block.shape = {N, d};

    std::vector<Tensor> Wq, Wk, Wv;
    Tensor Wo_full = Tensor::zeros({h * dh, d});
    for (size_t i = 0; i < h; ++i) {
      Wq.push_back(attn.wq(0, i)->val);
      Wk.push_back(attn.wk(0, i)->val);
      Wv.push_back(attn.wv(0, i)->val);
      for (size_t r = 0; r < dh; ++r)
        for (size_t c = 0; c < d; ++c) Wo_full.at(i * dh + r, c) = attn.wo(0, i)->val.at(r, c);
    }
    const Tensor oracle = concat_mhsa_oracle(Xn, Wq, Wk, Wv, Wo_full, dh);
    const double den = std::max(max_abs(oracle), 1e-30);
    worst = std::max(worst, max_abs_diff(block, oracle) / den);
  }
  CHECK(worst <= 1e-10);
}

TEST_CASE("attention output is permutation-equivariant over tokens") {
  Rng rng(41);
  const size_t d = 8, dh = 4, N = 6;
  auto attn = random_attn(rng, 2, 2, d, dh);
  Tensor X = rng.normal_tensor({1, N, d});
  const Tensor out = branch_attention_forward(nullptr, constant(X), attn, 0.6, dh)->val;

  std::vector<size_t> perm = {3, 0, 5, 1, 4, 2};
  Tensor Xp = Tensor::zeros({1, N, d});
  for (size_t r = 0; r < N; ++r)
    std::copy_n(X.data.begin() + perm[r] * d, d, Xp.data.begin() + r * d);
  const Tensor outp = branch_attention_forward(nullptr, constant(Xp), attn, 0.6, dh)->val;

  for (size_t r = 0; r < N; ++r)
    for (size_t c = 0; c < d; ++c)
      CHECK(outp.data[r * d + c] == doctest::Approx(out.data[perm[r] * d + c]).epsilon(1e-10));
}

TEST_CASE("ffn branches join at the hidden activations, before the nonlinearity") {
  const size_t d = 2, f = 2;
  BranchFfnParams ffn;
  // branch 0 hidden = +x, branch 1 hidden = -x; W2 picks the first hidden unit
  ffn.W1.push_back(leaf(Tensor::from({d, f}, {1, 0, 0, 1}), true));
  ffn.W1.push_back(leaf(Tensor::from({d, f}, {-1, 0, 0, -1}), true));
  ffn.b1.push_back(leaf(Tensor::zeros({f}), true));
  ffn.b1.push_back(leaf(Tensor::zeros({f}), true));
  for (int b = 0; b < 2; ++b) {
    ffn.W2.push_back(leaf(Tensor::from({f, d}, {1, 0, 0, 1}), true));
    ffn.b2.push_back(leaf(Tensor::from({d}, {0.5, 0.5}), true));
  }
  const Tensor Xn = Tensor::from({1, 1, 2}, {3.0, -1.0});

  // lambda=1: both joined hiddens are x + (-x) = 0 and gelu(0)=0, so only the
  // output biases survive. Joining after the nonlinearity would instead give
  // gelu(x) + gelu(-x) != 0.
  const Tensor at1 = branch_ffn_forward(nullptr, constant(Xn), ffn, 1.0)->val;
  CHECK(at1.data[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(at1.data[1] == doctest::Approx(1.0).epsilon(1e-12));

  // lambda=0: independent branches, gelu(x) + gelu(-x) + biases
  const Tensor at0 = branch_ffn_forward(nullptr, constant(Xn), ffn, 0.0)->val;
  CHECK(at0.data[0] ==
        doctest::Approx(gelu_scalar(3.0) + gelu_scalar(-3.0) + 1.0).epsilon(1e-12));
  CHECK(at0.data[1] ==
        doctest::Approx(gelu_scalar(-1.0) + gelu_scalar(1.0) + 1.0).epsilon(1e-12));
}

TEST_CASE("block keeps residual identity when every module weight is zero") {
  ModelConfig c = tiny_cfg();
  MultiBranchViT m = make_model(c, 7);
  auto& blk = m.blocks[0];
  for (auto& v : blk.attn.Wo) v->val.fill(0.0);
  for (auto& v : blk.ffn.W2) v->val.fill(0.0);
  for (auto& v : blk.ffn.b2) v->val.fill(0.0);
  Rng rng(8);
  const Tensor X = rng.normal_tensor({2, c.token_count(), c.dim});
  const Tensor out = block_forward(nullptr, constant(X), blk, 0.5, c)->val;
  CHECK(out.data == X.data);  // exact: X + 0 + 0
}

TEST_CASE("model construction is seed-deterministic and respects the affine mode") {
  ModelConfig c = tiny_cfg();
  MultiBranchViT a = make_model(c, 123), b = make_model(c, 123), other = make_model(c, 124);
  const auto na = named_params(a), nb = named_params(b), no = named_params(other);
  REQUIRE(na.size() == nb.size());
  bool any_differs = false;
  for (size_t i = 0; i < na.size(); ++i) {
    CHECK(na[i].first == nb[i].first);
    CHECK(na[i].second->val.data == nb[i].second->val.data);
    if (na[i].second->val.data != no[i].second->val.data) any_differs = true;
  }
  CHECK(any_differs);

  // scale_only pins the pre-attention shift; full trains it
  CHECK_FALSE(a.blocks[0].ln1_beta->trainable);
  CHECK(a.blocks[0].ln2_beta->trainable);
  c.attn_affine = "full";
  MultiBranchViT af = make_model(c, 123);
  CHECK(af.blocks[0].ln1_beta->trainable);
  CHECK(trainable_params(af).size() == named_params(af).size());
  CHECK(trainable_params(a).size() == named_params(a).size() - 1);
}

TEST_CASE("model forward produces one logit row per sample, deterministically") {
  ModelConfig c = tiny_cfg();
  c.deploy_blocks = 2;
  MultiBranchViT m = make_model(c, 3);
  Rng rng(4);
  const Tensor imgs = rng.normal_tensor({5, 1, 2, 2});
  const Tensor l1 = model_forward(nullptr, imgs, m, 0.3)->val;
  const Tensor l2 = model_forward(nullptr, imgs, m, 0.3)->val;
  CHECK(l1.shape == std::vector<size_t>{5, 3});
  CHECK(l1.data == l2.data);
  CHECK(l1.all_finite());

  ActLog act;
  model_forward(nullptr, imgs, m, 0.3, &act);
  REQUIRE(act.blocks.size() == 2);
  CHECK(act.blocks[0].attn.size() == c.branches);
  CHECK(act.blocks[0].ffn.size() == c.branches);
  CHECK(act.blocks[0].attn[0]->val.shape == std::vector<size_t>{5, 4, 8});
}

TEST_CASE("auxiliary loss is zero when disabled and alpha-scaled when enabled") {
  ModelConfig c = tiny_cfg();
  MultiBranchViT m = make_model(c, 9);
  Rng rng(10);
  const Tensor imgs = rng.normal_tensor({2, 1, 2, 2});
  ActLog act;
  model_forward(nullptr, imgs, m, 0.0, &act);

  DiversityConfig off{0.05, false};
  CHECK(total_aux_loss(nullptr, act, off)->val.data[0] == 0.0);
  DiversityConfig on{0.05, true};
  const double raw = mean_diversity(nullptr, act)->val.data[0];
  CHECK(total_aux_loss(nullptr, act, on)->val.data[0] == doctest::Approx(0.05 * raw).epsilon(1e-12));
  CHECK(raw >= 0.0);
  CHECK(raw <= 1.0);
}

TEST_CASE("tiny model passes a full-parameter finite-difference check") {
  ModelConfig c = tiny_cfg();
  c.attn_affine = "full";  // exercise every affine leaf
  MultiBranchViT m = make_model(c, 42);
  Rng rng(43);
  const Tensor imgs = rng.normal_tensor({2, 1, 2, 2});
  const std::vector<int> labels = {0, 2};
  const DiversityConfig div{0.05, true};
  const double lambda = 0.7;

  auto loss_of = [&](Tape* t) {
    ActLog act;
    const Var logits = model_forward(t, imgs, m, lambda, &act);
    return add(t, cross_entropy(t, logits, labels), total_aux_loss(t, act, div));
  };

  const auto params = trainable_params(m);
  zero_grad(params);
  Tape tape;
  Var loss = loss_of(&tape);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (const auto& p : params)
    analytic.push_back(p->grad.data.empty() ? Tensor::zeros(p->val.shape) : p->grad);

  // h=1e-6 keeps central-difference truncation under 1e-5 relative even at the
  // high-curvature diversity term; the 1e-5 floor absorbs FD roundoff (~1e-10
  // absolute here) on coordinates whose true gradient is below resolution.
  const auto fd = bftest::finite_diff_grad([&] { return loss_of(nullptr)->val.data[0]; },
                                           params, 1e-6);
  double worst = 0.0;
  size_t worst_pi = 0, worst_i = 0;
  for (size_t pi = 0; pi < params.size(); ++pi)
    for (size_t i = 0; i < fd[pi].numel(); ++i) {
      const double e = bftest::rel_err(analytic[pi].data[i], fd[pi].data[i], 1e-5);
      if (e > worst) worst = e, worst_pi = pi, worst_i = i;
    }
  CAPTURE(worst_pi);
  CAPTURE(worst_i);
  CAPTURE(analytic[worst_pi].data[worst_i]);
  CAPTURE(fd[worst_pi].data[worst_i]);
  CHECK(worst <= 1e-4);
}
