#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>

#include "vmap/checkpoint.hpp"
#include "vmap/optim.hpp"
#include "vmap/tensor.hpp"

namespace vmap::ad {
namespace {

Tensor randn(ParamStore& ps, const std::string& name, Shape s, std::mt19937_64& rng, double sd = 1.0) {
  return ps.add_normal(name, std::move(s), sd, rng);
}

double check(ParamStore& ps, const std::function<Tensor()>& f) {
  const auto r = finite_diff_check(f, ps);
  EXPECT_GT(r.checked, 0u);
  return r.max_rel_error;
}

TEST(Ops, MatmulIdentity) {
  const auto a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto eye = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto c = matmul(a, eye);
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()), (std::vector<double>{1, 2, 3, 4, 5, 6}));
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Ops, SoftmaxUniformAndNormalised) {
  const auto s = softmax(Tensor::full({2, 4}, 3.0));
  for (double v : s.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 5);
  std::vector<double> v(50 * 7);
  for (auto& x : v) x = n(rng);
  const auto p = softmax(Tensor::constant({50, 7}, v));
  for (std::size_t r = 0; r < 50; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 7; ++c) sum += p.at(r, c);
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Ops, CrossEntropyNonNegative) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0, 3);
  std::vector<double> v(20 * 5);
  for (auto& x : v) x = n(rng);
  std::vector<int> t(20);
  for (int i = 0; i < 20; ++i) t[i] = i % 5;
  EXPECT_GE(cross_entropy(Tensor::constant({20, 5}, v), t).item(), 0.0);
}

TEST(Ops, GridSampleCenterIsMean) {
  const auto f = Tensor::constant({4, 1}, {1, 2, 3, 4});
  const auto s = grid_sample(f, 2, 2, Tensor::constant({1, 2}, {0.5, 0.5}));
  EXPECT_DOUBLE_EQ(s.item(), 2.5);
  // Pixel centres hit exact values.
  const auto c = grid_sample(f, 2, 2, Tensor::constant({1, 2}, {0.75, 0.25}));
  EXPECT_DOUBLE_EQ(c.item(), 2.0);
}

TEST(Ops, DropoutIdentityInEval) {
  std::mt19937_64 rng(3);
  const auto x = Tensor::constant({3, 3}, std::vector<double>(9, 1.5));
  EvalModeGuard eval;
  const auto y = dropout(x, 0.5, rng);
  for (double v : y.values()) EXPECT_EQ(v, 1.5);
}

TEST(Ops, ShapeErrorsNameDims) {
  const auto a = Tensor::zeros({2, 3});
  const auto b = Tensor::zeros({4, 5});
  try {
    add(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[4,5]"), std::string::npos);
  }
}

TEST(Backward, SumGivesOnes) {
  ParamStore ps;
  auto x = ps.add("x", {2, 2}, {1, 2, 3, 4});
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
  // Leaf gradients accumulate across calls.
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, ProductRule) {
  ParamStore ps;
  auto x = ps.add("x", {3}, {1, 2, 3});
  auto y = ps.add("y", {3}, {4, 5, 6});
  backward(sum(mul(x, y)));
  for (int i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], y.values()[i]);
}

TEST(Backward, NonScalarLossThrows) {
  ParamStore ps;
  auto x = ps.add("x", {2}, {1, 2});
  EXPECT_THROW(backward(x), ShapeError);
}

TEST(GradCheck, LinearIsExact) {
  ParamStore ps;
  std::mt19937_64 rng(4);
  auto w = randn(ps, "w", {5}, rng);
  const auto c = Tensor::constant({5}, {1, -2, 3, 0.5, 7});
  const auto r = finite_diff_check([&] { return sum(mul(w, c)); }, ps);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(GradCheck, EveryOp) {
  std::mt19937_64 rng(5);
  ParamStore ps;
  auto a = randn(ps, "a", {4, 3}, rng);
  auto b = randn(ps, "b", {3, 5}, rng);
  auto c = randn(ps, "c", {4, 5}, rng);
  auto row = randn(ps, "row", {5}, rng);
  auto g = ps.add_constant("gamma", {5}, 1.2);
  auto be = randn(ps, "beta", {5}, rng, 0.1);
  auto pos = ps.add("pos", {4, 5}, std::vector<double>(20, 1.7));
  auto feat = randn(ps, "feat", {12, 3}, rng);
  auto locs = ps.add("locs", {3, 2}, {0.31, 0.62, 0.77, 0.15, 0.52, 0.48});
  auto batch_a = randn(ps, "ba", {2, 3, 4}, rng);
  auto batch_b = randn(ps, "bb", {2, 4, 2}, rng);

  EXPECT_LT(check(ps, [&] { return sum(mul(matmul(a, b), c)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(matmul_nt(a, transpose(b)), c)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(add(c, row), c)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(layer_norm(c, g, be), c)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(gelu(c), c)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(sigmoid(c), tanh(c))); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(softmax(c), c)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(log_softmax(c), c)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(div(c, pos)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(log(pos)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return cross_entropy(c, {0, 4, 2, -1}); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return smooth_l1(c, scale(pos, 0.2)); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(concat({a, slice_cols(c, 1, 2)}, 1), concat({a, slice_cols(c, 0, 2)}, 1))); }),
            1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(concat({slice_rows(c, 0, 1), slice_rows(c, 2, 2)}, 0), slice_rows(c, 1, 3))); }),
            1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(gather_rows(c, {3, 0, 3}), slice_rows(c, 0, 3))); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(reshape(a, {3, 4}), reshape(a, {3, 4}))); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(grid_sample(feat, 2, 6, locs), grid_sample(feat, 2, 6, locs))); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(bmm(batch_a, batch_b), bmm(batch_a, batch_b))); }), 1e-6);
  EXPECT_LT(check(ps, [&] { return sum(mul(col_max(c), col_min(c))); }), 1e-6);
}

TEST(GradCheck, ThreeLayerMlpCrossEntropy) {
  std::mt19937_64 rng(6);
  ParamStore ps;
  auto w1 = randn(ps, "w1", {6, 16}, rng, 0.5);
  auto b1 = randn(ps, "b1", {16}, rng, 0.1);
  auto w2 = randn(ps, "w2", {16, 16}, rng, 0.3);
  auto b2 = randn(ps, "b2", {16}, rng, 0.1);
  auto w3 = randn(ps, "w3", {16, 4}, rng, 0.3);
  std::vector<double> xv(8 * 6);
  std::normal_distribution<double> n(0, 1);
  for (auto& v : xv) v = n(rng);
  const auto x = Tensor::constant({8, 6}, xv);
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3};
  auto f = [&] {
    auto h = gelu(add(matmul(x, w1), b1));
    h = tanh(add(matmul(h, w2), b2));
    return cross_entropy(matmul(h, w3), y);
  };
  EXPECT_LT(finite_diff_check(f, ps).max_rel_error, 1e-4);
}

TEST(AdamW, ZeroGradientOnlyDecays) {
  ParamStore ps;
  auto p = ps.add("p", {3}, {1.0, -2.0, 0.5});
  p.mutable_grad();
  OptimState st;
  st.config.weight_decay = 0.1;
  adamw_step(ps, st, 0.01);
  EXPECT_DOUBLE_EQ(p.values()[0], 1.0 - 0.01 * 0.1 * 1.0);
  EXPECT_DOUBLE_EQ(p.values()[1], -2.0 - 0.01 * 0.1 * -2.0);
}

TEST(AdamW, ClipsGlobalNorm) {
  ParamStore ps;
  auto p = ps.add("p", {2}, {0.0, 0.0});
  auto g = p.mutable_grad();
  g[0] = 30.0;
  g[1] = 40.0;  // norm 50
  OptimState st;
  st.config.weight_decay = 0.0;
  st.config.beta1 = 0.0;
  st.config.beta2 = 0.0;
  const double norm = adamw_step(ps, st, 1.0);
  EXPECT_DOUBLE_EQ(norm, 50.0);
  // First moment holds the clipped gradient (scale 0.1).
  EXPECT_NEAR(st.m[0][0], 3.0, 1e-12);
  EXPECT_NEAR(st.m[0][1], 4.0, 1e-12);
}

TEST(AdamW, NonFiniteNamesParameter) {
  ParamStore ps;
  auto p = ps.add("encoder.w", {1}, {0.0});
  p.mutable_grad()[0] = std::nan("");
  OptimState st;
  try {
    adamw_step(ps, st, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.w"), std::string::npos);
  }
}

TEST(Schedule, Endpoints) {
  LrSchedule s{1e-3, 100, 900, 0.1};
  EXPECT_EQ(lr_at(0, s), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(100, s), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(50, s), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(900, s), 1e-4);
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 rng(7);
  ParamStore a;
  randn(a, "x", {3, 4}, rng);
  randn(a, "y", {5}, rng);
  const auto path = std::filesystem::temp_directory_path() / "vmap_ckpt_test.bin";
  save_checkpoint(path, a, {{"hidden", 8}});
  ParamStore b;
  b.add_constant("x", {3, 4}, 0.0);
  b.add_constant("y", {5}, 0.0);
  const auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.config.at("hidden"), 8);
  load_into(ck, b);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& ta = a.entries()[i].second;
    const auto& tb = b.entries()[i].second;
    EXPECT_TRUE(std::equal(ta.values().begin(), ta.values().end(), tb.values().begin()));
  }
  ParamStore wrong;
  wrong.add_constant("x", {4, 3}, 0.0);
  wrong.add_constant("y", {5}, 0.0);
  EXPECT_THROW(load_into(ck, wrong), CheckpointError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace vmap::ad
