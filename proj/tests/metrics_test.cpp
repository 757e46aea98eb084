#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vmap/metrics.hpp"

namespace vmap {
namespace {

Polyline open(std::vector<Point> v) { return Polyline(std::move(v), false); }

Polyline random_polyline(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u(-5, 5);
  std::vector<Point> v;
  while (static_cast<int>(v.size()) < n) v.push_back({u(rng), u(rng)});
  return open(std::move(v));
}

TEST(Chamfer, Examples) {
  const auto p = open({{0, 0}, {1, 0}, {3, 2}});
  EXPECT_DOUBLE_EQ(chamfer_distance(p, p), 0.0);
  const std::vector<Point> a{{0, 0}}, b{{3, 4}};
  EXPECT_DOUBLE_EQ(chamfer_point_sets(a, b), 5.0);
  EXPECT_NEAR(chamfer_distance(open({{0, 0}, {1, 0}}), open({{0, 1}, {1, 1}})), 1.0, 1e-12);
}

TEST(Chamfer, SymmetricAndReversalInvariant) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto p = random_polyline(rng, 2 + i % 6);
    const auto q = random_polyline(rng, 2 + (i / 6) % 6);
    const double d = chamfer_distance(p, q);
    EXPECT_NEAR(d, chamfer_distance(q, p), 1e-12);
    EXPECT_NEAR(d, chamfer_distance(p.reversed(), q), 1e-12);
  }
}

TEST(Frechet, Examples) {
  const auto p = open({{0, 0}, {1, 0}});
  EXPECT_DOUBLE_EQ(frechet_distance(p, p), 0.0);
  EXPECT_NEAR(frechet_distance(p, open({{0, 1}, {1, 1}})), 1.0, 1e-12);
  EXPECT_NEAR(frechet_distance(p, open({{1, 1}, {0, 1}})), std::sqrt(2.0), 1e-12);
}

TEST(Frechet, ReversalCanIncrease) {
  const auto p = open({{0, 0}, {4, 0}});
  const auto q = open({{0, 0.5}, {4, 0.5}});
  EXPECT_GT(frechet_distance(p, q.reversed()), frechet_distance(p, q) + 1.0);
}

TEST(Frechet, DpMatchesBruteForce) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Point> a(1 + trial % 6), b(1 + (trial / 6) % 6);
    for (auto& p : a) p = {u(rng), u(rng)};
    for (auto& p : b) p = {u(rng), u(rng)};
    EXPECT_EQ(discrete_frechet(a, b), frechet_bruteforce(a, b));
  }
}

TEST(Frechet, BruteForceTwoByTwo) {
  const std::vector<Point> a{{0, 0}, {1, 0}}, b{{0, 1}, {1, 2}};
  // Couplings: diagonal max(1, 2); via (0,1): max(1, d(a0,b1), 2); via (1,0).
  EXPECT_DOUBLE_EQ(frechet_bruteforce(a, b), 2.0);
  EXPECT_THROW(frechet_bruteforce(std::vector<Point>(9), b), std::invalid_argument);
}

TEST(Frechet, EndpointLowerBound) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto p = random_polyline(rng, 2 + i % 5);
    const auto q = random_polyline(rng, 2 + (i / 5) % 5);
    const double d = frechet_distance(p, q, 20);
    EXPECT_GE(d, std::max(distance(p.front(), q.front()), distance(p.back(), q.back())) - 1e-12);
  }
}

TEST(AveragePrecision, HandPrCurve) {
  // Ranked FP then TP against one ground truth.
  EXPECT_DOUBLE_EQ(average_precision({false, true}, 1), 0.5);
  EXPECT_DOUBLE_EQ(average_precision({true, true}, 2), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({}, 3), 0.0);
  EXPECT_DOUBLE_EQ(average_precision({}, 0), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({false}, 0), 0.0);
}

SceneGroundTruth scene(std::string id, VectorMap m) { return {std::move(id), std::move(m)}; }

MapElement divider_at(double y) { return {ElementClass::kDivider, open({{0, y}, {10, y}})}; }

TEST(InstanceAp, TwoPredictionsOneGt) {
  const std::vector<SceneGroundTruth> gts{scene("s", {divider_at(0)})};
  const std::vector<ScoredPrediction> preds{{divider_at(2.0), 0.9, "s"}, {divider_at(0.3), 0.8, "s"}};
  EXPECT_DOUBLE_EQ(instance_ap(preds, gts, ElementClass::kDivider, 1.0, MetricKind::kChamfer), 0.5);
}

TEST(InstanceAp, PerfectAndEmpty) {
  const std::vector<SceneGroundTruth> gts{scene("s", {divider_at(0), divider_at(5)})};
  const std::vector<ScoredPrediction> perfect{{divider_at(0), 1.0, "s"}, {divider_at(5), 1.0, "s"}};
  EXPECT_DOUBLE_EQ(instance_ap(perfect, gts, ElementClass::kDivider, 0.5, MetricKind::kFrechet), 1.0);
  EXPECT_DOUBLE_EQ(instance_ap({}, gts, ElementClass::kDivider, 0.5, MetricKind::kFrechet), 0.0);
  EXPECT_DOUBLE_EQ(instance_ap({}, gts, ElementClass::kBoundary, 0.5, MetricKind::kFrechet), 1.0);
}

TEST(InstanceAp, PredictionsOnlyMatchWithinScene) {
  const std::vector<SceneGroundTruth> gts{scene("a", {divider_at(0)}), scene("b", {})};
  const std::vector<ScoredPrediction> preds{{divider_at(0), 0.9, "b"}};
  EXPECT_DOUBLE_EQ(instance_ap(preds, gts, ElementClass::kDivider, 1.0, MetricKind::kChamfer), 0.0);
}

TEST(InstanceAp, Monotonicity) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    VectorMap gt;
    for (int i = 0; i < 4; ++i) gt.push_back(divider_at(3.0 * i));
    const std::vector<SceneGroundTruth> gts{scene("s", gt)};
    std::vector<ScoredPrediction> preds;
    // Predictions never come within the threshold of the GT at y = 9.
    for (int i = 0; i < 5; ++i) preds.push_back({divider_at(3.0 * (i % 3) + 1.5 * u(rng)), 0.1 + 0.8 * u(rng), "s"});
    const double base = instance_ap(preds, gts, ElementClass::kDivider, 1.0, MetricKind::kChamfer);

    auto with_fp = preds;
    with_fp.push_back({divider_at(100.0), 0.0, "s"});
    EXPECT_LE(instance_ap(with_fp, gts, ElementClass::kDivider, 1.0, MetricKind::kChamfer), base + 1e-12);

    // A correct, top-ranked prediction for the otherwise unmatched GT.
    auto with_tp = preds;
    with_tp.insert(with_tp.begin(), {divider_at(9.0), 1.0, "s"});
    EXPECT_GE(instance_ap(with_tp, gts, ElementClass::kDivider, 1.0, MetricKind::kChamfer), base - 1e-12);
  }
}

TEST(EvaluateMapSet, IdenticalAndEmpty) {
  const VectorMap m{divider_at(0), {ElementClass::kBoundary, open({{0, -5}, {5, -4}, {10, -5}})},
                    {ElementClass::kPedCrossing, canonicalize_closed(std::vector<Point>{{2, -1}, {4, -1}, {4, 1}, {2, 1}})}};
  const std::vector<SceneGroundTruth> gts{scene("s", m)};
  std::vector<ScoredPrediction> preds;
  for (const auto& e : m) preds.push_back({e, 1.0, "s"});
  const auto r = evaluate_map_set(preds, gts);
  EXPECT_DOUBLE_EQ(r.mean_ap(MetricKind::kChamfer), 1.0);
  EXPECT_DOUBLE_EQ(r.mean_ap(MetricKind::kFrechet), 1.0);
  const auto empty = evaluate_map_set({}, gts);
  EXPECT_DOUBLE_EQ(empty.mean_ap(MetricKind::kChamfer), 0.0);
}

TEST(EvaluateMapSet, DisplacedPredictionPerThreshold) {
  const VectorMap gt{divider_at(0), divider_at(4), divider_at(8)};
  const std::vector<SceneGroundTruth> gts{scene("s", gt)};
  const std::vector<ScoredPrediction> preds{{divider_at(0), 0.9, "s"}, {divider_at(4), 0.8, "s"},
                                            {divider_at(8.7), 0.7, "s"}};
  const auto r = evaluate_map_set(preds, gts);
  EXPECT_NEAR(r.at(MetricKind::kChamfer, ElementClass::kDivider, 0), 2.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(r.at(MetricKind::kChamfer, ElementClass::kDivider, 1), 1.0);
  EXPECT_DOUBLE_EQ(r.at(MetricKind::kChamfer, ElementClass::kDivider, 2), 1.0);
}

TEST(EvaluateMapSet, SceneMismatch) {
  const std::vector<SceneGroundTruth> gts{scene("s", {})};
  const std::vector<ScoredPrediction> preds{{divider_at(0), 1.0, "other"}};
  EXPECT_THROW(evaluate_map_set(preds, gts), DatasetError);
}

TEST(EvaluateMapSet, JsonAndTable) {
  const std::vector<SceneGroundTruth> gts{scene("s", {divider_at(0)})};
  const auto r = evaluate_map_set({}, gts);
  const auto j = to_json(r);
  EXPECT_TRUE(j.contains("chamfer"));
  EXPECT_TRUE(j.contains("frechet"));
  const auto table = format_table(r);
  EXPECT_NE(table.find("AP_ped"), std::string::npos);
  EXPECT_NE(table.find("AP_divider"), std::string::npos);
  EXPECT_NE(table.find("AP_boundary"), std::string::npos);
  EXPECT_NE(table.find("mAP"), std::string::npos);
}

}  // namespace
}  // namespace vmap
