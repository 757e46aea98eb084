#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "vmap/geometry.hpp"

namespace vmap {
namespace {

Polyline open(std::vector<Point> v) { return Polyline(std::move(v), false); }

Polyline random_polyline(std::mt19937_64& rng, int n, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Point> v;
  while (static_cast<int>(v.size()) < n) {
    Point p{u(rng), u(rng)};
    if (v.empty() || !(v.back() == p)) v.push_back(p);
  }
  return open(std::move(v));
}

TEST(Polyline, RejectsInvalid) {
  EXPECT_THROW(open({{0, 0}}), GeometryError);
  EXPECT_THROW(open({{0, 0}, {0, 0}}), GeometryError);
  EXPECT_THROW(Polyline({{0, 0}, {1, 0}, {1, 1}}, true), GeometryError);
  EXPECT_NO_THROW(Polyline({{0, 0}, {1, 0}, {1, 1}, {0, 0}}, true));
}

TEST(Rdp, CollinearMidpointRemoved) {
  const auto out = rdp_simplify(open({{0, 0}, {1, 0}, {2, 0}}), 0.01);
  EXPECT_EQ(out.vertices(), (std::vector<Point>{{0, 0}, {2, 0}}));
}

TEST(Rdp, ZeroToleranceKeepsEverything) {
  const auto p = open({{0, 0}, {1, 0.3}, {2, -0.1}, {3, 0}});
  EXPECT_EQ(rdp_simplify(p, 0.0), p);
}

TEST(Rdp, ApexAgainstThreshold) {
  // Apex heights 0.5 and 0.6 straddle a tolerance of 0.55.
  EXPECT_EQ(rdp_simplify(open({{0, 0}, {1, 0.5}, {2, 0}}), 0.55).size(), 2u);
  EXPECT_EQ(rdp_simplify(open({{0, 0}, {1, 0.6}, {2, 0}}), 0.55).size(), 3u);
  // Both exceed 0.4.
  EXPECT_EQ(rdp_simplify(open({{0, 0}, {1, 0.5}, {2, 0}}), 0.4).size(), 3u);
}

TEST(Rdp, IdempotentAndWithinTolerance) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_polyline(rng, 3 + trial % 12, -5, 5);
    const double eps = 0.05 * (trial % 20);
    const auto s = rdp_simplify(p, eps);
    EXPECT_EQ(rdp_simplify(s, eps), s);
    EXPECT_EQ(s.front(), p.front());
    EXPECT_EQ(s.back(), p.back());
    // Every dropped vertex lies within eps of the simplified chain.
    for (const auto& v : p.vertices()) {
      double best = 1e300;
      for (std::size_t i = 1; i < s.size(); ++i) best = std::min(best, segment_distance(v, s[i - 1], s[i]));
      EXPECT_LE(best, eps + 1e-12);
    }
  }
}

TEST(Rdp, ClosedKeepsRing) {
  const auto sq = canonicalize_closed(std::vector<Point>{{0, 0}, {2, 0}, {2, 2}, {0, 2}});
  const auto s = rdp_simplify(sq, 0.1);
  EXPECT_TRUE(s.closed());
  EXPECT_EQ(s, sq);
}

TEST(Resample, UniformMidpoint) {
  const auto out = resample(open({{0, 0}, {2, 0}}), Uniform{3});
  EXPECT_EQ(out.vertices(), (std::vector<Point>{{0, 0}, {1, 0}, {2, 0}}));
}

TEST(Resample, FixedIntervalWalk) {
  const auto out = resample(open({{0, 0}, {2.5, 0}}), FixedInterval{1.0});
  EXPECT_EQ(out.vertices(), (std::vector<Point>{{0, 0}, {1, 0}, {2, 0}, {2.5, 0}}));
}

TEST(Resample, CurvatureKeepsCorner) {
  const auto out = resample(open({{0, 0}, {1, 0}, {1, 1}}), Curvature{0.1});
  EXPECT_EQ(out.size(), 3u);
  const auto straight = resample(open({{0, 0}, {1, 0}, {2, 0.01}}), Curvature{0.1});
  EXPECT_EQ(straight.size(), 2u);
}

TEST(Resample, UniformCountAndEndpoints) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_polyline(rng, 2 + trial % 9, -10, 10);
    const int n = 2 + trial % 50;
    const auto r = resample(p, Uniform{n});
    EXPECT_EQ(static_cast<int>(r.size()), n);
    EXPECT_EQ(r.front(), p.front());
    EXPECT_EQ(r.back(), p.back());
  }
}

TEST(Resample, DegenerateAndBadArgs) {
  EXPECT_THROW(resample(open({{0, 0}, {1, 0}}), Uniform{1}), GeometryError);
  EXPECT_THROW(resample(open({{0, 0}, {1, 0}}), FixedInterval{0.0}), GeometryError);
  EXPECT_THROW(resample(open({{0, 0}, {1, 0}}), Curvature{-1.0}), GeometryError);
}

TEST(Keypoints, Bbox) {
  const auto k = extract_keypoints(open({{0, 0}, {2, 1}, {1, 3}}), KeypointRepr::kBbox);
  EXPECT_EQ(k.points, (std::vector<Point>{{0, 0}, {2, 3}}));
}

TEST(Keypoints, Sme) {
  const auto k = extract_keypoints(open({{0, 0}, {4, 0}}), KeypointRepr::kSme);
  EXPECT_EQ(k.points, (std::vector<Point>{{0, 0}, {2, 0}, {4, 0}}));
}

TEST(Keypoints, Extreme) {
  const auto k = extract_keypoints(open({{0, 1}, {2, 0}, {3, 2}}), KeypointRepr::kExtreme);
  EXPECT_EQ(k.points, (std::vector<Point>{{0, 1}, {3, 2}, {3, 2}, {2, 0}}));
}

TEST(Keypoints, ExtremeTiesTakeEarliest) {
  const auto k = extract_keypoints(open({{0, 0}, {0, 1}, {1, 1}, {1, 0}}), KeypointRepr::kExtreme);
  EXPECT_EQ(k.points[0], (Point{0, 0}));
  EXPECT_EQ(k.points[1], (Point{1, 1}));
  EXPECT_EQ(k.points[2], (Point{0, 1}));
  EXPECT_EQ(k.points[3], (Point{0, 0}));
}

TEST(Keypoints, ReversalBehaviour) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = random_polyline(rng, 2 + trial % 7, -3, 3);
    EXPECT_EQ(extract_keypoints(p, KeypointRepr::kBbox), extract_keypoints(p.reversed(), KeypointRepr::kBbox));
    const auto a = extract_keypoints(p, KeypointRepr::kSme).points;
    const auto b = extract_keypoints(p.reversed(), KeypointRepr::kSme).points;
    EXPECT_EQ(a[0], b[2]);
    EXPECT_EQ(a[2], b[0]);
  }
}

TEST(Quantize, Examples) {
  const GridSpec g{10, 10, 0.3, {0, 0}};
  EXPECT_EQ(quantize_vertex({0.45, 0.0}, g), (CellIndex{1, 0}));
  EXPECT_EQ(quantize_vertex({0, 0}, g), (CellIndex{0, 0}));
  const auto c = dequantize_vertex(0, 0, g);
  EXPECT_DOUBLE_EQ(c.x, 0.15);
  EXPECT_DOUBLE_EQ(c.y, 0.15);
  EXPECT_EQ(quantize_vertex({-5, 99}, g), (CellIndex{0, 9}));
}

TEST(Quantize, Idempotent) {
  const GridSpec g{100, 50, 0.3, {-15, -7.5}};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-20, 20);
  for (int i = 0; i < 2000; ++i) {
    const auto q = quantize_vertex({u(rng), u(rng)}, g);
    const auto c = dequantize_vertex(q.tx, q.ty, g);
    EXPECT_EQ(quantize_vertex(c, g), q);
  }
}

TEST(Tokens, FlattenExample) {
  const GridSpec g{10, 10, 1.0, {0, 0}};
  const auto seq = flatten_to_tokens(open({{0.2, 0.2}, {3.4, 5.6}}), g, 10);
  EXPECT_EQ(seq.tokens, (std::vector<int>{0, 0, 3, 5, 10}));
}

TEST(Tokens, DecodeErrors) {
  const GridSpec g{10, 10, 1.0, {0, 0}};
  EXPECT_THROW(tokens_to_polyline({{10}}, g), DecodeError);
  EXPECT_THROW(tokens_to_polyline({{1, 2, 3, 10}}, g), DecodeError);
  EXPECT_THROW(tokens_to_polyline({{1, 2, 11, 3, 10}}, g), DecodeError);
  EXPECT_THROW(tokens_to_polyline({{1, 2, 3, 4}}, g), DecodeError);
  EXPECT_THROW(flatten_to_tokens(open({{0, 0}, {1, 1}, {2, 2}}), g, 2), GeometryError);
}

TEST(Tokens, RoundTripWithinHalfCell) {
  const GridSpec g{100, 50, 0.3, {-15, -7.5}};
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> ux(-15, 15 - 1e-9), uy(-7.5, 7.5 - 1e-9);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Point> v;
    std::vector<CellIndex> cells;
    while (v.size() < 2 + static_cast<std::size_t>(trial % 10)) {
      Point p{ux(rng), uy(rng)};
      const auto c = quantize_vertex(p, g);
      if (!cells.empty() && cells.back() == c) continue;
      cells.push_back(c);
      v.push_back(p);
    }
    const auto poly = open(v);
    const auto back = tokens_to_polyline(flatten_to_tokens(poly, g, 32), g);
    ASSERT_EQ(back.size(), poly.size());
    for (std::size_t i = 0; i < poly.size(); ++i) {
      EXPECT_LE(std::abs(back[i].x - poly[i].x), 0.5 * g.cell_m + 1e-12);
      EXPECT_LE(std::abs(back[i].y - poly[i].y), 0.5 * g.cell_m + 1e-12);
    }
  }
}

TEST(Tokens, ClosedDropsAndRestoresRepeat) {
  const GridSpec g{10, 10, 1.0, {0, 0}};
  const auto sq = canonicalize_closed(std::vector<Point>{{1.5, 1.5}, {4.5, 1.5}, {4.5, 4.5}, {1.5, 4.5}});
  const auto seq = flatten_to_tokens(sq, g, 4);
  EXPECT_EQ(seq.tokens.size(), 9u);
  const auto back = tokens_to_polyline(seq, g, true);
  EXPECT_TRUE(back.closed());
  EXPECT_EQ(back, sq);
}

TEST(Canonical, CounterClockwiseFromSmallest) {
  // Clockwise input starting elsewhere.
  const auto p = canonicalize_closed(std::vector<Point>{{2, 2}, {2, 0}, {0, 0}, {0, 2}});
  EXPECT_EQ(p.vertices(), (std::vector<Point>{{0, 0}, {2, 0}, {2, 2}, {0, 2}, {0, 0}}));
}

TEST(BboxIou, Examples) {
  const KeypointSet a{KeypointRepr::kBbox, {{0, 0}, {2, 2}}};
  const KeypointSet b{KeypointRepr::kBbox, {{1, 1}, {3, 3}}};
  const KeypointSet far{KeypointRepr::kBbox, {{10, 10}, {11, 11}}};
  EXPECT_DOUBLE_EQ(bbox_iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(bbox_iou(a, b), 1.0 / 7.0);
  EXPECT_DOUBLE_EQ(bbox_iou(a, far), 0.0);
  // Zero-area boxes stay finite.
  const KeypointSet line{KeypointRepr::kSme, {{0, 0}, {1, 0}, {2, 0}}};
  EXPECT_TRUE(std::isfinite(bbox_iou(line, a)));
}

TEST(Json, ElementRoundTrip) {
  const MapElement e{ElementClass::kPedCrossing,
                     canonicalize_closed(std::vector<Point>{{0, 0}, {2, 0.5}, {2, 2}, {0, 2}})};
  const auto j = to_json(e);
  EXPECT_EQ(j.at("class"), "crossing");
  EXPECT_EQ(j.at("closed"), true);
  EXPECT_EQ(element_from_json(j), e);
}

}  // namespace
}  // namespace vmap
