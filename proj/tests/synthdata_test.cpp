#include <gtest/gtest.h>

#include <filesystem>

#include "vmap/synthdata.hpp"

namespace vmap {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("vmap_synth_" + name);
  fs::remove_all(p);
  return p;
}

NoiseConfig clean() {
  NoiseConfig n;
  n.sigma = 0.0;
  n.occlusions = 0;
  return n;
}

TEST(GenScene, SameSeedSameMap) {
  const SceneConfig cfg;
  EXPECT_EQ(to_json(gen_scene(17, cfg)).dump(), to_json(gen_scene(17, cfg)).dump());
  EXPECT_NE(to_json(gen_scene(17, cfg)).dump(), to_json(gen_scene(18, cfg)).dump());
}

TEST(GenScene, UnitCountsGiveOneOfEach) {
  SceneConfig cfg;
  cfg.boundaries = cfg.dividers = cfg.crossings = {1, 1};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto m = gen_scene(seed, cfg);
    ASSERT_EQ(m.size(), 3u) << "seed " << seed;
    int per_class[kNumElementClasses] = {};
    for (const auto& e : m) ++per_class[static_cast<int>(e.cls)];
    for (int c : per_class) EXPECT_EQ(c, 1);
  }
}

TEST(GenScene, RejectsImpossibleConfig) {
  SceneConfig cfg;
  cfg.extent_x = 0.0;
  EXPECT_THROW(gen_scene(1, cfg), ConfigError);
  cfg = {};
  cfg.dividers = {3, 1};
  EXPECT_THROW(gen_scene(1, cfg), ConfigError);
}

bool convex(const std::vector<Point>& ring) {
  // ring repeats its first vertex at the end
  int sign = 0;
  const std::size_t n = ring.size() - 1;
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = ring[i], b = ring[(i + 1) % n], c = ring[(i + 2) % n];
    const double cr = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
    const int s = cr > 0 ? 1 : (cr < 0 ? -1 : 0);
    if (s == 0) continue;
    if (sign == 0) sign = s;
    if (s != sign) return false;
  }
  return true;
}

TEST(GenScene, InvariantsOverThousandScenes) {
  const SceneConfig cfg;
  const Point o = cfg.origin();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto m = gen_scene(detail::splitmix64(seed), cfg);
    for (const auto& e : m) {
      // Round trip through validation.
      ASSERT_NO_THROW(Polyline(e.poly.vertices(), e.poly.closed()));
      EXPECT_EQ(e.poly.closed(), e.cls == ElementClass::kPedCrossing) << "seed " << seed;
      const std::size_t distinct = e.poly.closed() ? e.poly.size() - 1 : e.poly.size();
      EXPECT_LE(static_cast<int>(distinct), cfg.max_vertices);
      for (const auto& p : e.poly.vertices()) {
        EXPECT_GE(p.x, o.x);
        EXPECT_LE(p.x, o.x + cfg.extent_x);
        EXPECT_GE(p.y, o.y);
        EXPECT_LE(p.y, o.y + cfg.extent_y);
      }
      if (e.cls == ElementClass::kBoundary) EXPECT_LT(e.poly.front().x, e.poly.back().x);
      if (e.cls == ElementClass::kPedCrossing) {
        EXPECT_EQ(e.poly.size(), 5u);
        EXPECT_TRUE(convex(e.poly.vertices())) << "seed " << seed;
      }
    }
  }
}

TEST(Rasterize, EmptyMapIsZero) {
  const auto g = grid_for(SceneConfig{}, 0.3);
  const auto r = rasterize_scene({}, g, clean());
  EXPECT_EQ(r.channels, kNumElementClasses);
  EXPECT_EQ(r.height, 50);
  EXPECT_EQ(r.width, 100);
  for (float v : r.data) EXPECT_EQ(v, 0.0f);
}

TEST(Rasterize, HorizontalDividerStaysWithinStroke) {
  const auto g = grid_for(SceneConfig{}, 0.3);
  const NoiseConfig nc = clean();
  const double y = 0.1;
  const VectorMap m{{ElementClass::kDivider, Polyline({{-9.0, y}, {9.0, y}}, false)}};
  const auto r = rasterize_scene(m, g, nc);
  const double reach = nc.stroke_cells / 2.0 + 0.5;
  const Point a{(-9.0 - g.origin.x) / g.cell_m, (y - g.origin.y) / g.cell_m};
  const Point b{(9.0 - g.origin.x) / g.cell_m, (y - g.origin.y) / g.cell_m};
  int lit = 0;
  for (int c = 0; c < r.channels; ++c) {
    for (int yy = 0; yy < r.height; ++yy) {
      for (int x = 0; x < r.width; ++x) {
        const float v = r.at(c, yy, x);
        if (c != static_cast<int>(ElementClass::kDivider)) {
          EXPECT_EQ(v, 0.0f);
          continue;
        }
        const double d = segment_distance({x + 0.5, yy + 0.5}, a, b);
        if (v > 0.0f) {
          ++lit;
          EXPECT_LT(d, reach) << x << "," << yy;
        }
        if (d <= reach - 1.0) EXPECT_EQ(v, 1.0f);
      }
    }
  }
  EXPECT_GT(lit, 60 * 2);
}

TEST(Rasterize, DeterministicAndBounded) {
  const auto g = grid_for(SceneConfig{}, 0.3);
  const auto m = gen_scene(5, SceneConfig{});
  EXPECT_EQ(rasterize_scene(m, g, clean()), rasterize_scene(m, g, clean()));
  NoiseConfig noisy;
  noisy.seed = 99;
  const auto r = rasterize_scene(m, g, noisy);
  EXPECT_EQ(r, rasterize_scene(m, g, noisy));
  for (float v : r.data) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Rasterize, OcclusionBoundedByAreaFraction) {
  const auto g = grid_for(SceneConfig{}, 0.3);
  // A full-coverage map so zeroed cells are exactly the occluded ones.
  NoiseConfig nc = clean();
  nc.stroke_cells = 1000.0;
  nc.occlusions = 1;
  for (std::uint64_t s = 0; s < 50; ++s) {
    nc.seed = s;
    const VectorMap m{{ElementClass::kDivider, Polyline({{-1.0, 0.0}, {1.0, 0.0}}, false)}};
    const auto r = rasterize_scene(m, g, nc);
    int zero = 0;
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x) zero += r.at(1, y, x) == 0.0f;
    EXPECT_LE(zero, static_cast<int>(0.15 * g.width_cells * g.height_cells));
  }
}

TEST(Rasterize, EveryGtVertexNearLitCell) {
  const SceneConfig cfg;
  const auto g = grid_for(cfg, 0.3);
  const NoiseConfig nc = clean();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto m = gen_scene(seed, cfg);
    const auto r = rasterize_scene(m, g, nc);
    for (const auto& e : m) {
      for (const auto& p : e.poly.vertices()) {
        const double px = (p.x - g.origin.x) / g.cell_m, py = (p.y - g.origin.y) / g.cell_m;
        bool near = false;
        for (int y = 0; y < r.height && !near; ++y)
          for (int x = 0; x < r.width && !near; ++x)
            near = r.at(static_cast<int>(e.cls), y, x) > 0.0f &&
                   std::hypot(x + 0.5 - px, y + 0.5 - py) <= nc.stroke_cells;
        EXPECT_TRUE(near) << "seed " << seed;
      }
    }
  }
}

TEST(Dataset, SplitCountsAndDisjointSeeds) {
  const auto dir = scratch_dir("split");
  DatasetSpec spec;
  spec.n_scenes = 10;
  spec.seed = 3;
  build_dataset(dir, spec);
  const auto ds = load_dataset(dir);
  EXPECT_EQ(ds.split("train").size(), 8u);
  EXPECT_EQ(ds.split("val").size(), 2u);
  EXPECT_EQ(ds.manifest.at("splits").at("train").size(), 8u);
  std::set<std::uint64_t> seeds;
  for (const auto& s : ds.scenes) seeds.insert(s.seed);
  EXPECT_EQ(seeds.size(), 10u);
  fs::remove_all(dir);
}

TEST(Dataset, RebuildGivesSameHash) {
  const auto a = scratch_dir("hash_a"), b = scratch_dir("hash_b");
  DatasetSpec spec;
  spec.n_scenes = 6;
  spec.seed = 11;
  build_dataset(a, spec);
  build_dataset(b, spec);
  EXPECT_EQ(dataset_hash(a), dataset_hash(b));
  spec.seed = 12;
  build_dataset(b, spec);
  EXPECT_NE(dataset_hash(a), dataset_hash(b));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, LoadRoundTrip) {
  const auto dir = scratch_dir("roundtrip");
  DatasetSpec spec;
  spec.n_scenes = 5;
  spec.seed = 21;
  spec.split_ratios = {0.6, 0.2, 0.2};
  build_dataset(dir, spec);
  const auto ds = load_dataset(dir);
  ASSERT_EQ(ds.scenes.size(), 5u);
  EXPECT_EQ(ds.grid, grid_for(spec.scene, spec.cell_m));
  for (const auto& s : ds.scenes) {
    const auto map = gen_scene(s.seed, spec.scene);
    ASSERT_EQ(s.map.size(), map.size());
    for (std::size_t i = 0; i < map.size(); ++i) {
      EXPECT_EQ(s.map[i].cls, map[i].cls);
      EXPECT_EQ(s.map[i].poly.closed(), map[i].poly.closed());
      EXPECT_EQ(s.map[i].poly.vertices(), map[i].poly.vertices());
    }
    NoiseConfig nc = spec.noise;
    nc.seed = detail::splitmix64(s.seed);
    EXPECT_EQ(s.raster, rasterize_scene(map, ds.grid, nc));
  }
  fs::remove_all(dir);
}

TEST(Dataset, LoadErrorsNamePath) {
  const auto dir = scratch_dir("missing");
  try {
    load_dataset(dir);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest.json"), std::string::npos);
  }
  DatasetSpec spec;
  spec.n_scenes = 2;
  build_dataset(dir, spec);
  fs::resize_file(dir / "rasters" / "s00001.f32", 10);
  try {
    load_dataset(dir);
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("s00001"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(Dataset, RejectsBadSpec) {
  DatasetSpec spec;
  spec.split_ratios = {0.5, 0.4};
  EXPECT_THROW(build_dataset(scratch_dir("bad"), spec), ConfigError);
  spec.split_ratios = {0.25, 0.25, 0.25, 0.25};
  EXPECT_THROW(build_dataset(scratch_dir("bad"), spec), ConfigError);
}

}  // namespace
}  // namespace vmap
