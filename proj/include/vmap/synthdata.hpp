#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "geometry.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "raster.hpp"

namespace vmap {

struct CountRange {
  int lo = 0;
  int hi = 0;
};

struct SceneConfig {
  double extent_x = 30.0;
  double extent_y = 15.0;
  CountRange boundaries{1, 2};
  CountRange dividers{1, 2};
  CountRange crossings{0, 2};
  /// Standard deviation of the boundary heading change per control step, radians.
  double curvature = 0.25;
  double rdp_epsilon = 0.05;
  int max_vertices = 16;
  /// Vertices closer than this to the previously kept one are dropped.
  double min_spacing = 0.6;

  Point origin() const { return {-extent_x / 2.0, -extent_y / 2.0}; }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid scene config: " + what);
    };
    need(extent_x > 0.0 && extent_y > 0.0, "extent must be positive");
    need(extent_x >= 4.0 && extent_y >= 4.0, "extent must be at least 4 m per axis");
    for (const auto* r : {&boundaries, &dividers, &crossings}) need(r->lo >= 0 && r->hi >= r->lo, "count range");
    need(curvature >= 0.0, "curvature >= 0");
    need(rdp_epsilon >= 0.0, "rdp_epsilon >= 0");
    need(max_vertices >= 4, "max_vertices >= 4");
    need(min_spacing >= 0.0, "min_spacing >= 0");
  }
};

inline nlohmann::json to_json(const SceneConfig& c) {
  return {{"extent", {c.extent_x, c.extent_y}},
          {"boundaries", {c.boundaries.lo, c.boundaries.hi}},
          {"dividers", {c.dividers.lo, c.dividers.hi}},
          {"crossings", {c.crossings.lo, c.crossings.hi}},
          {"curvature", c.curvature},
          {"rdp_epsilon", c.rdp_epsilon},
          {"max_vertices", c.max_vertices},
          {"min_spacing", c.min_spacing}};
}

inline SceneConfig scene_config_from_json(const nlohmann::json& j) {
  SceneConfig c;
  auto range = [](const nlohmann::json& r) { return CountRange{r.at(0).get<int>(), r.at(1).get<int>()}; };
  c.extent_x = j.at("extent").at(0).get<double>();
  c.extent_y = j.at("extent").at(1).get<double>();
  c.boundaries = range(j.at("boundaries"));
  c.dividers = range(j.at("dividers"));
  c.crossings = range(j.at("crossings"));
  c.curvature = j.at("curvature").get<double>();
  c.rdp_epsilon = j.at("rdp_epsilon").get<double>();
  c.max_vertices = j.at("max_vertices").get<int>();
  c.min_spacing = j.at("min_spacing").get<double>();
  return c;
}

/// Raster grid covering the scene extent at `cell_m` resolution.
inline GridSpec grid_for(const SceneConfig& c, double cell_m) {
  return GridSpec{static_cast<int>(std::lround(c.extent_x / cell_m)), static_cast<int>(std::lround(c.extent_y / cell_m)),
                  cell_m, c.origin()};
}

namespace detail {

/// Bijective 64-bit mixer.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::vector<Point> chaikin(const std::vector<Point>& p, int rounds) {
  std::vector<Point> cur = p;
  for (int r = 0; r < rounds; ++r) {
    std::vector<Point> next{cur.front()};
    for (std::size_t i = 0; i + 1 < cur.size(); ++i) {
      next.push_back(lerp(cur[i], cur[i + 1], 0.25));
      next.push_back(lerp(cur[i], cur[i + 1], 0.75));
    }
    next.push_back(cur.back());
    cur = std::move(next);
  }
  return cur;
}

/// Keeps the endpoints and drops interior vertices nearer than `gap` to the
/// previous kept vertex or to the final one.
inline std::vector<Point> enforce_spacing(const std::vector<Point>& v, double gap) {
  std::vector<Point> out{v.front()};
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    if (distance(v[i], out.back()) >= gap && distance(v[i], v.back()) >= gap) out.push_back(v[i]);
  }
  out.push_back(v.back());
  return out;
}

/// RDP at the configured tolerance, growing it until the vertex cap holds.
inline Polyline simplify_capped(const Polyline& p, const SceneConfig& c) {
  double eps = c.rdp_epsilon;
  Polyline out = rdp_simplify(p, eps);
  const std::size_t cap = static_cast<std::size_t>(c.max_vertices) + (p.closed() ? 1 : 0);
  while (out.size() > cap) {
    eps = std::max(2.0 * eps, 0.01);
    out = rdp_simplify(p, eps);
  }
  return out;
}

}  // namespace detail

/// Procedural scene. Boundaries run left to right across the extent,
/// dividers lie near and roughly parallel to a boundary, crossings are convex
/// quadrilaterals straddling a divider.
inline VectorMap gen_scene(std::uint64_t seed, const SceneConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double a, double b) { return a + (b - a) * unit(rng); };
  auto count = [&](CountRange r) { return std::uniform_int_distribution<int>(r.lo, r.hi)(rng); };
  std::normal_distribution<double> gauss(0.0, 1.0);

  const Point o = cfg.origin();
  const double margin = 0.5;
  const double x0 = o.x + margin, x1 = o.x + cfg.extent_x - margin;
  const double y0 = o.y + margin, y1 = o.y + cfg.extent_y - margin;
  auto clamp_pt = [&](Point p) { return Point{std::clamp(p.x, x0, x1), std::clamp(p.y, y0, y1)}; };

  VectorMap map;
  auto emit_open = [&](ElementClass cls, std::vector<Point> pts) {
    for (auto& p : pts) p = clamp_pt(p);
    pts = dedupe_consecutive(pts);
    if (pts.size() < 2) return;
    Polyline simplified = detail::simplify_capped(Polyline(std::move(pts), false), cfg);
    auto spaced = detail::enforce_spacing(simplified.vertices(), cfg.min_spacing);
    if (spaced.size() < 2 || distance(spaced.front(), spaced.back()) < cfg.min_spacing) return;
    map.push_back({cls, Polyline(std::move(spaced), false)});
  };

  // Boundaries: smoothed random walks in heading.
  std::vector<std::vector<Point>> boundary_lines;
  const int nb = count(cfg.boundaries);
  for (int b = 0; b < nb; ++b) {
    const int ctrl = 6;
    const double step = (x1 - x0) / (ctrl - 1);
    double y = uniform(y0 + 1.0, y1 - 1.0);
    double heading = uniform(-0.2, 0.2);
    std::vector<Point> pts{{x0, y}};
    for (int i = 1; i < ctrl; ++i) {
      heading = std::clamp(heading + cfg.curvature * gauss(rng), -0.6, 0.6);
      y = std::clamp(y + step * std::tan(heading), y0, y1);
      // Bounce off the frame so the curve stays inside.
      if (y <= y0 || y >= y1) heading = -heading;
      pts.push_back({x0 + step * i, y});
    }
    auto smooth = detail::chaikin(pts, 3);
    boundary_lines.push_back(smooth);
    emit_open(ElementClass::kBoundary, std::move(smooth));
  }

  // Dividers: offset copies of a boundary segment, straightened.
  std::vector<std::vector<Point>> divider_lines;
  const int nd = count(cfg.dividers);
  for (int d = 0; d < nd; ++d) {
    const double len = uniform(0.4, 0.9) * (x1 - x0);
    const double start = uniform(x0, x1 - len);
    double base = uniform(y0 + 1.0, y1 - 1.0), slope = 0.0;
    if (!boundary_lines.empty()) {
      const auto& bl = boundary_lines[static_cast<std::size_t>(d) % boundary_lines.size()];
      auto y_at = [&](double x) {
        for (std::size_t i = 1; i < bl.size(); ++i) {
          if (bl[i].x >= x) {
            const double t = (x - bl[i - 1].x) / std::max(bl[i].x - bl[i - 1].x, 1e-9);
            return bl[i - 1].y + t * (bl[i].y - bl[i - 1].y);
          }
        }
        return bl.back().y;
      };
      const double ya = y_at(start), yb = y_at(start + len);
      double off = uniform(2.0, 4.0) * (unit(rng) < 0.5 ? -1.0 : 1.0);
      const double mid = 0.5 * (ya + yb);
      if (mid + off < y0 + 0.5 || mid + off > y1 - 0.5) off = -off;
      base = mid + off;
      slope = (yb - ya) / len;
    }
    std::vector<Point> pts;
    const int n = 4;
    for (int i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / (n - 1);
      const double x = start + t * len;
      pts.push_back({x, base + slope * (x - start - 0.5 * len) + 0.05 * gauss(rng)});
    }
    divider_lines.push_back(pts);
    emit_open(ElementClass::kDivider, std::move(pts));
  }

  // Crossings: jittered rectangles centred on a divider point.
  const int nc = count(cfg.crossings);
  for (int c = 0; c < nc; ++c) {
    Point centre{uniform(x0 + 2.0, x1 - 2.0), uniform(y0 + 2.5, y1 - 2.5)};
    if (!divider_lines.empty()) {
      const auto& dl = divider_lines[static_cast<std::size_t>(c) % divider_lines.size()];
      const double t = uniform(0.2, 0.8);
      centre = lerp(dl.front(), dl.back(), t);
    }
    const double hw = uniform(1.0, 1.6), hh = uniform(2.0, 3.0);
    std::vector<Point> ring{{centre.x - hw, centre.y - hh}, {centre.x + hw, centre.y - hh},
                            {centre.x + hw, centre.y + hh}, {centre.x - hw, centre.y + hh}};
    for (auto& p : ring) p = clamp_pt({p.x + 0.2 * gauss(rng), p.y + 0.2 * gauss(rng)});
    // Small jitter keeps a rectangle convex; reject anything degenerate.
    double area2 = 0.0;
    for (std::size_t i = 0; i < ring.size(); ++i) {
      const auto& a = ring[i];
      const auto& b = ring[(i + 1) % ring.size()];
      area2 += a.x * b.y - b.x * a.y;
    }
    if (std::abs(area2) < 2.0) continue;
    map.push_back({ElementClass::kPedCrossing, canonicalize_closed(ring)});
  }
  return map;
}

struct NoiseConfig {
  double stroke_cells = 2.0;
  double sigma = 0.05;
  int occlusions = 2;
  double max_occlusion_frac = 0.15;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const NoiseConfig& n) {
  return {{"stroke_cells", n.stroke_cells},
          {"sigma", n.sigma},
          {"occlusions", n.occlusions},
          {"max_occlusion_frac", n.max_occlusion_frac}};
}

/// Anti-aliased strokes per class channel: a cell at distance d (in cells)
/// from the polyline gets coverage clamp(w/2 + 0.5 - d, 0, 1).
inline BevRaster rasterize_scene(const VectorMap& map, const GridSpec& g, const NoiseConfig& nc) {
  g.validate();
  BevRaster r(kNumElementClasses, g.height_cells, g.width_cells);
  const double reach = nc.stroke_cells / 2.0 + 0.5;
  for (const auto& e : map) {
    const int ch = static_cast<int>(e.cls);
    const auto& v = e.poly.vertices();
    for (std::size_t i = 0; i + 1 < v.size(); ++i) {
      // Segment in cell units.
      const Point a{(v[i].x - g.origin.x) / g.cell_m, (v[i].y - g.origin.y) / g.cell_m};
      const Point b{(v[i + 1].x - g.origin.x) / g.cell_m, (v[i + 1].y - g.origin.y) / g.cell_m};
      const int cx0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - reach)));
      const int cx1 = std::min(g.width_cells - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + reach)));
      const int cy0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - reach)));
      const int cy1 = std::min(g.height_cells - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + reach)));
      for (int y = cy0; y <= cy1; ++y) {
        for (int x = cx0; x <= cx1; ++x) {
          const double d = segment_distance({x + 0.5, y + 0.5}, a, b);
          const double cov = std::clamp(reach - d, 0.0, 1.0);
          float& cell = r.at(ch, y, x);
          cell = std::max(cell, static_cast<float>(cov));
        }
      }
    }
  }
  std::mt19937_64 rng(nc.seed);
  if (nc.sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, nc.sigma);
    for (auto& v : r.data) v = static_cast<float>(v + noise(rng));
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double frac = std::clamp(nc.max_occlusion_frac, 0.0, 1.0);
  for (int k = 0; k < nc.occlusions && frac > 0.0; ++k) {
    // Area fraction fw * fh <= frac by construction.
    const double fw = std::min(1.0, 0.1 + 0.3 * unit(rng));
    const double fh = std::min(1.0, frac / fw) * (0.3 + 0.7 * unit(rng));
    const int w = static_cast<int>(std::floor(fw * g.width_cells));
    const int h = static_cast<int>(std::floor(fh * g.height_cells));
    const int ox = static_cast<int>(unit(rng) * (g.width_cells - w + 1));
    const int oy = static_cast<int>(unit(rng) * (g.height_cells - h + 1));
    for (int c = 0; c < r.channels; ++c)
      for (int y = oy; y < std::min(oy + h, g.height_cells); ++y)
        for (int x = ox; x < std::min(ox + w, g.width_cells); ++x) r.at(c, y, x) = 0.0f;
  }
  for (auto& v : r.data) v = std::clamp(v, 0.0f, 1.0f);
  return r;
}

// ---------------------------------------------------------------------------
// Dataset files

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DatasetError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw DatasetError("cannot write " + p.string());
  os << text;
  if (!os) throw DatasetError("write failed for " + p.string());
}

inline nlohmann::json grid_json(const GridSpec& g) {
  return {{"width_cells", g.width_cells}, {"height_cells", g.height_cells}, {"cell_m", g.cell_m},
          {"origin", {g.origin.x, g.origin.y}}};
}

inline GridSpec grid_from_json(const nlohmann::json& j) {
  return GridSpec{j.at("width_cells").get<int>(), j.at("height_cells").get<int>(), j.at("cell_m").get<double>(),
                  {j.at("origin").at(0).get<double>(), j.at("origin").at(1).get<double>()}};
}

inline void write_raster(const std::filesystem::path& dir, const std::string& id, const BevRaster& r) {
  std::string bytes(r.data.size() * 4, '\0');
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    const auto le = detail::to_little(std::bit_cast<std::uint32_t>(r.data[i]));
    std::memcpy(bytes.data() + 4 * i, &le, 4);
  }
  write_text(dir / (id + ".f32"), bytes);
  const nlohmann::json hdr{{"channels", r.channels}, {"height", r.height}, {"width", r.width}, {"dtype", "f32le"},
                           {"layout", "CHW"}};
  write_text(dir / (id + ".hdr.json"), hdr.dump(2));
}

inline BevRaster read_raster(const std::filesystem::path& dir, const std::string& id) {
  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(read_text(dir / (id + ".hdr.json")));
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed raster header " + (dir / (id + ".hdr.json")).string() + ": " + e.what());
  }
  BevRaster r(hdr.at("channels").get<int>(), hdr.at("height").get<int>(), hdr.at("width").get<int>());
  const auto path = dir / (id + ".f32");
  const std::string bytes = read_text(path);
  if (bytes.size() != r.data.size() * 4) {
    throw DatasetError(path.string() + " holds " + std::to_string(bytes.size()) + " bytes, header implies " +
                       std::to_string(r.data.size() * 4));
  }
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    std::uint32_t le;
    std::memcpy(&le, bytes.data() + 4 * i, 4);
    r.data[i] = std::bit_cast<float>(detail::to_little(le));
  }
  return r;
}

struct SceneRecord {
  std::string id;
  std::string split;
  std::uint64_t seed = 0;
  VectorMap map;
  BevRaster raster;
};

struct Dataset {
  std::filesystem::path root;
  nlohmann::json manifest;
  GridSpec grid;
  std::vector<SceneRecord> scenes;

  std::vector<const SceneRecord*> split(const std::string& name) const {
    std::vector<const SceneRecord*> out;
    for (const auto& s : scenes) {
      if (s.split == name) out.push_back(&s);
    }
    return out;
  }
};

struct DatasetSpec {
  int n_scenes = 10;
  std::uint64_t seed = 0;
  std::vector<double> split_ratios{0.8, 0.2};
  SceneConfig scene;
  double cell_m = 0.3;
  NoiseConfig noise;
};

inline std::vector<std::string> split_names(std::size_t n) {
  if (n == 1) return {"train"};
  if (n == 2) return {"train", "val"};
  if (n == 3) return {"train", "val", "test"};
  throw ConfigError("expected 1 to 3 split ratios, got " + std::to_string(n));
}

/// Writes manifest.json, scenes/<id>.json and rasters/<id>.{f32,hdr.json}.
/// Scene i gets seed splitmix64(seed + i), so splits never share a seed.
inline void build_dataset(const std::filesystem::path& out, const DatasetSpec& spec) {
  if (spec.n_scenes < 0) throw ConfigError("scene count must be non-negative");
  spec.scene.validate();
  double total = 0.0;
  for (double r : spec.split_ratios) {
    if (r < 0.0) throw ConfigError("split ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  const auto names = split_names(spec.split_ratios.size());
  const GridSpec g = grid_for(spec.scene, spec.cell_m);
  g.validate();

  std::error_code ec;
  std::filesystem::create_directories(out / "scenes", ec);
  std::filesystem::create_directories(out / "rasters", ec);
  if (ec) throw DatasetError("cannot create dataset directories under " + out.string() + ": " + ec.message());

  std::vector<int> bounds{0};
  double cum = 0.0;
  for (double r : spec.split_ratios) {
    cum += r;
    bounds.push_back(static_cast<int>(std::lround(cum * spec.n_scenes)));
  }
  bounds.back() = spec.n_scenes;

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["seed"] = spec.seed;
  manifest["n_scenes"] = spec.n_scenes;
  manifest["split_ratios"] = spec.split_ratios;
  manifest["grid"] = grid_json(g);
  manifest["scene_config"] = to_json(spec.scene);
  manifest["noise"] = to_json(spec.noise);
  manifest["splits"] = nlohmann::json::object();
  for (const auto& n : names) manifest["splits"][n] = nlohmann::json::array();
  manifest["scenes"] = nlohmann::json::array();
  for (int i = 0; i < spec.n_scenes; ++i) {
    std::size_t s = 0;
    while (i >= bounds[s + 1]) ++s;
    char id[16];
    std::snprintf(id, sizeof id, "s%05d", i);
    const std::uint64_t scene_seed = detail::splitmix64(spec.seed + static_cast<std::uint64_t>(i));
    const VectorMap map = gen_scene(scene_seed, spec.scene);
    NoiseConfig nc = spec.noise;
    nc.seed = detail::splitmix64(scene_seed);
    write_text(out / "scenes" / (std::string(id) + ".json"), to_json(map).dump(2));
    write_raster(out / "rasters", id, rasterize_scene(map, g, nc));
    manifest["splits"][names[s]].push_back(id);
    manifest["scenes"].push_back({{"id", id}, {"split", names[s]}, {"seed", scene_seed}});
  }
  write_text(out / "manifest.json", manifest.dump(2));
}

inline Dataset load_dataset(const std::filesystem::path& root) {
  Dataset ds;
  ds.root = root;
  const auto mpath = root / "manifest.json";
  try {
    ds.manifest = nlohmann::json::parse(read_text(mpath));
    ds.grid = grid_from_json(ds.manifest.at("grid"));
    for (const auto& s : ds.manifest.at("scenes")) {
      SceneRecord rec;
      rec.id = s.at("id").get<std::string>();
      rec.split = s.at("split").get<std::string>();
      rec.seed = s.at("seed").get<std::uint64_t>();
      const auto spath = root / "scenes" / (rec.id + ".json");
      try {
        rec.map = map_from_json(nlohmann::json::parse(read_text(spath)));
      } catch (const nlohmann::json::exception& e) {
        throw DatasetError("malformed scene " + spath.string() + ": " + e.what());
      } catch (const GeometryError& e) {
        throw DatasetError("invalid geometry in " + spath.string() + ": " + e.what());
      }
      rec.raster = read_raster(root / "rasters", rec.id);
      if (rec.raster.height != ds.grid.height_cells || rec.raster.width != ds.grid.width_cells) {
        throw DatasetError("raster for " + rec.id + " does not match the manifest grid");
      }
      ds.scenes.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  return ds;
}

/// Hash of the manifest and every scene/raster file, in manifest order.
inline std::string dataset_hash(const std::filesystem::path& root) {
  std::string all = read_text(root / "manifest.json");
  const auto manifest = nlohmann::json::parse(all);
  for (const auto& s : manifest.at("scenes")) {
    const auto id = s.at("id").get<std::string>();
    all += read_text(root / "scenes" / (id + ".json"));
    all += read_text(root / "rasters" / (id + ".f32"));
  }
  return hex64(fnv1a64(all));
}

}  // namespace vmap
