#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

namespace vmap {

class GeometryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
  friend Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
  friend Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
  friend Point operator*(double s, Point a) { return {s * a.x, s * a.y}; }
};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline Point lerp(Point a, Point b, double t) {
  return {a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t};
}

/// Distance from p to the closed segment [a, b]. Degenerate segments fall back
/// to the point distance.
inline double segment_distance(Point p, Point a, Point b) {
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  if (len2 == 0.0) return distance(p, a);
  const double t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  return distance(p, {a.x + t * dx, a.y + t * dy});
}

/// Ordered vertex chain in meters. Closed polylines repeat their first vertex
/// at the end.
class Polyline {
 public:
  Polyline() = default;

  explicit Polyline(std::vector<Point> vertices, bool closed = false)
      : vertices_(std::move(vertices)), closed_(closed) {
    validate();
  }

  const std::vector<Point>& vertices() const { return vertices_; }
  bool closed() const { return closed_; }
  std::size_t size() const { return vertices_.size(); }
  const Point& operator[](std::size_t i) const { return vertices_[i]; }
  const Point& front() const { return vertices_.front(); }
  const Point& back() const { return vertices_.back(); }

  double length() const {
    double total = 0.0;
    for (std::size_t i = 1; i < vertices_.size(); ++i) total += distance(vertices_[i - 1], vertices_[i]);
    return total;
  }

  Polyline reversed() const {
    std::vector<Point> v(vertices_.rbegin(), vertices_.rend());
    return Polyline(std::move(v), closed_);
  }

  friend bool operator==(const Polyline&, const Polyline&) = default;

 private:
  void validate() const {
    if (vertices_.size() < 2) throw GeometryError("invalid polyline: fewer than 2 vertices");
    for (const auto& p : vertices_) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw GeometryError("invalid polyline: non-finite vertex");
    }
    for (std::size_t i = 1; i < vertices_.size(); ++i) {
      if (vertices_[i] == vertices_[i - 1]) {
        throw GeometryError("invalid polyline: consecutive identical vertices at index " + std::to_string(i));
      }
    }
    if (closed_ && vertices_.front() != vertices_.back()) {
      throw GeometryError("invalid polyline: closed polyline must repeat its first vertex");
    }
  }

  std::vector<Point> vertices_;
  bool closed_ = false;
};

/// Drops consecutive duplicates; returns nullopt-like empty vector when fewer
/// than two distinct vertices remain.
inline std::vector<Point> dedupe_consecutive(std::span<const Point> pts) {
  std::vector<Point> out;
  out.reserve(pts.size());
  for (const auto& p : pts) {
    if (out.empty() || !(out.back() == p)) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Map elements

enum class ElementClass : int { kPedCrossing = 0, kDivider = 1, kBoundary = 2 };

inline constexpr int kNumElementClasses = 3;
/// Detector class index reserved for "no object".
inline constexpr int kNoObjectClass = 3;

inline std::string_view class_name(ElementClass c) {
  switch (c) {
    case ElementClass::kPedCrossing: return "crossing";
    case ElementClass::kDivider: return "divider";
    case ElementClass::kBoundary: return "boundary";
  }
  return "unknown";
}

inline ElementClass parse_class(std::string_view s) {
  if (s == "crossing" || s == "ped_crossing") return ElementClass::kPedCrossing;
  if (s == "divider") return ElementClass::kDivider;
  if (s == "boundary") return ElementClass::kBoundary;
  throw GeometryError("unknown element class '" + std::string(s) + "'");
}

struct MapElement {
  ElementClass cls = ElementClass::kDivider;
  Polyline poly;

  friend bool operator==(const MapElement&, const MapElement&) = default;
};

using VectorMap = std::vector<MapElement>;

inline nlohmann::json to_json(const MapElement& e) {
  nlohmann::json verts = nlohmann::json::array();
  for (const auto& p : e.poly.vertices()) verts.push_back({p.x, p.y});
  return {{"class", std::string(class_name(e.cls))}, {"closed", e.poly.closed()}, {"vertices", std::move(verts)}};
}

inline MapElement element_from_json(const nlohmann::json& j) {
  std::vector<Point> pts;
  for (const auto& v : j.at("vertices")) pts.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
  return {parse_class(j.at("class").get<std::string>()), Polyline(std::move(pts), j.at("closed").get<bool>())};
}

inline nlohmann::json to_json(const VectorMap& m) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : m) arr.push_back(to_json(e));
  return arr;
}

inline VectorMap map_from_json(const nlohmann::json& j) {
  VectorMap m;
  for (const auto& e : j) m.push_back(element_from_json(e));
  return m;
}

// ---------------------------------------------------------------------------
// Simplification and resampling

/// Ramer-Douglas-Peucker. Deviation is measured to the replacing segment.
inline Polyline rdp_simplify(const Polyline& poly, double epsilon_m) {
  if (epsilon_m < 0.0) throw GeometryError("rdp_simplify: negative epsilon");
  const auto& v = poly.vertices();
  const std::size_t n = v.size();
  std::vector<bool> keep(n, false);
  keep.front() = keep.back() = true;

  std::vector<std::pair<std::size_t, std::size_t>> stack;
  if (poly.closed()) {
    // Start and end coincide, so anchor on the vertex farthest from the start.
    std::size_t far = 1;
    for (std::size_t i = 1; i + 1 < n; ++i) {
      if (distance(v[i], v[0]) > distance(v[far], v[0])) far = i;
    }
    keep[far] = true;
    stack.emplace_back(0, far);
    stack.emplace_back(far, n - 1);
  } else {
    stack.emplace_back(0, n - 1);
  }

  while (!stack.empty()) {
    auto [lo, hi] = stack.back();
    stack.pop_back();
    if (hi <= lo + 1) continue;
    double worst = -1.0;
    std::size_t idx = lo;
    for (std::size_t i = lo + 1; i < hi; ++i) {
      const double d = segment_distance(v[i], v[lo], v[hi]);
      if (d > worst) {
        worst = d;
        idx = i;
      }
    }
    if (worst > epsilon_m) {
      keep[idx] = true;
      stack.emplace_back(lo, idx);
      stack.emplace_back(idx, hi);
    }
  }

  std::vector<Point> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) out.push_back(v[i]);
  }
  return Polyline(std::move(out), poly.closed());
}

struct Uniform {
  int n = 100;
};
struct FixedInterval {
  double d_m = 1.0;
};
struct Curvature {
  double theta_rad = 5.0 * 3.14159265358979323846 / 180.0;
};
using SamplingStrategy = std::variant<Uniform, FixedInterval, Curvature>;

namespace detail {

/// Point at arc length s along v, given cumulative lengths.
inline Point point_at(std::span<const Point> v, std::span<const double> cum, double s) {
  if (s <= 0.0) return v.front();
  if (s >= cum.back()) return v.back();
  const auto it = std::upper_bound(cum.begin(), cum.end(), s);
  const std::size_t hi = static_cast<std::size_t>(it - cum.begin());
  const std::size_t lo = hi - 1;
  const double seg = cum[hi] - cum[lo];
  const double t = seg > 0.0 ? (s - cum[lo]) / seg : 0.0;
  return lerp(v[lo], v[hi], t);
}

inline std::vector<double> cumulative_lengths(std::span<const Point> v) {
  std::vector<double> cum(v.size(), 0.0);
  for (std::size_t i = 1; i < v.size(); ++i) cum[i] = cum[i - 1] + distance(v[i - 1], v[i]);
  return cum;
}

/// Equal arc-length samples, both endpoints included exactly. Works on raw
/// point chains so the metrics can reuse it.
inline std::vector<Point> uniform_samples(std::span<const Point> v, int n) {
  const auto cum = cumulative_lengths(v);
  std::vector<Point> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (i == 0) {
      out.push_back(v.front());
    } else if (i == n - 1) {
      out.push_back(v.back());
    } else {
      out.push_back(point_at(v, cum, cum.back() * static_cast<double>(i) / static_cast<double>(n - 1)));
    }
  }
  return out;
}

}  // namespace detail

inline Polyline resample(const Polyline& poly, const SamplingStrategy& strategy) {
  const auto& v = poly.vertices();
  const double total = poly.length();
  if (!(total > 0.0)) throw GeometryError("invalid polyline: zero arc length");

  if (const auto* u = std::get_if<Uniform>(&strategy)) {
    if (u->n < 2) throw GeometryError("resample: uniform count must be >= 2");
    return Polyline(dedupe_consecutive(detail::uniform_samples(v, u->n)), poly.closed());
  }
  if (const auto* f = std::get_if<FixedInterval>(&strategy)) {
    if (!(f->d_m > 0.0)) throw GeometryError("resample: interval must be positive");
    const auto cum = detail::cumulative_lengths(v);
    std::vector<Point> out;
    for (std::size_t i = 0;; ++i) {
      const double s = static_cast<double>(i) * f->d_m;
      if (s >= total) break;
      out.push_back(detail::point_at(v, cum, s));
    }
    out.push_back(v.back());
    return Polyline(dedupe_consecutive(out), poly.closed());
  }
  const double theta = std::get<Curvature>(strategy).theta_rad;
  if (!(theta > 0.0)) throw GeometryError("resample: curvature threshold must be positive");
  std::vector<Point> out{v.front()};
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    const Point a = v[i] - v[i - 1];
    const Point b = v[i + 1] - v[i];
    const double turn = std::abs(std::atan2(a.x * b.y - a.y * b.x, a.x * b.x + a.y * b.y));
    if (turn > theta) out.push_back(v[i]);
  }
  out.push_back(v.back());
  return Polyline(std::move(out), poly.closed());
}

/// Closed polygon canonical form: counter-clockwise, starting at the
/// lexicographically smallest vertex, first vertex repeated at the end.
inline Polyline canonicalize_closed(std::span<const Point> ring_in) {
  std::vector<Point> ring = dedupe_consecutive(ring_in);
  if (ring.size() >= 2 && ring.front() == ring.back()) ring.pop_back();
  if (ring.size() < 3) throw GeometryError("invalid polygon: fewer than 3 distinct vertices");
  double area2 = 0.0;
  for (std::size_t i = 0; i < ring.size(); ++i) {
    const Point& a = ring[i];
    const Point& b = ring[(i + 1) % ring.size()];
    area2 += a.x * b.y - b.x * a.y;
  }
  if (area2 < 0.0) std::reverse(ring.begin(), ring.end());
  const auto start = std::min_element(ring.begin(), ring.end(), [](Point a, Point b) {
    return a.x < b.x || (a.x == b.x && a.y < b.y);
  });
  std::rotate(ring.begin(), start, ring.end());
  ring.push_back(ring.front());
  return Polyline(std::move(ring), true);
}

// ---------------------------------------------------------------------------
// Keypoints

enum class KeypointRepr { kBbox, kSme, kExtreme };

inline constexpr int keypoint_count(KeypointRepr r) {
  switch (r) {
    case KeypointRepr::kBbox: return 2;
    case KeypointRepr::kSme: return 3;
    case KeypointRepr::kExtreme: return 4;
  }
  return 0;
}

inline std::string_view repr_name(KeypointRepr r) {
  switch (r) {
    case KeypointRepr::kBbox: return "bbox";
    case KeypointRepr::kSme: return "sme";
    case KeypointRepr::kExtreme: return "extreme";
  }
  return "unknown";
}

inline KeypointRepr parse_repr(std::string_view s) {
  if (s == "bbox" || s == "BBOX") return KeypointRepr::kBbox;
  if (s == "sme" || s == "SME") return KeypointRepr::kSme;
  if (s == "extreme" || s == "EXTREME") return KeypointRepr::kExtreme;
  throw GeometryError("unknown keypoint representation '" + std::string(s) + "'");
}

struct KeypointSet {
  KeypointRepr kind = KeypointRepr::kBbox;
  std::vector<Point> points;

  friend bool operator==(const KeypointSet&, const KeypointSet&) = default;
};

inline KeypointSet extract_keypoints(const Polyline& poly, KeypointRepr kind) {
  const auto& v = poly.vertices();
  KeypointSet out{kind, {}};
  switch (kind) {
    case KeypointRepr::kBbox: {
      Point lo = v.front();
      Point hi = v.front();
      for (const auto& p : v) {
        lo = {std::min(lo.x, p.x), std::min(lo.y, p.y)};
        hi = {std::max(hi.x, p.x), std::max(hi.y, p.y)};
      }
      out.points = {lo, hi};
      break;
    }
    case KeypointRepr::kSme: {
      const auto cum = detail::cumulative_lengths(v);
      out.points = {v.front(), detail::point_at(v, cum, 0.5 * cum.back()), v.back()};
      break;
    }
    case KeypointRepr::kExtreme: {
      // Strict comparisons keep the earliest vertex on ties.
      std::size_t left = 0, right = 0, top = 0, bottom = 0;
      for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i].x < v[left].x) left = i;
        if (v[i].x > v[right].x) right = i;
        if (v[i].y > v[top].y) top = i;
        if (v[i].y < v[bottom].y) bottom = i;
      }
      out.points = {v[left], v[right], v[top], v[bottom]};
      break;
    }
  }
  return out;
}

struct Box {
  Point lo;
  Point hi;
};

inline Box enclosing_box(std::span<const Point> pts) {
  Box b{pts.front(), pts.front()};
  for (const auto& p : pts) {
    b.lo = {std::min(b.lo.x, p.x), std::min(b.lo.y, p.y)};
    b.hi = {std::max(b.hi.x, p.x), std::max(b.hi.y, p.y)};
  }
  return b;
}

/// Smallest area used for IoU so degenerate (zero-area) boxes stay defined.
inline constexpr double kMinBoxArea = 0.01 * 0.01;

inline double box_iou(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.hi.x, b.hi.x) - std::max(a.lo.x, b.lo.x));
  const double ih = std::max(0.0, std::min(a.hi.y, b.hi.y) - std::max(a.lo.y, b.lo.y));
  const double inter = iw * ih;
  const double area_a = std::max((a.hi.x - a.lo.x) * (a.hi.y - a.lo.y), kMinBoxArea);
  const double area_b = std::max((b.hi.x - b.lo.x) * (b.hi.y - b.lo.y), kMinBoxArea);
  return inter / (area_a + area_b - inter);
}

inline double bbox_iou(const KeypointSet& a, const KeypointSet& b) {
  return box_iou(enclosing_box(a.points), enclosing_box(b.points));
}

// ---------------------------------------------------------------------------
// Quantization and tokens

struct GridSpec {
  int width_cells = 200;
  int height_cells = 100;
  double cell_m = 0.3;
  Point origin{-30.0, -15.0};

  void validate() const {
    if (width_cells < 2 || height_cells < 2 || !(cell_m > 0.0)) {
      throw GeometryError("invalid grid spec");
    }
  }
  double extent_x() const { return width_cells * cell_m; }
  double extent_y() const { return height_cells * cell_m; }
  /// Coordinate vocabulary size; also the EOS token id.
  int vocab() const { return std::max(width_cells, height_cells); }
  int eos() const { return vocab(); }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

struct CellIndex {
  int tx = 0;
  int ty = 0;
  friend bool operator==(const CellIndex&, const CellIndex&) = default;
};

inline int quantize_axis(double v, double lo, double cell, int n) {
  const double f = std::floor((v - lo) / cell);
  if (!(f >= 0.0)) return 0;  // also catches NaN
  if (f > n - 1) return n - 1;
  return static_cast<int>(f);
}

inline CellIndex quantize_vertex(Point p, const GridSpec& g) {
  return {quantize_axis(p.x, g.origin.x, g.cell_m, g.width_cells),
          quantize_axis(p.y, g.origin.y, g.cell_m, g.height_cells)};
}

inline Point dequantize_vertex(int tx, int ty, const GridSpec& g) {
  return {g.origin.x + (tx + 0.5) * g.cell_m, g.origin.y + (ty + 0.5) * g.cell_m};
}

struct VertexTokenSeq {
  std::vector<int> tokens;
  friend bool operator==(const VertexTokenSeq&, const VertexTokenSeq&) = default;
};

/// Closed polylines drop their repeated last vertex; decoding restores it.
inline VertexTokenSeq flatten_to_tokens(const Polyline& poly, const GridSpec& g, int max_vertices) {
  const auto& v = poly.vertices();
  const std::size_t n = poly.closed() ? v.size() - 1 : v.size();
  if (static_cast<int>(n) > max_vertices) {
    throw GeometryError("polyline has " + std::to_string(n) + " vertices, limit is " + std::to_string(max_vertices));
  }
  VertexTokenSeq seq;
  seq.tokens.reserve(2 * n + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = quantize_vertex(v[i], g);
    seq.tokens.push_back(c.tx);
    seq.tokens.push_back(c.ty);
  }
  seq.tokens.push_back(g.eos());
  return seq;
}

inline Polyline tokens_to_polyline(const VertexTokenSeq& seq, const GridSpec& g, bool closed = false) {
  const auto& t = seq.tokens;
  const int eos = g.eos();
  if (t.empty() || t.back() != eos) throw DecodeError("token sequence must end with EOS");
  const std::size_t ncoord = t.size() - 1;
  if (ncoord % 2 != 0) throw DecodeError("odd number of coordinate tokens");
  std::vector<Point> pts;
  for (std::size_t i = 0; i < ncoord; i += 2) {
    const int tx = t[i];
    const int ty = t[i + 1];
    if (tx < 0 || tx >= g.width_cells || ty < 0 || ty >= g.height_cells) {
      throw DecodeError("coordinate token out of range at position " + std::to_string(i));
    }
    pts.push_back(dequantize_vertex(tx, ty, g));
  }
  if (closed && !pts.empty()) pts.push_back(pts.front());
  pts = dedupe_consecutive(pts);
  if (closed && pts.size() < 3) throw DecodeError("closed polyline needs at least 2 distinct vertices");
  if (pts.size() < 2) throw DecodeError("sequence decodes to fewer than 2 distinct vertices");
  return Polyline(std::move(pts), closed);
}

}  // namespace vmap
