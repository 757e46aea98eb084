#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "geometry.hpp"
#include "json.hpp"

namespace vmap {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class MetricKind { kChamfer, kFrechet };

inline std::string_view metric_name(MetricKind k) { return k == MetricKind::kChamfer ? "chamfer" : "frechet"; }

inline constexpr int kDefaultCurvePoints = 100;

// ---------------------------------------------------------------------------
// Curve distances

/// Symmetric mean nearest-neighbour distance between two raw point sets.
inline double chamfer_point_sets(std::span<const Point> a, std::span<const Point> b) {
  auto directed = [](std::span<const Point> from, std::span<const Point> to) {
    double total = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, distance(p, q));
      total += best;
    }
    return total / static_cast<double>(from.size());
  };
  return 0.5 * (directed(a, b) + directed(b, a));
}

inline double chamfer_distance(const Polyline& p, const Polyline& q, int n_pts = kDefaultCurvePoints) {
  if (n_pts < 2) throw GeometryError("chamfer_distance: n_pts must be >= 2");
  if (!(p.length() > 0.0) || !(q.length() > 0.0)) throw GeometryError("invalid polyline: zero arc length");
  const auto a = detail::uniform_samples(p.vertices(), n_pts);
  const auto b = detail::uniform_samples(q.vertices(), n_pts);
  return chamfer_point_sets(a, b);
}

/// Discrete Frechet distance over two vertex sequences. Bottom-up form of the
/// memoised coupling recurrence: ca(i,j) = max(min(ca(i-1,j), ca(i-1,j-1),
/// ca(i,j-1)), d(u_i, v_j)), with the first row/column running maxima.
inline double discrete_frechet(std::span<const Point> u, std::span<const Point> v) {
  const std::size_t p = u.size();
  const std::size_t q = v.size();
  if (p == 0 || q == 0) throw GeometryError("discrete_frechet: empty sequence");
  std::vector<double> ca(p * q);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return ca[i * q + j]; };
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < q; ++j) {
      const double d = distance(u[i], v[j]);
      if (i == 0 && j == 0) {
        at(i, j) = d;
      } else if (j == 0) {
        at(i, j) = std::max(at(i - 1, 0), d);
      } else if (i == 0) {
        at(i, j) = std::max(at(0, j - 1), d);
      } else {
        at(i, j) = std::max(std::min({at(i - 1, j), at(i - 1, j - 1), at(i, j - 1)}), d);
      }
    }
  }
  return at(p - 1, q - 1);
}

inline double frechet_distance(const Polyline& p, const Polyline& q, int m = kDefaultCurvePoints) {
  if (m < 2) throw GeometryError("frechet_distance: m must be >= 2");
  if (!(p.length() > 0.0) || !(q.length() > 0.0)) throw GeometryError("invalid polyline: zero arc length");
  const auto a = detail::uniform_samples(p.vertices(), m);
  const auto b = detail::uniform_samples(q.vertices(), m);
  return discrete_frechet(a, b);
}

/// Exhaustive enumeration of monotone couplings. Exponential; test oracle only.
inline double frechet_bruteforce(std::span<const Point> u, std::span<const Point> v) {
  if (u.empty() || v.empty()) throw GeometryError("frechet_bruteforce: empty sequence");
  if (u.size() > 8 || v.size() > 8) throw std::invalid_argument("frechet_bruteforce: sequences longer than 8");
  double best = std::numeric_limits<double>::infinity();
  // Walk every lattice path from (0,0) to (p-1,q-1) with steps (1,0),(0,1),(1,1).
  auto walk = [&](auto&& self, std::size_t i, std::size_t j, double running) -> void {
    running = std::max(running, distance(u[i], v[j]));
    if (i + 1 == u.size() && j + 1 == v.size()) {
      best = std::min(best, running);
      return;
    }
    if (i + 1 < u.size()) self(self, i + 1, j, running);
    if (j + 1 < v.size()) self(self, i, j + 1, running);
    if (i + 1 < u.size() && j + 1 < v.size()) self(self, i + 1, j + 1, running);
  };
  walk(walk, 0, 0, 0.0);
  return best;
}

inline double curve_distance(const Polyline& p, const Polyline& q, MetricKind kind, int n_pts = kDefaultCurvePoints) {
  return kind == MetricKind::kChamfer ? chamfer_distance(p, q, n_pts) : frechet_distance(p, q, n_pts);
}

// ---------------------------------------------------------------------------
// Average precision

struct ScoredPrediction {
  MapElement element;
  double score = 0.0;
  std::string scene_id;
};

struct SceneGroundTruth {
  std::string scene_id;
  VectorMap elements;
};

/// Area under the precision-recall curve with the monotone precision envelope.
/// `is_tp` must already be ordered by descending score.
inline double average_precision(const std::vector<bool>& is_tp, std::size_t n_gt) {
  if (n_gt == 0) return is_tp.empty() ? 1.0 : 0.0;
  if (is_tp.empty()) return 0.0;
  std::vector<double> precision(is_tp.size());
  std::vector<double> recall(is_tp.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < is_tp.size(); ++i) {
    if (is_tp[i]) ++tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  for (std::size_t i = precision.size() - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < is_tp.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

/// Ranked outcome of greedy matching for one class.
struct MatchOutcome {
  std::vector<bool> is_tp;        // in ranked order
  std::vector<double> distances;  // matched distance per TP, NaN for FP
};

/// Greedy score-ordered matching of one class's predictions to ground truth.
inline MatchOutcome match_predictions(std::span<const ScoredPrediction> preds, std::span<const SceneGroundTruth> gts,
                                      ElementClass cls, double threshold_m, MetricKind kind,
                                      int n_pts = kDefaultCurvePoints) {
  std::map<std::string, std::vector<const Polyline*>> gt_by_scene;
  for (const auto& scene : gts) {
    auto& slot = gt_by_scene[scene.scene_id];
    for (const auto& e : scene.elements) {
      if (e.cls == cls) slot.push_back(&e.poly);
    }
  }
  std::vector<const ScoredPrediction*> ranked;
  for (const auto& p : preds) {
    if (p.element.cls == cls) ranked.push_back(&p);
  }
  // Stable so equal scores keep input order.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const ScoredPrediction* a, const ScoredPrediction* b) { return a->score > b->score; });

  std::map<std::string, std::vector<bool>> used;
  for (const auto& [id, polys] : gt_by_scene) used[id].assign(polys.size(), false);

  MatchOutcome out;
  for (const auto* p : ranked) {
    auto it = gt_by_scene.find(p->scene_id);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = 0;
    if (it != gt_by_scene.end()) {
      auto& flags = used[p->scene_id];
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (flags[g]) continue;
        const double d = curve_distance(p->element.poly, *it->second[g], kind, n_pts);
        if (d < best) {
          best = d;
          best_idx = g;
        }
      }
      if (best <= threshold_m) {
        flags[best_idx] = true;
        out.is_tp.push_back(true);
        out.distances.push_back(best);
        continue;
      }
    }
    out.is_tp.push_back(false);
    out.distances.push_back(std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

inline double instance_ap(std::span<const ScoredPrediction> preds, std::span<const SceneGroundTruth> gts,
                          ElementClass cls, double threshold_m, MetricKind kind,
                          int n_pts = kDefaultCurvePoints) {
  std::size_t n_gt = 0;
  for (const auto& s : gts) {
    for (const auto& e : s.elements) n_gt += e.cls == cls ? 1 : 0;
  }
  const auto outcome = match_predictions(preds, gts, cls, threshold_m, kind, n_pts);
  return average_precision(outcome.is_tp, n_gt);
}

struct APReport {
  std::vector<double> thresholds;
  std::vector<MetricKind> kinds;
  /// ap[{kind, class, threshold index}]
  std::map<std::tuple<MetricKind, ElementClass, std::size_t>, double> ap;

  double at(MetricKind kind, ElementClass cls, std::size_t t) const { return ap.at({kind, cls, t}); }

  /// Mean over thresholds for one class.
  double class_ap(MetricKind kind, ElementClass cls) const {
    double s = 0.0;
    for (std::size_t t = 0; t < thresholds.size(); ++t) s += at(kind, cls, t);
    return s / static_cast<double>(thresholds.size());
  }

  double mean_ap(MetricKind kind) const {
    double s = 0.0;
    for (int c = 0; c < kNumElementClasses; ++c) s += class_ap(kind, static_cast<ElementClass>(c));
    return s / kNumElementClasses;
  }

  /// mAP restricted to a single threshold.
  double mean_ap_at(MetricKind kind, std::size_t t) const {
    double s = 0.0;
    for (int c = 0; c < kNumElementClasses; ++c) s += at(kind, static_cast<ElementClass>(c), t);
    return s / kNumElementClasses;
  }

  std::size_t threshold_index(double tau) const {
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (std::abs(thresholds[i] - tau) < 1e-12) return i;
    }
    throw std::out_of_range("threshold not in report");
  }
};

inline APReport evaluate_map_set(std::span<const ScoredPrediction> preds, std::span<const SceneGroundTruth> gts,
                                 std::vector<double> thresholds = {0.5, 1.0, 1.5},
                                 std::vector<MetricKind> kinds = {MetricKind::kChamfer, MetricKind::kFrechet},
                                 int n_pts = kDefaultCurvePoints) {
  std::map<std::string, int> ids;
  for (const auto& s : gts) {
    if (!ids.emplace(s.scene_id, 0).second) throw DatasetError("duplicate ground-truth scene id '" + s.scene_id + "'");
  }
  for (const auto& p : preds) {
    if (!ids.contains(p.scene_id)) throw DatasetError("prediction refers to unknown scene id '" + p.scene_id + "'");
  }
  APReport report;
  report.thresholds = std::move(thresholds);
  report.kinds = std::move(kinds);
  for (auto kind : report.kinds) {
    for (int c = 0; c < kNumElementClasses; ++c) {
      for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
        report.ap[{kind, static_cast<ElementClass>(c), t}] =
            instance_ap(preds, gts, static_cast<ElementClass>(c), report.thresholds[t], kind, n_pts);
      }
    }
  }
  return report;
}

inline nlohmann::json to_json(const APReport& r) {
  nlohmann::json j;
  j["thresholds"] = r.thresholds;
  for (auto kind : r.kinds) {
    nlohmann::json k;
    for (int c = 0; c < kNumElementClasses; ++c) {
      const auto cls = static_cast<ElementClass>(c);
      nlohmann::json per;
      for (std::size_t t = 0; t < r.thresholds.size(); ++t) per.push_back(r.at(kind, cls, t));
      k["ap"][std::string(class_name(cls))] = per;
    }
    k["mAP"] = r.mean_ap(kind);
    std::vector<double> per_t;
    for (std::size_t t = 0; t < r.thresholds.size(); ++t) per_t.push_back(r.mean_ap_at(kind, t));
    k["mAP_per_threshold"] = per_t;
    j[std::string(metric_name(kind))] = k;
  }
  return j;
}

/// Table with AP_ped / AP_divider / AP_boundary / mAP columns, values in
/// percent, one row per metric kind.
inline std::string format_table(const APReport& r) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %8s %11s %12s %8s\n", "metric", "AP_ped", "AP_divider", "AP_boundary", "mAP");
  out += buf;
  for (auto kind : r.kinds) {
    std::snprintf(buf, sizeof buf, "%-10s %8.1f %11.1f %12.1f %8.1f\n", std::string(metric_name(kind)).c_str(),
                  100.0 * r.class_ap(kind, ElementClass::kPedCrossing), 100.0 * r.class_ap(kind, ElementClass::kDivider),
                  100.0 * r.class_ap(kind, ElementClass::kBoundary), 100.0 * r.mean_ap(kind));
    out += buf;
  }
  return out;
}

}  // namespace vmap
