#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "tensor.hpp"

namespace vmap {

class MatrixError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Square cost matrix, row-major. Rows are predictions (queries), columns are
/// ground-truth slots padded with no-object entries.
struct CostMatrix {
  std::size_t n = 0;
  std::vector<double> entries;

  double operator()(std::size_t row, std::size_t col) const { return entries[row * n + col]; }
  double& operator()(std::size_t row, std::size_t col) { return entries[row * n + col]; }
};

struct Assignment {
  /// query_for_slot[j] = index of the prediction assigned to column j.
  std::vector<std::size_t> query_for_slot;
  /// slot_for_query[i] = column assigned to prediction i.
  std::vector<std::size_t> slot_for_query;
  double cost = 0.0;
};

/// Minimum-cost perfect matching (Kuhn-Munkres with row/column potentials),
/// O(n^3).
inline Assignment hungarian(const CostMatrix& c) {
  if (c.entries.size() != c.n * c.n) {
    throw MatrixError("hungarian: matrix is not square (" + std::to_string(c.entries.size()) + " entries for n=" +
                      std::to_string(c.n) + ")");
  }
  for (double v : c.entries) {
    if (!std::isfinite(v)) throw MatrixError("hungarian: non-finite cost entry");
  }
  const std::size_t n = c.n;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials; column 0 is a virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> row_of_col(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    row_of_col[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = row_of_col[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      row_of_col[j0] = row_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment a;
  a.query_for_slot.resize(n);
  a.slot_for_query.resize(n);
  for (std::size_t j = 1; j <= n; ++j) {
    a.query_for_slot[j - 1] = row_of_col[j] - 1;
    a.slot_for_query[row_of_col[j] - 1] = j - 1;
    a.cost += c(row_of_col[j] - 1, j - 1);
  }
  return a;
}

/// Mean over coordinates of 0.5 d^2 / beta (|d| < beta) or |d| - 0.5 beta.
inline double smooth_l1(std::span<const double> pred, std::span<const double> target, double beta = 1.0) {
  if (pred.size() != target.size()) {
    throw std::invalid_argument("smooth_l1: length mismatch " + std::to_string(pred.size()) + " vs " +
                                std::to_string(target.size()));
  }
  if (pred.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = std::abs(pred[i] - target[i]);
    total += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
  }
  return total / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Detector set loss

inline constexpr double kClassCoef = 2.0;
inline constexpr double kL1Coef = 0.1;
inline constexpr double kIouCoef = 1.0;
/// Down-weighting of the no-object classification term.
inline constexpr double kNoObjectWeight = 0.1;
inline constexpr int kNumDetectorClasses = kNumElementClasses + 1;

/// Detector output as plain numbers: per query, k keypoints in meters and
/// class logits over {ped_crossing, divider, boundary, no-object}.
struct DetectionSet {
  KeypointRepr kind = KeypointRepr::kBbox;
  std::vector<KeypointSet> keypoints;
  std::vector<std::array<double, kNumDetectorClasses>> logits;

  std::size_t size() const { return keypoints.size(); }

  std::array<double, kNumDetectorClasses> probs(std::size_t i) const {
    std::array<double, kNumDetectorClasses> p{};
    double mx = -std::numeric_limits<double>::infinity();
    for (double l : logits[i]) mx = std::max(mx, l);
    double s = 0.0;
    for (int c = 0; c < kNumDetectorClasses; ++c) s += (p[c] = std::exp(logits[i][c] - mx));
    for (auto& x : p) x /= s;
    return p;
  }

  /// Highest probability among the real classes.
  double score(std::size_t i) const {
    const auto p = probs(i);
    return std::max({p[0], p[1], p[2]});
  }

  ElementClass label(std::size_t i) const {
    const auto p = probs(i);
    int best = 0;
    for (int c = 1; c < kNumElementClasses; ++c) {
      if (p[c] > p[best]) best = c;
    }
    return static_cast<ElementClass>(best);
  }
};

struct GtElement {
  ElementClass cls;
  KeypointSet keypoints;
};

namespace detail {

inline std::vector<double> flat_coords(const KeypointSet& k) {
  std::vector<double> out;
  out.reserve(2 * k.points.size());
  for (const auto& p : k.points) {
    out.push_back(p.x);
    out.push_back(p.y);
  }
  return out;
}

inline void check_repr(const DetectionSet& preds, const std::vector<GtElement>& gts) {
  for (const auto& g : gts) {
    if (g.keypoints.kind != preds.kind) throw std::invalid_argument("keypoint representation mismatch");
  }
  if (gts.size() > preds.size()) {
    throw std::invalid_argument("more ground-truth elements (" + std::to_string(gts.size()) + ") than queries (" +
                                std::to_string(preds.size()) + ")");
  }
}

}  // namespace detail

/// Geometric part of the cost/loss for a real element.
inline double keypoint_cost(const KeypointSet& gt, const KeypointSet& pred) {
  return kL1Coef * smooth_l1(detail::flat_coords(pred), detail::flat_coords(gt)) +
         kIouCoef * (1.0 - bbox_iou(gt, pred));
}

/// Columns [0, gts.size()) hold real elements; the rest are no-object slots,
/// which cost kNoObjectWeight * -log p(no-object).
inline CostMatrix pairwise_match_cost(const DetectionSet& preds, const std::vector<GtElement>& gts) {
  detail::check_repr(preds, gts);
  const std::size_t n = preds.size();
  CostMatrix c{n, std::vector<double>(n * n)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = preds.probs(i);
    for (std::size_t j = 0; j < n; ++j) {
      if (j < gts.size()) {
        const int l = static_cast<int>(gts[j].cls);
        c(i, j) = kClassCoef * -std::log(p[l]) + keypoint_cost(gts[j].keypoints, preds.keypoints[i]);
      } else {
        c(i, j) = kNoObjectWeight * -std::log(p[kNoObjectClass]);
      }
    }
  }
  return c;
}

/// Differentiable detector outputs: keypoints [N*k, 2] in meters (query-major)
/// and logits [N, 4].
struct DetectionTensors {
  KeypointRepr kind = KeypointRepr::kBbox;
  ad::Tensor keypoints;
  ad::Tensor logits;

  std::size_t num_queries() const { return logits.rows(); }
};

inline DetectionSet to_detection_set(const DetectionTensors& t) {
  DetectionSet d;
  d.kind = t.kind;
  const std::size_t k = static_cast<std::size_t>(keypoint_count(t.kind));
  for (std::size_t i = 0; i < t.num_queries(); ++i) {
    KeypointSet ks{t.kind, {}};
    for (std::size_t j = 0; j < k; ++j) ks.points.push_back({t.keypoints.at(i * k + j, 0), t.keypoints.at(i * k + j, 1)});
    d.keypoints.push_back(std::move(ks));
    std::array<double, kNumDetectorClasses> l{};
    for (int c = 0; c < kNumDetectorClasses; ++c) l[c] = t.logits.at(i, static_cast<std::size_t>(c));
    d.logits.push_back(l);
  }
  return d;
}

/// 1 - IoU of the box spanned by predicted keypoints [k, 2] against a fixed
/// target box, with the same minimum-area floor as bbox_iou.
inline ad::Tensor iou_loss(const ad::Tensor& pred_kps, const Box& target) {
  using ad::Tensor;
  const Tensor lo = ad::col_min(pred_kps);  // [1,2]
  const Tensor hi = ad::col_max(pred_kps);
  const Tensor tlo = Tensor::constant({1, 2}, {target.lo.x, target.lo.y});
  const Tensor thi = Tensor::constant({1, 2}, {target.hi.x, target.hi.y});
  const Tensor wh = ad::relu(ad::sub(ad::minimum(hi, thi), ad::maximum(lo, tlo)));
  const Tensor inter = ad::mul(ad::slice_cols(wh, 0, 1), ad::slice_cols(wh, 1, 1));
  const Tensor size = ad::sub(hi, lo);
  const Tensor area_p =
      ad::maximum(ad::mul(ad::slice_cols(size, 0, 1), ad::slice_cols(size, 1, 1)), Tensor::scalar(kMinBoxArea));
  const double area_t = std::max((target.hi.x - target.lo.x) * (target.hi.y - target.lo.y), kMinBoxArea);
  const Tensor uni = ad::sub(ad::add_scalar(area_p, area_t), inter);
  return ad::add_scalar(ad::scale(ad::div(inter, uni), -1.0), 1.0);
}

struct DetectorLoss {
  ad::Tensor total;
  double classification = 0.0;
  double l1 = 0.0;
  double iou = 0.0;
  Assignment assignment;
};

/// Hungarian-matched set loss:
///   sum_j 2 * w_j * NLL(sigma(j), l_j) + [l_j real] (0.1 smoothL1 + 1 (1 - IoU))
/// with w_j = 1 for real elements and kNoObjectWeight for padding.
inline DetectorLoss detector_set_loss(const DetectionTensors& preds, const std::vector<GtElement>& gts) {
  const DetectionSet values = to_detection_set(preds);
  DetectorLoss out;
  out.assignment = hungarian(pairwise_match_cost(values, gts));
  const std::size_t n = preds.num_queries();
  const std::size_t k = static_cast<std::size_t>(keypoint_count(preds.kind));

  std::vector<int> targets(n, kNoObjectClass);
  std::vector<double> weights(n, kClassCoef * kNoObjectWeight);
  std::vector<std::size_t> rows;
  std::vector<double> tgt_coords;
  std::vector<ad::Tensor> terms;
  for (std::size_t j = 0; j < gts.size(); ++j) {
    const std::size_t q = out.assignment.query_for_slot[j];
    targets[q] = static_cast<int>(gts[j].cls);
    weights[q] = kClassCoef;
    for (std::size_t s = 0; s < k; ++s) {
      rows.push_back(q * k + s);
      tgt_coords.push_back(gts[j].keypoints.points[s].x);
      tgt_coords.push_back(gts[j].keypoints.points[s].y);
    }
  }
  const ad::Tensor cls = ad::weighted_nll(preds.logits, targets, weights);
  out.classification = cls.item();
  terms.push_back(cls);
  if (!gts.empty()) {
    const ad::Tensor matched = ad::gather_rows(preds.keypoints, rows);
    const ad::Tensor target = ad::Tensor::constant({rows.size(), 2}, std::move(tgt_coords));
    // Per-element means summed over elements.
    const ad::Tensor l1 = ad::scale(ad::smooth_l1(matched, target), kL1Coef * static_cast<double>(gts.size()));
    out.l1 = l1.item();
    terms.push_back(l1);
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const ad::Tensor kp = ad::slice_rows(matched, j * k, k);
      const ad::Tensor iou = ad::scale(iou_loss(kp, enclosing_box(gts[j].keypoints.points)), kIouCoef);
      out.iou += iou.item();
      terms.push_back(iou);
    }
  }
  out.total = terms.size() == 1 ? terms[0] : ad::sum(ad::concat(terms, 0));
  return out;
}

}  // namespace vmap
