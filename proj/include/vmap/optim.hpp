#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace vmap::ad {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named trainable parameters in registration order.
template <typename T>
class BasicParamStore {
 public:
  BasicTensor<T> add(const std::string& name, Shape shape, std::vector<T> init) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    auto t = BasicTensor<T>::parameter(std::move(shape), std::move(init));
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
    return t;
  }

  template <typename Rng>
  BasicTensor<T> add_normal(const std::string& name, Shape shape, T stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return add(name, std::move(shape), std::move(v));
  }

  BasicTensor<T> add_constant(const std::string& name, Shape shape, T value) {
    const auto n = numel_of(shape);
    return add(name, std::move(shape), std::vector<T>(n, value));
  }

  const std::vector<std::pair<std::string, BasicTensor<T>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool contains(const std::string& name) const { return index_.contains(name); }
  BasicTensor<T> get(const std::string& name) const { return entries_.at(index_.at(name)).second; }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, BasicTensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

using ParamStore = BasicParamStore<double>;

// ---------------------------------------------------------------------------
// Schedule

struct LrSchedule {
  double base_lr = 3e-4;
  long warmup_steps = 200;
  /// Step at which the rate drops by `decay_factor`; negative disables.
  long decay_step = -1;
  double decay_factor = 0.1;
};

/// base * min(step / warmup, 1) * (decay_factor once step >= decay_step)
inline double lr_at(long step, const LrSchedule& s) {
  double lr = s.base_lr;
  if (s.warmup_steps > 0) lr *= std::min(1.0, static_cast<double>(step) / static_cast<double>(s.warmup_steps));
  if (s.decay_step >= 0 && step >= s.decay_step) lr *= s.decay_factor;
  return lr;
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
  double clip_norm = 5.0;
};

template <typename T>
struct BasicOptimState {
  AdamWConfig config;
  long step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

using OptimState = BasicOptimState<double>;

/// Global L2 norm of all parameter gradients. Throws on non-finite values,
/// naming the first offending parameter.
template <typename T>
double global_grad_norm(const BasicParamStore<T>& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params.entries()) {
    if (!t.has_grad()) continue;
    for (T g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter '" + name + "'");
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  return std::sqrt(sq);
}

/// Clip to `clip_norm` globally, then one decoupled-weight-decay Adam update.
/// Returns the pre-clip gradient norm.
template <typename T>
double adamw_step(BasicParamStore<T>& params, BasicOptimState<T>& state, double lr) {
  const auto& entries = params.entries();
  if (state.m.size() != entries.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& [_, t] : entries) {
      state.m.emplace_back(t.numel(), T(0));
      state.v.emplace_back(t.numel(), T(0));
    }
  }
  const double norm = global_grad_norm(params);
  const auto& c = state.config;
  const double clip = (c.clip_norm > 0.0 && norm > c.clip_norm) ? c.clip_norm / norm : 1.0;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    auto t = entries[k].second;
    auto p = t.mutable_values();
    auto& m = state.m[k];
    auto& v = state.v[k];
    const bool has = t.has_grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = has ? static_cast<double>(t.grad()[i]) * clip : 0.0;
      m[i] = static_cast<T>(c.beta1 * m[i] + (1.0 - c.beta1) * g);
      v[i] = static_cast<T>(c.beta2 * v[i] + (1.0 - c.beta2) * g * g);
      double x = static_cast<double>(p[i]);
      x -= lr * c.weight_decay * x;
      x -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
      p[i] = static_cast<T>(x);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares analytic gradients of `f` against central differences
/// (f(p+eps) - f(p-eps)) / 2eps. Checks up to `per_param` randomly chosen
/// coordinates per parameter (all when 0). Relative error uses the
/// denominator max(|a|, |n|, 1e-8).
template <typename T, typename F>
GradCheckResult finite_diff_check(F&& f, BasicParamStore<T>& params, double eps = 1e-5, std::size_t per_param = 0,
                                  std::uint64_t seed = 0) {
  params.zero_grad();
  // Unreached parameters then report an analytic gradient of zero.
  for (const auto& [_, t] : params.entries()) BasicTensor<T>(t).mutable_grad();
  backward(f());
  std::mt19937_64 rng(seed);
  GradCheckResult res;
  for (const auto& [name, t] : params.entries()) {
    auto tt = t;
    const std::vector<T> analytic(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> coords(t.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (per_param > 0 && coords.size() > per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(per_param);
    }
    for (std::size_t i : coords) {
      auto vals = tt.mutable_values();
      const T orig = vals[i];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[i] = orig + static_cast<T>(eps);
        fp = static_cast<double>(f().item());
        vals[i] = orig - static_cast<T>(eps);
        fm = static_cast<double>(f().item());
        vals[i] = orig;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = static_cast<double>(analytic[i]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = name;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace vmap::ad
