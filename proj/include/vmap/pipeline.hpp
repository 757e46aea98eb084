#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "checkpoint.hpp"
#include "geometry.hpp"
#include "matching.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "synthdata.hpp"

namespace vmap {

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::string model_preset = "desk";
  std::string dataset;
  std::string split = "train";
  int batch_size = 8;
  long steps_stage1 = 1000;
  long steps_stage2 = 200;
  double base_lr = 5e-4;
  long warmup_steps = 200;
  /// Fraction of a stage's steps after which the rate drops by decay_factor.
  double decay_frac = 0.9;
  double decay_factor = 0.1;
  double weight_decay = 1e-2;
  double clip_norm = 5.0;
  double dropout = 0.2;
  double aug_prob = 0.3;
  double aug_sigma = 0.15;
  std::uint64_t seed = 0;
  KeypointRepr repr = KeypointRepr::kBbox;
  /// none | fixed:<meters> | curvature:<degrees>
  std::string sampling = "none";
  int log_every = 10;

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid train config: " + what);
    };
    need(batch_size >= 1, "batch_size >= 1");
    need(steps_stage1 >= 0 && steps_stage2 >= 0, "steps must be non-negative");
    need(base_lr > 0.0, "base_lr > 0");
    need(warmup_steps >= 0, "warmup_steps >= 0");
    need(decay_frac > 0.0 && decay_frac <= 1.0, "decay_frac in (0,1]");
    need(decay_factor > 0.0, "decay_factor > 0");
    need(weight_decay >= 0.0, "weight_decay >= 0");
    need(clip_norm >= 0.0, "clip_norm >= 0");
    need(dropout >= 0.0 && dropout < 1.0, "dropout in [0,1)");
    need(aug_prob >= 0.0 && aug_prob <= 1.0, "aug_prob in [0,1]");
    need(aug_sigma >= 0.0, "aug_sigma >= 0");
    need(log_every >= 1, "log_every >= 1");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value '" + v + "' for '" + key + "'");
  return out;
}

}  // namespace detail

/// Applies one key=value setting; unknown keys are errors.
inline void apply_setting(TrainConfig& c, const std::string& key, const std::string& v) {
  using detail::parse_number;
  if (key == "model_preset") c.model_preset = v;
  else if (key == "dataset") c.dataset = v;
  else if (key == "split") c.split = v;
  else if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
  else if (key == "steps_stage1") c.steps_stage1 = parse_number<long>(key, v);
  else if (key == "steps_stage2") c.steps_stage2 = parse_number<long>(key, v);
  else if (key == "base_lr") c.base_lr = parse_number<double>(key, v);
  else if (key == "warmup_steps") c.warmup_steps = parse_number<long>(key, v);
  else if (key == "decay_frac") c.decay_frac = parse_number<double>(key, v);
  else if (key == "decay_factor") c.decay_factor = parse_number<double>(key, v);
  else if (key == "weight_decay") c.weight_decay = parse_number<double>(key, v);
  else if (key == "clip_norm") c.clip_norm = parse_number<double>(key, v);
  else if (key == "dropout") c.dropout = parse_number<double>(key, v);
  else if (key == "aug_prob") c.aug_prob = parse_number<double>(key, v);
  else if (key == "aug_sigma") c.aug_sigma = parse_number<double>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "repr") {
    try {
      c.repr = parse_repr(v);
    } catch (const GeometryError& e) {
      throw ConfigError(e.what());
    }
  } else if (key == "sampling") c.sampling = v;
  else if (key == "log_every") c.log_every = parse_number<int>(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

/// Flat `key = value` lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_flat_config(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    out[key] = detail::trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

/// Dataset-generation keys for `gen-data` config files.
inline void apply_data_setting(DatasetSpec& d, const std::string& key, const std::string& v) {
  using detail::parse_number;
  auto range = [&](CountRange& r) {
    const auto dots = v.find("..");
    if (dots == std::string::npos) {
      r.lo = r.hi = parse_number<int>(key, v);
    } else {
      r.lo = parse_number<int>(key, v.substr(0, dots));
      r.hi = parse_number<int>(key, v.substr(dots + 2));
    }
  };
  if (key == "n_scenes") d.n_scenes = parse_number<int>(key, v);
  else if (key == "seed") d.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "split_ratios") {
    d.split_ratios.clear();
    std::istringstream is(v);
    std::string part;
    while (std::getline(is, part, ',')) d.split_ratios.push_back(parse_number<double>(key, detail::trim(part)));
  } else if (key == "cell_m") d.cell_m = parse_number<double>(key, v);
  else if (key == "extent_x") d.scene.extent_x = parse_number<double>(key, v);
  else if (key == "extent_y") d.scene.extent_y = parse_number<double>(key, v);
  else if (key == "boundaries") range(d.scene.boundaries);
  else if (key == "dividers") range(d.scene.dividers);
  else if (key == "crossings") range(d.scene.crossings);
  else if (key == "curvature") d.scene.curvature = parse_number<double>(key, v);
  else if (key == "rdp_epsilon") d.scene.rdp_epsilon = parse_number<double>(key, v);
  else if (key == "max_vertices") d.scene.max_vertices = parse_number<int>(key, v);
  else if (key == "min_spacing") d.scene.min_spacing = parse_number<double>(key, v);
  else if (key == "stroke_cells") d.noise.stroke_cells = parse_number<double>(key, v);
  else if (key == "noise_sigma") d.noise.sigma = parse_number<double>(key, v);
  else if (key == "occlusions") d.noise.occlusions = parse_number<int>(key, v);
  else if (key == "max_occlusion_frac") d.noise.max_occlusion_frac = parse_number<double>(key, v);
  else throw ConfigError("unknown data config key '" + key + "'");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"model_preset", c.model_preset},   {"dataset", c.dataset},
          {"split", c.split},                 {"batch_size", c.batch_size},
          {"steps_stage1", c.steps_stage1},   {"steps_stage2", c.steps_stage2},
          {"base_lr", c.base_lr},             {"warmup_steps", c.warmup_steps},
          {"decay_frac", c.decay_frac},       {"decay_factor", c.decay_factor},
          {"weight_decay", c.weight_decay},   {"clip_norm", c.clip_norm},
          {"dropout", c.dropout},             {"aug_prob", c.aug_prob},
          {"aug_sigma", c.aug_sigma},         {"seed", c.seed},
          {"repr", std::string(repr_name(c.repr))}, {"sampling", c.sampling},
          {"log_every", c.log_every}};
}

/// "none", "fixed:<m>" or "curvature:<deg>".
inline std::optional<SamplingStrategy> parse_sampling(const std::string& s) {
  if (s == "none" || s.empty()) return std::nullopt;
  const auto colon = s.find(':');
  const std::string kind = s.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : s.substr(colon + 1);
  if (kind == "fixed") {
    const double d = arg.empty() ? 1.0 : detail::parse_number<double>("sampling", arg);
    if (!(d > 0.0)) throw ConfigError("fixed sampling interval must be positive");
    return FixedInterval{d};
  }
  if (kind == "curvature") {
    const double deg = arg.empty() ? 5.0 : detail::parse_number<double>("sampling", arg);
    if (!(deg > 0.0)) throw ConfigError("curvature threshold must be positive");
    return Curvature{deg * M_PI / 180.0};
  }
  throw ConfigError("unknown sampling strategy '" + s + "'");
}

// ---------------------------------------------------------------------------
// Training data

/// Ground truth of one scene prepared for a given model config.
struct TrainScene {
  const SceneRecord* record = nullptr;
  std::vector<GtElement> gts;
  /// Vertices fed to the generator (closed rings without the repeated vertex).
  std::vector<std::vector<Point>> vertices;
  std::vector<std::vector<int>> tokens;
};

inline Polyline prepare_polyline(const Polyline& p, const std::optional<SamplingStrategy>& sampling, int max_vertices) {
  Polyline out = sampling ? resample(p, *sampling) : p;
  const std::size_t cap = static_cast<std::size_t>(max_vertices) + (out.closed() ? 1 : 0);
  double eps = 0.05;
  Polyline capped = out;
  while (capped.size() > cap) {
    capped = rdp_simplify(out, eps);
    eps *= 2.0;
  }
  return capped;
}

inline TrainScene prepare_scene(const SceneRecord& rec, const ModelConfig& mc,
                                const std::optional<SamplingStrategy>& sampling) {
  TrainScene ts;
  ts.record = &rec;
  if (static_cast<int>(rec.map.size()) > mc.max_elements) {
    throw DatasetError("scene " + rec.id + " has " + std::to_string(rec.map.size()) + " elements, model holds " +
                       std::to_string(mc.max_elements));
  }
  for (const auto& e : rec.map) {
    const Polyline p = prepare_polyline(e.poly, sampling, mc.max_vertices);
    ts.gts.push_back({e.cls, extract_keypoints(p, mc.repr)});
    auto v = p.vertices();
    if (p.closed()) v.pop_back();
    ts.vertices.push_back(std::move(v));
    ts.tokens.push_back(flatten_to_tokens(p, mc.grid, mc.max_vertices).tokens);
  }
  return ts;
}

// ---------------------------------------------------------------------------
// Training

struct StepLog {
  int stage = 1;
  long step = 0;
  double lr = 0.0;
  double l_det = 0.0;
  double l_gen = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
};

inline ModelConfig model_config_for(const TrainConfig& tc, const GridSpec& grid) {
  ModelConfig mc = ModelConfig::from_preset(tc.model_preset);
  if (!(mc.grid == grid)) {
    throw DatasetError("dataset grid " + std::to_string(grid.width_cells) + "x" + std::to_string(grid.height_cells) +
                       " does not match the '" + tc.model_preset + "' model grid");
  }
  mc.repr = tc.repr;
  mc.dropout = tc.dropout;
  mc.validate();
  return mc;
}

/// Runs the two training stages on one model and dataset split.
class Trainer {
 public:
  using Callback = std::function<void(const StepLog&)>;

  Trainer(const TrainConfig& tc, const Dataset& ds, MapModel& model)
      : tc_(tc), model_(model), rng_(detail::splitmix64(tc.seed ^ 0x5eedull)) {
    tc_.validate();
    const auto sampling = parse_sampling(tc_.sampling);
    for (const auto* rec : ds.split(tc_.split)) scenes_.push_back(prepare_scene(*rec, model_.config(), sampling));
    if (scenes_.empty()) throw DatasetError("split '" + tc_.split + "' is empty");
    order_.resize(scenes_.size());
    std::iota(order_.begin(), order_.end(), 0);
  }

  const std::vector<TrainScene>& scenes() const { return scenes_; }

  /// Teacher-forced examples for one scene. Stage 1 conditions on ground-truth
  /// keypoints, stage 2 on the matched detector keypoints.
  std::vector<TeacherForced> generator_examples(const TrainScene& s, const DetectionSet* matched_from,
                                                const Assignment* assignment, bool augment) {
    const auto& mc = model_.config();
    std::vector<TeacherForced> out;
    std::bernoulli_distribution perturb(tc_.aug_prob);
    std::normal_distribution<double> noise(0.0, tc_.aug_sigma);
    for (std::size_t j = 0; j < s.gts.size(); ++j) {
      TeacherForced ex;
      const KeypointSet& kps =
          matched_from ? matched_from->keypoints[assignment->query_for_slot[j]] : s.gts[j].keypoints;
      ex.cond = make_condition(s.gts[j].cls, kps, mc.grid);
      ex.target = s.tokens[j];
      if (augment && tc_.aug_prob > 0.0 && tc_.aug_sigma > 0.0) {
        for (const auto& v : s.vertices[j]) {
          Point p = v;
          if (perturb(rng_)) p = {p.x + noise(rng_), p.y + noise(rng_)};
          const auto q = quantize_vertex(p, mc.grid);
          ex.input.push_back(q.tx);
          ex.input.push_back(q.ty);
        }
      } else {
        ex.input.assign(ex.target.begin(), ex.target.end() - 1);
      }
      out.push_back(std::move(ex));
    }
    return out;
  }

  struct SceneLoss {
    ad::Tensor det, gen;
  };

  SceneLoss scene_loss(const TrainScene& s, int stage, const nn::Context& ctx, bool augment) {
    const BevFeatures f = model_.bev_encode(s.record->raster, ctx);
    const DetectionTensors det = model_.detect_elements(f, ctx);
    for (const auto* t : {&det.keypoints, &det.logits}) {
      for (double v : t->values()) {
        if (!std::isfinite(v)) throw ad::NumericError("non-finite detector output in scene " + s.record->id);
      }
    }
    DetectorLoss dl = detector_set_loss(det, s.gts);
    std::vector<TeacherForced> examples;
    if (stage == 2) {
      const DetectionSet values = to_detection_set(det);
      examples = generator_examples(s, &values, &dl.assignment, augment);
    } else {
      examples = generator_examples(s, nullptr, nullptr, augment);
    }
    return {dl.total, model_.generator_nll(f, examples, ctx)};
  }

  /// One optimisation step over the next batch.
  StepLog step(int stage, long step_index, long stage_steps, ad::OptimState& opt) {
    const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(tc_.batch_size), scenes_.size());
    std::vector<std::size_t> batch;
    for (std::size_t i = 0; i < b; ++i) {
      if (cursor_ == 0) std::shuffle(order_.begin(), order_.end(), rng_);
      batch.push_back(order_[cursor_]);
      cursor_ = (cursor_ + 1) % order_.size();
    }
    const nn::Context ctx{tc_.dropout, &rng_};
    std::vector<ad::Tensor> dets, gens;
    for (std::size_t i : batch) {
      auto l = scene_loss(scenes_[i], stage, ctx, true);
      dets.push_back(l.det);
      gens.push_back(l.gen);
    }
    const double inv = 1.0 / static_cast<double>(b);
    const ad::Tensor l_det = ad::scale(ad::sum(ad::concat(dets, 0)), inv);
    const ad::Tensor l_gen = ad::scale(ad::sum(ad::concat(gens, 0)), inv);
    const ad::Tensor total = ad::add(l_det, l_gen);

    StepLog log;
    log.stage = stage;
    log.step = step_index;
    log.l_det = l_det.item();
    log.l_gen = l_gen.item();
    log.total = total.item();
    if (!std::isfinite(log.total)) {
      char buf[200];
      std::snprintf(buf, sizeof buf, "non-finite loss at stage %d step %ld (L_det=%g, L_gen=%g)", stage, step_index,
                    log.l_det, log.l_gen);
      throw ad::NumericError(buf);
    }
    model_.params().zero_grad();
    ad::backward(total);
    ad::LrSchedule sched{tc_.base_lr, tc_.warmup_steps,
                         static_cast<long>(std::floor(tc_.decay_frac * static_cast<double>(stage_steps))),
                         tc_.decay_factor};
    log.lr = ad::lr_at(step_index + 1, sched);
    log.grad_norm = ad::adamw_step(model_.params(), opt, log.lr);
    return log;
  }

  std::vector<StepLog> run_stage(int stage, long steps, const Callback& cb = {}) {
    ad::OptimState opt;
    opt.config.weight_decay = tc_.weight_decay;
    opt.config.clip_norm = tc_.clip_norm;
    std::vector<StepLog> logs;
    for (long s = 0; s < steps; ++s) {
      StepLog l = step(stage, s, steps, opt);
      if (cb && (s % tc_.log_every == 0 || s + 1 == steps)) cb(l);
      logs.push_back(l);
    }
    return logs;
  }

  /// Mean teacher-forced NLL over the split without dropout or augmentation;
  /// `predicted` conditions on matched detector keypoints instead of ground truth.
  double mean_generator_nll(bool predicted) {
    ad::NoGradGuard ng;
    double total = 0.0;
    for (const auto& s : scenes_) total += scene_loss(s, predicted ? 2 : 1, {}, false).gen.item();
    return total / static_cast<double>(scenes_.size());
  }

 private:
  TrainConfig tc_;
  MapModel& model_;
  std::vector<TrainScene> scenes_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

inline nlohmann::json checkpoint_config(const ModelConfig& mc, const TrainConfig& tc) {
  return {{"model", to_json(mc)}, {"train", to_json(tc)}};
}

inline std::unique_ptr<MapModel> load_model(const std::filesystem::path& path) {
  const CheckpointData ck = read_checkpoint(path);
  if (!ck.config.contains("model")) throw CheckpointError(path.string() + " has no model config");
  auto model = std::make_unique<MapModel>(model_config_from_json(ck.config.at("model")), 0);
  load_into(ck, model->params());
  return model;
}

inline std::string format_log_line(const StepLog& l) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%ld,%.17g,%.17g,%.17g,%.17g,%.17g", l.stage, l.step, l.lr, l.l_det, l.l_gen,
                l.total, l.grad_norm);
  return buf;
}

inline constexpr const char* kLossLogHeader = "stage,step,lr,l_det,l_gen,total,grad_norm";

// ---------------------------------------------------------------------------
// Evaluation

struct EvalConfig {
  std::string split = "val";
  std::vector<double> thresholds{0.5, 1.0, 1.5};
  std::vector<MetricKind> kinds{MetricKind::kChamfer, MetricKind::kFrechet};
  double score_threshold = 0.2;

  void validate() const {
    if (thresholds.empty()) throw ConfigError("at least one threshold is required");
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (!(thresholds[i] > 0.0)) throw ConfigError("thresholds must be positive");
      if (i > 0 && !(thresholds[i] > thresholds[i - 1])) throw ConfigError("thresholds must be ascending");
    }
    if (kinds.empty()) throw ConfigError("at least one metric is required");
  }
};

struct EvalOutput {
  APReport report;
  nlohmann::json diagnostics;
};

inline std::vector<SceneGroundTruth> ground_truth(const Dataset& ds, const std::string& split) {
  std::vector<SceneGroundTruth> gts;
  for (const auto* s : ds.split(split)) gts.push_back({s->id, s->map});
  if (gts.empty()) throw DatasetError("split '" + split + "' is empty");
  return gts;
}

/// Histogram of each prediction's Chamfer distance to the nearest same-class
/// ground truth; bins are delimited by the thresholds.
inline std::vector<int> distance_histogram(const VectorMap& gt, const std::vector<ScoredPrediction>& preds,
                                           const std::vector<double>& edges) {
  std::vector<int> h(edges.size() + 1, 0);
  for (const auto& p : preds) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& g : gt) {
      if (g.cls == p.element.cls) best = std::min(best, chamfer_distance(g.poly, p.element.poly));
    }
    std::size_t b = 0;
    while (b < edges.size() && best >= edges[b]) ++b;
    ++h[b];
  }
  return h;
}

inline EvalOutput evaluate(const MapModel& model, const Dataset& ds, const EvalConfig& ec) {
  ec.validate();
  const auto gts = ground_truth(ds, ec.split);
  std::vector<ScoredPrediction> preds;
  nlohmann::json scenes = nlohmann::json::array();
  std::size_t overflow = 0, undecodable = 0;
  for (const auto* s : ds.split(ec.split)) {
    const MapPrediction mp = model.predict_map(s->raster, ec.score_threshold);
    std::vector<ScoredPrediction> mine;
    for (const auto& e : mp.elements) mine.push_back({e.element, e.score, s->id});
    overflow += mp.overflow;
    undecodable += mp.undecodable;
    scenes.push_back({{"id", s->id},
                      {"n_gt", s->map.size()},
                      {"n_attempted", mp.attempted},
                      {"n_pred", mp.elements.size()},
                      {"eos_overflow", mp.overflow},
                      {"undecodable", mp.undecodable},
                      {"distance_histogram", distance_histogram(s->map, mine, ec.thresholds)}});
    preds.insert(preds.end(), mine.begin(), mine.end());
  }
  EvalOutput out;
  out.report = evaluate_map_set(preds, gts, ec.thresholds, ec.kinds);
  out.diagnostics = {{"scenes", scenes},
                     {"eos_overflow_total", overflow},
                     {"undecodable_total", undecodable},
                     {"histogram_edges", ec.thresholds},
                     {"score_threshold", ec.score_threshold}};
  return out;
}

/// Ground truth scored as predictions (score 1); a protocol sanity check.
inline EvalOutput oracle_evaluate(const Dataset& ds, const EvalConfig& ec) {
  ec.validate();
  const auto gts = ground_truth(ds, ec.split);
  std::vector<ScoredPrediction> preds;
  for (const auto& g : gts)
    for (const auto& e : g.elements) preds.push_back({e, 1.0, g.scene_id});
  return {evaluate_map_set(preds, gts, ec.thresholds, ec.kinds), {{"mode", "oracle"}}};
}

inline nlohmann::json report_json(const EvalOutput& o) {
  nlohmann::json j = to_json(o.report);
  j["diagnostics"] = o.diagnostics;
  return j;
}

// ---------------------------------------------------------------------------
// Whole runs

struct TrainRun {
  std::vector<StepLog> log;
  std::filesystem::path final_checkpoint;
};

/// Trains stage 1, stage 2 or both, writing stage checkpoints, the final
/// checkpoint (model.ckpt) and loss_log.csv under `out_dir`.
inline TrainRun train(const TrainConfig& tc, const Dataset& ds, int stages, const std::filesystem::path& out_dir,
                      const std::optional<std::filesystem::path>& init_ckpt = std::nullopt,
                      const Trainer::Callback& cb = {}) {
  tc.validate();
  if (stages < 1 || stages > 3) throw ConfigError("stage must be 1, 2 or both");
  const ModelConfig mc = model_config_for(tc, ds.grid);
  MapModel model(mc, tc.seed);
  if (init_ckpt) {
    const CheckpointData ck = read_checkpoint(*init_ckpt);
    load_into(ck, model.params());
  } else if (stages == 2) {
    throw ConfigError("stage 2 needs a stage-1 checkpoint to start from");
  }
  Trainer trainer(tc, ds, model);
  std::filesystem::create_directories(out_dir);
  const std::string data_hash = dataset_hash(ds.root);
  TrainRun run;
  auto save = [&](const std::string& name, int stage) {
    const auto path = out_dir / name;
    save_checkpoint(path, model.params(), checkpoint_config(mc, tc),
                    {{"stage", stage}, {"dataset_hash", data_hash}, {"steps", run.log.size()}});
    return path;
  };
  if (stages & 1) {
    auto logs = trainer.run_stage(1, tc.steps_stage1, cb);
    run.log.insert(run.log.end(), logs.begin(), logs.end());
    save("stage1.ckpt", 1);
  }
  if (stages & 2) {
    auto logs = trainer.run_stage(2, tc.steps_stage2, cb);
    run.log.insert(run.log.end(), logs.begin(), logs.end());
    save("stage2.ckpt", 2);
  }
  run.final_checkpoint = save("model.ckpt", (stages & 2) ? 2 : 1);
  std::string csv = std::string(kLossLogHeader) + "\n";
  for (const auto& l : run.log) csv += format_log_line(l) + "\n";
  write_text(out_dir / "loss_log.csv", csv);
  return run;
}

struct AblationRow {
  KeypointRepr repr = KeypointRepr::kBbox;
  APReport report;
};

/// Trains and evaluates every keypoint representation on the same data.
inline std::vector<AblationRow> keypoint_ablation(const TrainConfig& base, const Dataset& ds, const EvalConfig& ec,
                                                  const std::filesystem::path& out_dir,
                                                  const Trainer::Callback& cb = {}) {
  std::vector<AblationRow> rows;
  for (KeypointRepr r : {KeypointRepr::kBbox, KeypointRepr::kSme, KeypointRepr::kExtreme}) {
    TrainConfig tc = base;
    tc.repr = r;
    const auto run = train(tc, ds, 3, out_dir / std::string(repr_name(r)), std::nullopt, cb);
    const auto model = load_model(run.final_checkpoint);
    rows.push_back({r, evaluate(*model, ds, ec).report});
  }
  return rows;
}

/// One row per representation; AP columns per metric in percent.
inline std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s | %-8s %8s %11s %12s %8s\n", "keypoint", "metric", "AP_ped", "AP_divider",
                "AP_boundary", "mAP");
  out += buf;
  for (const auto& row : rows) {
    for (auto kind : row.report.kinds) {
      std::snprintf(buf, sizeof buf, "%-10s | %-8s %8.1f %11.1f %12.1f %8.1f\n", std::string(repr_name(row.repr)).c_str(),
                    std::string(metric_name(kind)).c_str(), 100.0 * row.report.class_ap(kind, ElementClass::kPedCrossing),
                    100.0 * row.report.class_ap(kind, ElementClass::kDivider),
                    100.0 * row.report.class_ap(kind, ElementClass::kBoundary), 100.0 * row.report.mean_ap(kind));
      out += buf;
    }
  }
  return out;
}

inline nlohmann::json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"repr", std::string(repr_name(r.repr))}, {"report", to_json(r.report)}});
  return j;
}

}  // namespace vmap
