#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geometry.hpp"
#include "matching.hpp"
#include "metrics.hpp"
#include "nn.hpp"
#include "optim.hpp"
#include "raster.hpp"

namespace vmap {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::string preset = "desk";
  GridSpec grid{100, 50, 0.3, {-15.0, -7.5}};
  int channels = 3;
  int patch = 4;
  int dim = 64;
  int heads = 4;
  int ffn = 128;
  int encoder_layers = 2;
  int detector_layers = 2;
  int max_elements = 12;
  KeypointRepr repr = KeypointRepr::kBbox;
  int deform_heads = 4;
  int deform_points = 4;
  int generator_layers = 2;
  int max_vertices = 16;
  double dropout = 0.2;

  static ModelConfig desk() { return {}; }

  static ModelConfig paper() {
    ModelConfig c;
    c.preset = "paper";
    c.grid = GridSpec{200, 100, 0.3, {-30.0, -15.0}};
    c.dim = 256;
    c.heads = 8;
    c.ffn = 512;
    c.detector_layers = 6;
    c.max_elements = 100;
    c.generator_layers = 6;
    c.max_vertices = 50;
    return c;
  }

  static ModelConfig from_preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "paper") return paper();
    throw ConfigError("unknown model preset '" + name + "'");
  }

  int k() const { return keypoint_count(repr); }
  int feat_cols() const { return (grid.width_cells + patch - 1) / patch; }
  int feat_rows() const { return (grid.height_cells + patch - 1) / patch; }
  int vocab() const { return grid.vocab(); }
  /// Generator input vocabulary: coordinates, EOS, then one token per class.
  int input_vocab() const { return vocab() + 1 + kNumElementClasses; }
  int output_vocab() const { return vocab() + 1; }
  int prompt_len() const { return 1 + 2 * k(); }
  int max_len() const { return 2 * max_vertices + 1; }

  void validate() const {
    try {
      grid.validate();
    } catch (const GeometryError& e) {
      throw ConfigError(e.what());
    }
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid model config: " + what);
    };
    need(channels >= 1, "channels >= 1");
    need(patch >= 1, "patch >= 1");
    need(dim >= 4 && dim % 4 == 0, "dim must be a positive multiple of 4");
    need(heads >= 1 && dim % heads == 0, "dim divisible by heads");
    need(deform_heads >= 1 && dim % deform_heads == 0, "dim divisible by deform_heads");
    need(deform_points >= 1, "deform_points >= 1");
    need(ffn >= 1, "ffn >= 1");
    need(encoder_layers >= 0, "encoder_layers >= 0");
    need(detector_layers >= 1, "detector_layers >= 1");
    need(generator_layers >= 1, "generator_layers >= 1");
    need(max_elements >= 1, "max_elements >= 1");
    need(max_vertices >= 2, "max_vertices >= 2");
    need(dropout >= 0.0 && dropout < 1.0, "dropout in [0,1)");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"preset", c.preset},
          {"grid",
           {{"width_cells", c.grid.width_cells},
            {"height_cells", c.grid.height_cells},
            {"cell_m", c.grid.cell_m},
            {"origin", {c.grid.origin.x, c.grid.origin.y}}}},
          {"channels", c.channels},
          {"patch", c.patch},
          {"dim", c.dim},
          {"heads", c.heads},
          {"ffn", c.ffn},
          {"encoder_layers", c.encoder_layers},
          {"detector_layers", c.detector_layers},
          {"max_elements", c.max_elements},
          {"repr", std::string(repr_name(c.repr))},
          {"deform_heads", c.deform_heads},
          {"deform_points", c.deform_points},
          {"generator_layers", c.generator_layers},
          {"max_vertices", c.max_vertices},
          {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.preset = j.at("preset").get<std::string>();
    const auto& g = j.at("grid");
    c.grid.width_cells = g.at("width_cells").get<int>();
    c.grid.height_cells = g.at("height_cells").get<int>();
    c.grid.cell_m = g.at("cell_m").get<double>();
    c.grid.origin = {g.at("origin").at(0).get<double>(), g.at("origin").at(1).get<double>()};
    c.channels = j.at("channels").get<int>();
    c.patch = j.at("patch").get<int>();
    c.dim = j.at("dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.encoder_layers = j.at("encoder_layers").get<int>();
    c.detector_layers = j.at("detector_layers").get<int>();
    c.max_elements = j.at("max_elements").get<int>();
    c.repr = parse_repr(j.at("repr").get<std::string>());
    c.deform_heads = j.at("deform_heads").get<int>();
    c.deform_points = j.at("deform_points").get<int>();
    c.generator_layers = j.at("generator_layers").get<int>();
    c.max_vertices = j.at("max_vertices").get<int>();
    c.dropout = j.at("dropout").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

/// Encoder output: [rows*cols, dim], row-major over the feature grid.
struct BevFeatures {
  ad::Tensor grid;
  std::size_t rows = 0;
  std::size_t cols = 0;
};

struct GeneratorCondition {
  ElementClass cls = ElementClass::kDivider;
  /// kp1.x, kp1.y, ..., kpk.x, kpk.y
  std::vector<int> keypoint_tokens;
};

inline GeneratorCondition make_condition(ElementClass cls, const KeypointSet& kps, const GridSpec& g) {
  GeneratorCondition c{cls, {}};
  for (const auto& p : kps.points) {
    const auto q = quantize_vertex(p, g);
    c.keypoint_tokens.push_back(q.tx);
    c.keypoint_tokens.push_back(q.ty);
  }
  return c;
}

/// One teacher-forced sequence. `input` holds the tokens fed after the prompt
/// (normally target minus its EOS, possibly perturbed).
struct TeacherForced {
  GeneratorCondition cond;
  std::vector<int> target;
  std::vector<int> input;
};

enum class DecodeMode { kGreedy, kSample };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  int max_len = -1;  // negative: 2 * max_vertices + 1
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct DecodeResult {
  VertexTokenSeq seq;
  /// max_len was reached without EOS; EOS was appended.
  bool overflow = false;
  /// Fewer than two vertices were produced.
  bool degenerate = false;
};

struct PredictedElement {
  MapElement element;
  double score = 0.0;
  bool overflow = false;
};

struct MapPrediction {
  std::vector<PredictedElement> elements;
  std::size_t attempted = 0;
  std::size_t overflow = 0;
  /// Attempted elements whose sequence did not decode to a valid polyline.
  std::size_t undecodable = 0;
};

namespace detail {

inline ad::Tensor row_constant(double a, double b) { return ad::Tensor::constant({2}, {a, b}); }

}  // namespace detail

/// Single-scale deformable attention: each query samples `points` locations
/// per head around its reference point and mixes them with softmax weights.
struct DeformableAttention {
  nn::Linear offsets, weights, value, out;
  std::size_t heads = 1, points = 1, dim = 0;

  DeformableAttention() = default;
  DeformableAttention(ad::ParamStore& ps, const std::string& name, std::size_t d, std::size_t n_heads,
                      std::size_t n_points, std::mt19937_64& rng)
      : offsets(ps, name + ".offsets", d, n_heads * n_points * 2, rng, 0.1),
        weights(ps, name + ".weights", d, n_heads * n_points, rng),
        value(ps, name + ".value", d, d, rng),
        out(ps, name + ".out", d, d, rng),
        heads(n_heads),
        points(n_points),
        dim(d) {
    // Start with a small rosette of sampling points around the reference.
    auto b = offsets.b.mutable_values();
    for (std::size_t h = 0; h < heads; ++h) {
      const double theta = 2.0 * M_PI * static_cast<double>(h) / static_cast<double>(heads);
      for (std::size_t s = 0; s < points; ++s) {
        const double r = 0.02 * static_cast<double>(s + 1);
        b[(h * points + s) * 2] = r * std::cos(theta);
        b[(h * points + s) * 2 + 1] = r * std::sin(theta);
      }
    }
  }

  /// `ref` [M,2] in the normalised feature frame.
  ad::Tensor operator()(const ad::Tensor& q, const ad::Tensor& ref, const BevFeatures& f) const {
    const std::size_t m = q.rows();
    const std::size_t dh = dim / heads;
    const ad::Tensor off = offsets(q);
    const ad::Tensor att = weights(q);
    const ad::Tensor val = value(f.grid);
    std::vector<std::size_t> rep(m * points);
    for (std::size_t i = 0; i < rep.size(); ++i) rep[i] = i / points;
    const ad::Tensor ref_rep = ad::gather_rows(ref, rep);
    std::vector<ad::Tensor> per_head;
    per_head.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const ad::Tensor o = ad::reshape(ad::slice_cols(off, h * points * 2, points * 2), {m * points, 2});
      const ad::Tensor loc = ad::clamp(ad::add(ref_rep, o), 0.0, 1.0);
      const ad::Tensor samples = ad::grid_sample(ad::slice_cols(val, h * dh, dh), f.rows, f.cols, loc);
      const ad::Tensor w = ad::softmax(ad::slice_cols(att, h * points, points));
      const ad::Tensor mixed = ad::bmm(ad::reshape(w, {m, 1, points}), ad::reshape(samples, {m, points, dh}));
      per_head.push_back(ad::reshape(mixed, {m, dh}));
    }
    return out(heads == 1 ? per_head[0] : ad::concat(per_head, 1));
  }
};

struct DetectorLayer {
  nn::LayerNorm ln_self, ln_cross, ln_ffn;
  nn::MultiHeadAttention self_attn;
  DeformableAttention cross;
  nn::Mlp ffn;
};

struct GeneratorLayer {
  nn::LayerNorm ln_self, ln_cross, ln_ffn;
  nn::MultiHeadAttention self_attn, cross_attn;
  nn::Mlp ffn;
};

/// Encoder, detector and generator sharing one parameter store.
class MapModel {
 public:
  MapModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto d = static_cast<std::size_t>(cfg_.dim);
    const auto heads = static_cast<std::size_t>(cfg_.heads);
    const auto ffn = static_cast<std::size_t>(cfg_.ffn);
    const auto k = static_cast<std::size_t>(cfg_.k());
    const auto n = static_cast<std::size_t>(cfg_.max_elements);
    const auto patch_in = static_cast<std::size_t>(cfg_.channels * cfg_.patch * cfg_.patch);

    patch_embed_ = nn::Linear(params_, "encoder.patch", patch_in, d, rng);
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      encoder_.emplace_back(params_, "encoder.block" + std::to_string(l), d, heads, ffn, rng);
    }
    encoder_norm_ = nn::LayerNorm(params_, "encoder.norm", d);
    pos_enc_ = nn::sinusoid_2d(static_cast<std::size_t>(cfg_.feat_rows()), static_cast<std::size_t>(cfg_.feat_cols()), d);

    element_embed_ = params_.add_normal("detector.element_embed", {n, d}, 1.0, rng);
    keypoint_embed_ = params_.add_normal("detector.keypoint_embed", {k, d}, 1.0, rng);
    ref_init_ = nn::Linear(params_, "detector.ref_init", d, 2 * k, rng);
    for (int l = 0; l < cfg_.detector_layers; ++l) {
      const std::string p = "detector.layer" + std::to_string(l);
      DetectorLayer layer;
      layer.ln_self = nn::LayerNorm(params_, p + ".ln_self", d);
      layer.ln_cross = nn::LayerNorm(params_, p + ".ln_cross", d);
      layer.ln_ffn = nn::LayerNorm(params_, p + ".ln_ffn", d);
      layer.self_attn = nn::MultiHeadAttention(params_, p + ".self_attn", d, heads, rng);
      layer.cross = DeformableAttention(params_, p + ".cross", d, static_cast<std::size_t>(cfg_.deform_heads),
                                        static_cast<std::size_t>(cfg_.deform_points), rng);
      layer.ffn = nn::Mlp(params_, p + ".ffn", d, ffn, d, rng);
      detector_.push_back(std::move(layer));
    }
    head_norm_ = nn::LayerNorm(params_, "detector.head_norm", d);
    kp_head_ = nn::Mlp(params_, "detector.kp_head", d, d, 2, rng);
    cls_head_ = nn::Mlp(params_, "detector.cls_head", k * d, d, kNumDetectorClasses, rng);

    value_embed_ = params_.add_normal("generator.value_embed", {static_cast<std::size_t>(cfg_.input_vocab()), d}, 1.0, rng);
    coord_embed_ = params_.add_normal("generator.coord_embed", {3, d}, 1.0, rng);
    pos_embed_ = params_.add_normal(
        "generator.pos_embed", {static_cast<std::size_t>(cfg_.prompt_len() + cfg_.max_vertices), d}, 1.0, rng);
    for (int l = 0; l < cfg_.generator_layers; ++l) {
      const std::string p = "generator.layer" + std::to_string(l);
      GeneratorLayer layer;
      layer.ln_self = nn::LayerNorm(params_, p + ".ln_self", d);
      layer.ln_cross = nn::LayerNorm(params_, p + ".ln_cross", d);
      layer.ln_ffn = nn::LayerNorm(params_, p + ".ln_ffn", d);
      layer.self_attn = nn::MultiHeadAttention(params_, p + ".self_attn", d, heads, rng);
      layer.cross_attn = nn::MultiHeadAttention(params_, p + ".cross_attn", d, heads, rng);
      layer.ffn = nn::Mlp(params_, p + ".ffn", d, ffn, d, rng);
      generator_.push_back(std::move(layer));
    }
    gen_norm_ = nn::LayerNorm(params_, "generator.norm", d);
    gen_out_ = nn::Linear(params_, "generator.out", d, static_cast<std::size_t>(cfg_.output_vocab()), rng);
  }

  MapModel(const MapModel&) = delete;
  MapModel& operator=(const MapModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  // -------------------------------------------------------------------------
  // Encoder

  /// Patch rows [rows*cols, C*p*p]; cells beyond the raster are zero.
  ad::Tensor patch_rows(const BevRaster& r) const {
    if (r.channels != cfg_.channels || r.height != cfg_.grid.height_cells || r.width != cfg_.grid.width_cells) {
      throw ad::ShapeError("raster " + std::to_string(r.channels) + "x" + std::to_string(r.height) + "x" +
                           std::to_string(r.width) + " does not match model grid " + std::to_string(cfg_.channels) +
                           "x" + std::to_string(cfg_.grid.height_cells) + "x" + std::to_string(cfg_.grid.width_cells));
    }
    const int p = cfg_.patch, fr = cfg_.feat_rows(), fc = cfg_.feat_cols();
    const std::size_t width = static_cast<std::size_t>(cfg_.channels * p * p);
    std::vector<double> v(static_cast<std::size_t>(fr * fc) * width, 0.0);
    for (int pr = 0; pr < fr; ++pr) {
      for (int pc = 0; pc < fc; ++pc) {
        double* row = v.data() + static_cast<std::size_t>(pr * fc + pc) * width;
        std::size_t i = 0;
        for (int c = 0; c < r.channels; ++c) {
          for (int dy = 0; dy < p; ++dy) {
            for (int dx = 0; dx < p; ++dx, ++i) {
              const int y = pr * p + dy, x = pc * p + dx;
              if (y < r.height && x < r.width) row[i] = r.at(c, y, x);
            }
          }
        }
      }
    }
    return ad::Tensor::constant({static_cast<std::size_t>(fr * fc), width}, std::move(v));
  }

  /// Patch embedding plus positional encoding, before any attention block.
  ad::Tensor embed_patches(const BevRaster& r) const { return ad::add(patch_embed_(patch_rows(r)), pos_enc_); }

  const ad::Tensor& positional_encoding() const { return pos_enc_; }

  BevFeatures bev_encode(const BevRaster& r, const nn::Context& ctx = {}) const {
    ad::Tensor x = embed_patches(r);
    for (const auto& block : encoder_) x = block(x, ctx);
    if (!encoder_.empty()) x = encoder_norm_(x);
    return {x, static_cast<std::size_t>(cfg_.feat_rows()), static_cast<std::size_t>(cfg_.feat_cols())};
  }

  // -------------------------------------------------------------------------
  // Detector

  /// Map-normalised [0,1]^2 to the padded feature frame.
  ad::Tensor to_feature_frame(const ad::Tensor& ref) const {
    const double sx = cfg_.grid.width_cells / static_cast<double>(cfg_.feat_cols() * cfg_.patch);
    const double sy = cfg_.grid.height_cells / static_cast<double>(cfg_.feat_rows() * cfg_.patch);
    return ad::mul(ref, detail::row_constant(sx, sy));
  }

  /// Query-major keypoint queries e^p_i + e^kp_j, [N*k, d].
  ad::Tensor keypoint_queries() const {
    const auto n = static_cast<std::size_t>(cfg_.max_elements), k = static_cast<std::size_t>(cfg_.k());
    std::vector<std::size_t> ei(n * k), ki(n * k);
    for (std::size_t i = 0; i < n * k; ++i) {
      ei[i] = i / k;
      ki[i] = i % k;
    }
    return ad::add(ad::gather_rows(element_embed_, ei), ad::gather_rows(keypoint_embed_, ki));
  }

  /// Initial reference points, before squashing, [N*k, 2].
  ad::Tensor reference_logits() const {
    const auto n = static_cast<std::size_t>(cfg_.max_elements), k = static_cast<std::size_t>(cfg_.k());
    return ad::reshape(ref_init_(element_embed_), {n * k, 2});
  }

  const DeformableAttention& deformable(std::size_t layer) const { return detector_.at(layer).cross; }

  DetectionTensors detect_elements(const BevFeatures& f, const nn::Context& ctx = {}) const {
    const auto n = static_cast<std::size_t>(cfg_.max_elements), k = static_cast<std::size_t>(cfg_.k());
    const auto d = static_cast<std::size_t>(cfg_.dim);
    ad::Tensor q = keypoint_queries();
    ad::Tensor ref_logit = reference_logits();
    ad::Tensor kp_logit;
    for (std::size_t l = 0; l < detector_.size(); ++l) {
      const auto& layer = detector_[l];
      const ad::Tensor h = layer.ln_self(q);
      q = ad::add(q, nn::drop(layer.self_attn(h, h, std::nullopt, ctx), ctx));
      const ad::Tensor ref = to_feature_frame(ad::sigmoid(ref_logit));
      q = ad::add(q, nn::drop(layer.cross(layer.ln_cross(q), ref, f), ctx));
      q = ad::add(q, nn::drop(layer.ffn(layer.ln_ffn(q), ctx), ctx));
      // Each layer refines the previous reference in logit space.
      kp_logit = ad::add(kp_head_(head_norm_(q), ctx), ref_logit);
      if (l + 1 < detector_.size()) ref_logit = kp_logit.detach();
    }
    const ad::Tensor kp_norm = ad::sigmoid(kp_logit);
    const auto& g = cfg_.grid;
    DetectionTensors out;
    out.kind = cfg_.repr;
    out.keypoints =
        ad::add(ad::mul(kp_norm, detail::row_constant(g.extent_x(), g.extent_y())), detail::row_constant(g.origin.x, g.origin.y));
    out.logits = cls_head_(ad::reshape(head_norm_(q), {n, k * d}), ctx);
    return out;
  }

  // -------------------------------------------------------------------------
  // Generator

  std::vector<int> prompt_tokens(const GeneratorCondition& c) const {
    if (static_cast<int>(c.keypoint_tokens.size()) != 2 * cfg_.k()) {
      throw ad::ShapeError("condition has " + std::to_string(c.keypoint_tokens.size()) + " keypoint tokens, expected " +
                           std::to_string(2 * cfg_.k()));
    }
    std::vector<int> p{cfg_.vocab() + 1 + static_cast<int>(c.cls)};
    for (std::size_t i = 0; i < c.keypoint_tokens.size(); ++i) {
      const int t = c.keypoint_tokens[i];
      const int lim = i % 2 == 0 ? cfg_.grid.width_cells : cfg_.grid.height_cells;
      if (t < 0 || t >= lim) throw DecodeError("keypoint token " + std::to_string(t) + " out of range");
      p.push_back(t);
    }
    return p;
  }

  /// Rejects EOS or out-of-range coordinates in a vertex prefix.
  void check_prefix(const std::vector<int>& prefix) const {
    if (static_cast<int>(prefix.size()) >= cfg_.max_len()) {
      throw DecodeError("prefix length " + std::to_string(prefix.size()) + " exceeds the sequence limit");
    }
    for (std::size_t i = 0; i < prefix.size(); ++i) {
      const int lim = i % 2 == 0 ? cfg_.grid.width_cells : cfg_.grid.height_cells;
      if (prefix[i] < 0 || prefix[i] >= lim) {
        throw DecodeError("prefix token " + std::to_string(prefix[i]) + " at position " + std::to_string(i) +
                          " is outside the vocabulary");
      }
    }
  }

  /// Final hidden states for stacked [prompt | prefix] sequences. Attention is
  /// causal within a sequence and blocked across sequences.
  ad::Tensor generator_hidden(const std::vector<std::vector<int>>& prompts, const std::vector<std::vector<int>>& prefixes,
                              const std::vector<nn::KeyValue>& memory, const nn::Context& ctx) const {
    std::vector<std::size_t> values, coords, positions, starts;
    const int pl = cfg_.prompt_len();
    for (std::size_t s = 0; s < prompts.size(); ++s) {
      starts.push_back(values.size());
      for (int i = 0; i < pl; ++i) {
        values.push_back(static_cast<std::size_t>(prompts[s][static_cast<std::size_t>(i)]));
        coords.push_back(2);
        positions.push_back(static_cast<std::size_t>(i));
      }
      for (std::size_t i = 0; i < prefixes[s].size(); ++i) {
        values.push_back(static_cast<std::size_t>(prefixes[s][i]));
        coords.push_back(i % 2);
        positions.push_back(static_cast<std::size_t>(pl) + i / 2);
      }
    }
    starts.push_back(values.size());
    const std::size_t total = values.size();
    std::vector<double> mask(total * total, nn::kMaskedLogit);
    for (std::size_t s = 0; s + 1 < starts.size(); ++s) {
      for (std::size_t i = starts[s]; i < starts[s + 1]; ++i) {
        std::fill(mask.begin() + static_cast<std::ptrdiff_t>(i * total + starts[s]),
                  mask.begin() + static_cast<std::ptrdiff_t>(i * total + i + 1), 0.0);
      }
    }
    const ad::Tensor causal = ad::Tensor::constant({total, total}, std::move(mask));

    ad::Tensor x = ad::add(ad::add(ad::gather_rows(value_embed_, values), ad::gather_rows(coord_embed_, coords)),
                           ad::gather_rows(pos_embed_, positions));
    x = nn::drop(x, ctx);
    for (std::size_t l = 0; l < generator_.size(); ++l) {
      const auto& layer = generator_[l];
      const ad::Tensor h = layer.ln_self(x);
      x = ad::add(x, nn::drop(layer.self_attn.attend(h, layer.self_attn.project(h), causal, ctx), ctx));
      x = ad::add(x, nn::drop(layer.cross_attn.attend(layer.ln_cross(x), memory[l], std::nullopt, ctx), ctx));
      x = ad::add(x, nn::drop(layer.ffn(layer.ln_ffn(x), ctx), ctx));
    }
    return gen_norm_(x);
  }

  /// Per-layer cross-attention keys/values of the feature grid.
  std::vector<nn::KeyValue> generator_memory(const BevFeatures& f) const {
    std::vector<nn::KeyValue> mem;
    for (const auto& layer : generator_) mem.push_back(layer.cross_attn.project(f.grid));
    return mem;
  }

  /// Next-token logits [V+1] after `prefix` under condition `cond`.
  ad::Tensor generator_step(const std::vector<int>& prefix, const GeneratorCondition& cond, const BevFeatures& f) const {
    check_prefix(prefix);
    const ad::Tensor h = generator_hidden({prompt_tokens(cond)}, {prefix}, generator_memory(f), {});
    return gen_out_(ad::slice_rows(h, h.rows() - 1, 1));
  }

  /// Sum over sequences of the per-sequence mean token NLL.
  ad::Tensor generator_nll(const BevFeatures& f, const std::vector<TeacherForced>& batch,
                           const nn::Context& ctx = {}) const {
    if (batch.empty()) return ad::Tensor::scalar(0.0);
    std::vector<std::vector<int>> prompts, prefixes;
    std::vector<std::size_t> rows;
    std::vector<int> targets;
    std::vector<double> weights;
    std::size_t offset = 0;
    const auto pl = static_cast<std::size_t>(cfg_.prompt_len());
    for (const auto& ex : batch) {
      if (ex.target.empty() || ex.target.back() != cfg_.grid.eos() || ex.input.size() + 1 != ex.target.size()) {
        throw DecodeError("teacher-forced example must pair an EOS-terminated target with its shifted input");
      }
      check_prefix(ex.input);
      prompts.push_back(prompt_tokens(ex.cond));
      prefixes.push_back(ex.input);
      const double w = 1.0 / static_cast<double>(ex.target.size());
      for (std::size_t i = 0; i < ex.target.size(); ++i) {
        rows.push_back(offset + pl - 1 + i);
        targets.push_back(ex.target[i]);
        weights.push_back(w);
      }
      offset += pl + ex.input.size();
    }
    const ad::Tensor h = generator_hidden(prompts, prefixes, generator_memory(f), ctx);
    return ad::weighted_nll(gen_out_(ad::gather_rows(h, rows)), targets, weights);
  }

  /// Batched autoregressive decoding; sequences never interact.
  std::vector<DecodeResult> decode_polylines(const std::vector<GeneratorCondition>& conds, const BevFeatures& f,
                                             const DecodeOptions& opt = {}) const {
    ad::NoGradGuard no_grad;
    const int max_len = opt.max_len < 0 ? cfg_.max_len() : std::min(opt.max_len, cfg_.max_len());
    const int max_coords = std::max(0, max_len - 1) / 2 * 2;
    const auto memory = generator_memory(f);
    std::mt19937_64 rng(opt.seed);
    std::vector<DecodeResult> out(conds.size());
    std::vector<std::vector<int>> prompts;
    for (const auto& c : conds) prompts.push_back(prompt_tokens(c));
    std::vector<std::size_t> active(conds.size());
    std::iota(active.begin(), active.end(), 0);
    std::vector<std::vector<int>> tokens(conds.size());
    const int eos = cfg_.grid.eos();

    while (!active.empty()) {
      std::vector<std::size_t> still;
      for (std::size_t a : active) {
        if (static_cast<int>(tokens[a].size()) >= max_coords) {
          out[a].overflow = true;
          continue;
        }
        still.push_back(a);
      }
      active = std::move(still);
      if (active.empty()) break;
      std::vector<std::vector<int>> ap, prefixes;
      for (std::size_t a : active) {
        ap.push_back(prompts[a]);
        prefixes.push_back(tokens[a]);
      }
      const ad::Tensor h = generator_hidden(ap, prefixes, memory, {});
      std::vector<std::size_t> last;
      std::size_t off = 0;
      for (std::size_t i = 0; i < active.size(); ++i) {
        off += ap[i].size() + prefixes[i].size();
        last.push_back(off - 1);
      }
      const ad::Tensor logits = gen_out_(ad::gather_rows(h, last));
      std::vector<std::size_t> next_active;
      for (std::size_t i = 0; i < active.size(); ++i) {
        const std::size_t a = active[i];
        const int tok = pick_token(logits, i, tokens[a].size(), opt, rng);
        if (tok == eos) continue;
        tokens[a].push_back(tok);
        next_active.push_back(a);
      }
      active = std::move(next_active);
    }
    for (std::size_t a = 0; a < conds.size(); ++a) {
      auto& t = tokens[a];
      if (t.size() % 2 != 0) t.pop_back();
      out[a].degenerate = t.size() < 4;
      t.push_back(eos);
      out[a].seq.tokens = std::move(t);
    }
    return out;
  }

  /// encode -> detect -> threshold -> generate -> dequantise.
  MapPrediction predict_map(const BevRaster& raster, double score_threshold, const DecodeOptions& opt = {}) const {
    ad::NoGradGuard no_grad;
    const BevFeatures f = bev_encode(raster);
    const DetectionSet det = to_detection_set(detect_elements(f));
    std::vector<GeneratorCondition> conds;
    std::vector<std::size_t> which;
    for (std::size_t i = 0; i < det.size(); ++i) {
      if (det.score(i) < score_threshold) continue;
      conds.push_back(make_condition(det.label(i), det.keypoints[i], cfg_.grid));
      which.push_back(i);
    }
    MapPrediction pred;
    pred.attempted = conds.size();
    const auto seqs = decode_polylines(conds, f, opt);
    for (std::size_t j = 0; j < seqs.size(); ++j) {
      pred.overflow += seqs[j].overflow ? 1 : 0;
      const ElementClass cls = conds[j].cls;
      try {
        Polyline poly = tokens_to_polyline(seqs[j].seq, cfg_.grid, cls == ElementClass::kPedCrossing);
        pred.elements.push_back({{cls, std::move(poly)}, det.score(which[j]), seqs[j].overflow});
      } catch (const DecodeError&) {
        ++pred.undecodable;
      }
    }
    return pred;
  }

 private:
  /// Chooses a token from row `row`, masking tokens the grammar forbids at
  /// coordinate index `pos` (x or y range; EOS only between vertices).
  int pick_token(const ad::Tensor& logits, std::size_t row, std::size_t pos, const DecodeOptions& opt,
                 std::mt19937_64& rng) const {
    const int eos = cfg_.grid.eos();
    const int lim = pos % 2 == 0 ? cfg_.grid.width_cells : cfg_.grid.height_cells;
    std::vector<double> l(static_cast<std::size_t>(eos + 1), -std::numeric_limits<double>::infinity());
    for (int t = 0; t < lim; ++t) l[static_cast<std::size_t>(t)] = logits.at(row, static_cast<std::size_t>(t));
    if (pos % 2 == 0) l[static_cast<std::size_t>(eos)] = logits.at(row, static_cast<std::size_t>(eos));
    if (opt.mode == DecodeMode::kGreedy) {
      return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
    }
    const double mx = *std::max_element(l.begin(), l.end());
    std::vector<double> p(l.size());
    for (std::size_t t = 0; t < l.size(); ++t) p[t] = std::exp((l[t] - mx) / std::max(opt.temperature, 1e-6));
    std::discrete_distribution<int> dist(p.begin(), p.end());
    return dist(rng);
  }

  ModelConfig cfg_;
  ad::ParamStore params_;
  nn::Linear patch_embed_;
  std::vector<nn::EncoderBlock> encoder_;
  nn::LayerNorm encoder_norm_;
  ad::Tensor pos_enc_;
  ad::Tensor element_embed_, keypoint_embed_;
  nn::Linear ref_init_;
  std::vector<DetectorLayer> detector_;
  nn::LayerNorm head_norm_;
  nn::Mlp kp_head_, cls_head_;
  ad::Tensor value_embed_, coord_embed_, pos_embed_;
  std::vector<GeneratorLayer> generator_;
  nn::LayerNorm gen_norm_;
  nn::Linear gen_out_;
};

}  // namespace vmap
