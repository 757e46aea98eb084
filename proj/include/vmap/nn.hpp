#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "optim.hpp"
#include "tensor.hpp"

namespace vmap::nn {

using ad::ParamStore;
using ad::Tensor;

/// Per-forward state: dropout rate and the generator that draws masks. A null
/// rng disables dropout.
struct Context {
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

inline Tensor drop(const Tensor& x, const Context& ctx) {
  if (!ctx.rng || ctx.dropout <= 0.0) return x;
  return ad::dropout(x, ctx.dropout, *ctx.rng);
}

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out], absent when built without bias
  bool has_bias = true;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
         double gain = 1.0, bool bias = true)
      : has_bias(bias) {
    w = ps.add_normal(name + ".w", {in, out}, gain / std::sqrt(static_cast<double>(in)), rng);
    if (bias) b = ps.add_constant(name + ".b", {out}, 0.0);
  }

  Tensor operator()(const Tensor& x) const { return has_bias ? ad::add(ad::matmul(x, w), b) : ad::matmul(x, w); }
};

struct LayerNorm {
  Tensor gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t d) {
    gamma = ps.add_constant(name + ".gamma", {d}, 1.0);
    beta = ps.add_constant(name + ".beta", {d}, 0.0);
  }

  Tensor operator()(const Tensor& x) const { return ad::layer_norm(x, gamma, beta); }
};

/// Two-layer perceptron with GELU.
struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
      std::mt19937_64& rng) : fc1(ps, name + ".fc1", in, hidden, rng), fc2(ps, name + ".fc2", hidden, out, rng) {}

  Tensor operator()(const Tensor& x, const Context& ctx = {}) const { return fc2(drop(ad::gelu(fc1(x)), ctx)); }
};

/// Keys and values already split per head.
struct KeyValue {
  std::vector<Tensor> k, v;
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  std::size_t heads = 1;
  std::size_t dim = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, std::size_t d, std::size_t n_heads,
                     std::mt19937_64& rng)
      : q(ps, name + ".q", d, d, rng),
        // A key bias only shifts every logit of a query equally.
        k(ps, name + ".k", d, d, rng, 1.0, false),
        v(ps, name + ".v", d, d, rng),
        o(ps, name + ".o", d, d, rng),
        heads(n_heads),
        dim(d) {
    if (d % n_heads != 0) throw ad::ShapeError("attention width " + std::to_string(d) + " not divisible by heads");
  }

  KeyValue project(const Tensor& memory) const {
    const Tensor kk = k(memory), vv = v(memory);
    const std::size_t dh = dim / heads;
    KeyValue kv;
    for (std::size_t h = 0; h < heads; ++h) {
      kv.k.push_back(ad::slice_cols(kk, h * dh, dh));
      kv.v.push_back(ad::slice_cols(vv, h * dh, dh));
    }
    return kv;
  }

  /// `mask` is an additive [Tq, Tk] constant (large negative entries block).
  Tensor attend(const Tensor& x, const KeyValue& kv, const std::optional<Tensor>& mask, const Context& ctx) const {
    const Tensor qq = q(x);
    const std::size_t dh = dim / heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor logits = ad::scale(ad::matmul_nt(ad::slice_cols(qq, h * dh, dh), kv.k[h]), s);
      if (mask) logits = ad::add(logits, *mask);
      outs.push_back(ad::matmul(drop(ad::softmax(logits), ctx), kv.v[h]));
    }
    return o(heads == 1 ? outs[0] : ad::concat(outs, 1));
  }

  Tensor operator()(const Tensor& x, const Tensor& memory, const std::optional<Tensor>& mask,
                    const Context& ctx) const {
    return attend(x, project(memory), mask, ctx);
  }
};

/// Pre-norm transformer encoder block.
struct EncoderBlock {
  LayerNorm ln1, ln2;
  MultiHeadAttention attn;
  Mlp ffn;

  EncoderBlock() = default;
  EncoderBlock(ParamStore& ps, const std::string& name, std::size_t d, std::size_t heads, std::size_t hidden,
               std::mt19937_64& rng)
      : ln1(ps, name + ".ln1", d),
        ln2(ps, name + ".ln2", d),
        attn(ps, name + ".attn", d, heads, rng),
        ffn(ps, name + ".ffn", d, hidden, d, rng) {}

  Tensor operator()(const Tensor& x, const Context& ctx) const {
    const Tensor h = ln1(x);
    const Tensor y = ad::add(x, drop(attn(h, h, std::nullopt, ctx), ctx));
    return ad::add(y, drop(ffn(ln2(y), ctx), ctx));
  }
};

/// Fixed 2-D sinusoidal encoding, [rows*cols, d]: the first half of the
/// channels encodes the column, the second half the row.
inline Tensor sinusoid_2d(std::size_t rows, std::size_t cols, std::size_t d) {
  if (d % 4 != 0) throw ad::ShapeError("positional encoding width must be a multiple of 4");
  const std::size_t half = d / 2;
  std::vector<double> v(rows * cols * d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double* out = v.data() + (r * cols + c) * d;
      for (std::size_t i = 0; i < half / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(half));
        out[2 * i] = std::sin(static_cast<double>(c) * freq);
        out[2 * i + 1] = std::cos(static_cast<double>(c) * freq);
        out[half + 2 * i] = std::sin(static_cast<double>(r) * freq);
        out[half + 2 * i + 1] = std::cos(static_cast<double>(r) * freq);
      }
    }
  }
  return Tensor::constant({rows * cols, d}, std::move(v));
}

inline constexpr double kMaskedLogit = -1e9;

}  // namespace vmap::nn
