#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "uconv/error.hpp"
#include "uconv/ops.hpp"
#include "uconv/rng.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

namespace uconv::layers {

// Conformer block and sublayers. Inputs are padded batches [B, T, d] with a
// per-utterance valid-length vector; every sublayer keeps padded frames from
// leaking into valid ones (attention masks keys, the conv module zeroes
// frames before its depthwise step).

struct LayerConfig {
  int64_t attn_dim = 280;
  int64_t heads = 8;
  int64_t ffn_dim = 1024;
  int64_t conv_kernel = 5;
  double dropout = 0.1;
  bool rel_pos = true;  // false: absolute sinusoidal added at stage entry

  void validate() const {
    if (attn_dim < 1 || heads < 1 || attn_dim % heads != 0) {
      throw ConfigError("attn_dim " + std::to_string(attn_dim) +
                        " must be a positive multiple of heads " +
                        std::to_string(heads));
    }
    if (ffn_dim < 1) throw ConfigError("ffn_dim must be positive");
    if (conv_kernel < 1 || conv_kernel % 2 == 0) {
      throw ConfigError("conv_kernel must be odd, got " +
                        std::to_string(conv_kernel));
    }
    if (dropout < 0.0 || dropout >= 1.0) {
      throw ConfigError("dropout must be in [0,1)");
    }
  }
};

inline void check_mask(const std::vector<int64_t>& lens, int64_t bsz,
                       int64_t t) {
  if (static_cast<int64_t>(lens.size()) != bsz) {
    throw ShapeError("mask has " + std::to_string(lens.size()) +
                     " lengths for a batch of " + std::to_string(bsz));
  }
  for (const int64_t l : lens) {
    if (l < 1 || l > t) {
      throw ShapeError("valid length " + std::to_string(l) +
                       " outside [1, " + std::to_string(t) + "]");
    }
  }
}

template <typename T>
void init_uniform(Tensor<T>& w, Rng& rng, int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  T* p = w.data();
  for (int64_t i = 0; i < w.numel(); ++i) {
    p[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
}

// Sinusoidal table for relative offsets T-1 .. -(T-1); row l encodes offset
// T-1-l, matching ops::rel_shift.
template <typename T>
Tensor<T> rel_pos_table(int64_t t, int64_t d) {
  Tensor<T> pe(Shape{2 * t - 1, d});
  for (int64_t l = 0; l < 2 * t - 1; ++l) {
    const double pos = static_cast<double>(t - 1 - l);
    for (int64_t j = 0; j < d; ++j) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(j / 2) /
                                static_cast<double>(d));
      pe.at(l, j) = static_cast<T>(j % 2 == 0 ? std::sin(pos * freq)
                                              : std::cos(pos * freq));
    }
  }
  return pe;
}

// Absolute positions 0 .. t-1, added to stage inputs when rel_pos is off.
template <typename T>
Tensor<T> abs_pos_table(int64_t t, int64_t d) {
  Tensor<T> pe(Shape{t, d});
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(j / 2) /
                                static_cast<double>(d));
      pe.at(i, j) = static_cast<T>(j % 2 == 0
                                       ? std::sin(static_cast<double>(i) * freq)
                                       : std::cos(static_cast<double>(i) * freq));
    }
  }
  return pe;
}

template <typename T>
struct LinearP {
  Parameter<T> w;
  Parameter<T> b;
  bool has_bias = true;

  void init(const std::string& name, Rng& rng, int64_t din, int64_t dout,
            bool bias = true) {
    w = Parameter<T>(name + ".w", Tensor<T>(Shape{din, dout}));
    init_uniform(w.value, rng, din);
    has_bias = bias;
    if (bias) b = Parameter<T>(name + ".b", Tensor<T>(Shape{dout}));
  }
  Var<T> forward(Ctx<T>& ctx, const Var<T>& x) {
    return ops::linear(ctx, x, param_var(ctx, w),
                       has_bias ? param_var(ctx, b) : Var<T>());
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
  }
};

template <typename T>
struct LayerNormP {
  Parameter<T> gain;
  Parameter<T> bias;

  void init(const std::string& name, int64_t d) {
    gain = Parameter<T>(name + ".gain", Tensor<T>::full(Shape{d}, T(1)));
    bias = Parameter<T>(name + ".bias", Tensor<T>(Shape{d}));
  }
  Var<T> forward(Ctx<T>& ctx, const Var<T>& x) {
    return ops::layer_norm(ctx, x, param_var(ctx, gain),
                           param_var(ctx, bias));
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

// norm -> linear d->ffn -> swish -> dropout -> linear ffn->d. The caller adds
// the half-step residual.
template <typename T>
struct Ffn {
  LayerNormP<T> norm;
  LinearP<T> lin1, lin2;
  T drop = 0;

  void init(const std::string& name, Rng& rng, const LayerConfig& cfg) {
    norm.init(name + ".norm", cfg.attn_dim);
    lin1.init(name + ".lin1", rng, cfg.attn_dim, cfg.ffn_dim);
    lin2.init(name + ".lin2", rng, cfg.ffn_dim, cfg.attn_dim);
    drop = static_cast<T>(cfg.dropout);
  }
  Var<T> forward(Ctx<T>& ctx, const Var<T>& x) {
    Var<T> y = norm.forward(ctx, x);
    y = lin1.forward(ctx, y);
    y = ops::swish(ctx, y);
    y = ops::dropout(ctx, y, drop);
    return lin2.forward(ctx, y);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    norm.collect(out);
    lin1.collect(out);
    lin2.collect(out);
  }
};

// norm -> multi-head self-attention -> output linear -> dropout. With
// rel_pos, scores carry Transformer-XL content/position terms with learned
// per-head biases; otherwise plain scaled dot-product (positions enter as
// absolute embeddings upstream). The caller adds the residual.
template <typename T>
struct Mhsa {
  LayerNormP<T> norm;
  LinearP<T> lq, lk, lv, lo;
  LinearP<T> lpos;       // rel only, no bias
  Parameter<T> u, v;     // rel only, [heads, d/heads]
  int64_t heads = 1;
  bool rel = true;
  T drop = 0;

  void init(const std::string& name, Rng& rng, const LayerConfig& cfg) {
    const int64_t d = cfg.attn_dim;
    heads = cfg.heads;
    rel = cfg.rel_pos;
    drop = static_cast<T>(cfg.dropout);
    norm.init(name + ".norm", d);
    lq.init(name + ".q", rng, d, d);
    lk.init(name + ".k", rng, d, d);
    lv.init(name + ".v", rng, d, d);
    lo.init(name + ".out", rng, d, d);
    if (rel) {
      lpos.init(name + ".pos", rng, d, d, /*bias=*/false);
      u = Parameter<T>(name + ".u", Tensor<T>(Shape{heads, d / heads}));
      v = Parameter<T>(name + ".v", Tensor<T>(Shape{heads, d / heads}));
    }
  }

  // pos_table: rel_pos_table(T, d) for the current length; ignored when
  // rel is off. attn_probe, when set, receives the softmax weights.
  Var<T> forward(Ctx<T>& ctx, const Var<T>& x,
                 const std::vector<int64_t>& lens, const Tensor<T>* pos_table,
                 Tensor<T>* attn_probe = nullptr) {
    const int64_t bsz = x.value.dim(0);
    const int64_t t = x.value.dim(1);
    const int64_t d = x.value.dim(2);
    check_mask(lens, bsz, t);
    const int64_t dh = d / heads;

    Var<T> y = norm.forward(ctx, x);
    Var<T> qh = ops::split_heads(ctx, lq.forward(ctx, y), heads);
    Var<T> kh = ops::split_heads(ctx, lk.forward(ctx, y), heads);
    Var<T> vh = ops::split_heads(ctx, lv.forward(ctx, y), heads);

    Var<T> scores;
    if (rel) {
      if (!pos_table || pos_table->dim(0) != 2 * t - 1 ||
          pos_table->dim(1) != d) {
        throw ShapeError("mhsa: need a [2T-1, d] position table");
      }
      Var<T> qu = ops::add_head_bias(ctx, qh, param_var(ctx, u));
      Var<T> qv = ops::add_head_bias(ctx, qh, param_var(ctx, v));
      Var<T> content = ops::bmm_nt(ctx, qu, kh);
      Var<T> p = lpos.forward(ctx, ops::constant(*pos_table));
      Var<T> ph = ops::split_heads(
          ctx, ops::reshape(ctx, p, {1, 2 * t - 1, d}), heads);
      Var<T> position = ops::rel_shift(ctx, ops::bmm_nt(ctx, qv, ph));
      scores = ops::add(ctx, content, position);
    } else {
      scores = ops::bmm_nt(ctx, qh, kh);
    }
    scores = ops::scale(ctx, scores,
                        static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    scores = ops::mask_attn_scores(ctx, scores, lens, heads);
    Var<T> attn = ops::softmax_lastaxis(ctx, scores);
    if (attn_probe) *attn_probe = attn.value;

    Var<T> o = ops::merge_heads(ctx, ops::bmm(ctx, attn, vh), heads);
    o = lo.forward(ctx, o);
    return ops::dropout(ctx, o, drop);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    norm.collect(out);
    lq.collect(out);
    lk.collect(out);
    lv.collect(out);
    lo.collect(out);
    if (rel) {
      lpos.collect(out);
      out.push_back(&u);
      out.push_back(&v);
    }
  }
};

// norm -> pointwise d->2d -> GLU -> depthwise conv -> norm -> swish ->
// pointwise d->d -> dropout. Frames beyond each valid length are zeroed
// right before the depthwise step, the only place this module mixes time.
template <typename T>
struct ConvModule {
  LayerNormP<T> norm1, norm2;
  LinearP<T> pw1, pw2;
  Parameter<T> dw_w, dw_b;
  T drop = 0;

  void init(const std::string& name, Rng& rng, const LayerConfig& cfg) {
    const int64_t d = cfg.attn_dim;
    norm1.init(name + ".norm1", d);
    pw1.init(name + ".pw1", rng, d, 2 * d);
    dw_w = Parameter<T>(name + ".dw.w", Tensor<T>(Shape{cfg.conv_kernel, d}));
    init_uniform(dw_w.value, rng, cfg.conv_kernel);
    dw_b = Parameter<T>(name + ".dw.b", Tensor<T>(Shape{d}));
    norm2.init(name + ".norm2", d);
    pw2.init(name + ".pw2", rng, d, d);
    drop = static_cast<T>(cfg.dropout);
  }

  Var<T> forward(Ctx<T>& ctx, const Var<T>& x,
                 const std::vector<int64_t>& lens) {
    check_mask(lens, x.value.dim(0), x.value.dim(1));
    Var<T> y = norm1.forward(ctx, x);
    y = ops::glu_lastaxis(ctx, pw1.forward(ctx, y));
    y = ops::mask_frames(ctx, y, lens);
    y = ops::dwconv1d(ctx, y, param_var(ctx, dw_w), param_var(ctx, dw_b));
    y = norm2.forward(ctx, y);
    y = ops::swish(ctx, y);
    y = pw2.forward(ctx, y);
    return ops::dropout(ctx, y, drop);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    norm1.collect(out);
    pw1.collect(out);
    out.push_back(&dw_w);
    out.push_back(&dw_b);
    norm2.collect(out);
    pw2.collect(out);
  }
};

// x +0.5*ffn -> +mhsa -> +conv -> +0.5*ffn -> final norm.
template <typename T>
struct ConformerBlock {
  Ffn<T> ffn1, ffn2;
  Mhsa<T> mhsa;
  ConvModule<T> conv;
  LayerNormP<T> norm_out;

  void init(const std::string& name, Rng& rng, const LayerConfig& cfg) {
    cfg.validate();
    ffn1.init(name + ".ffn1", rng, cfg);
    mhsa.init(name + ".mhsa", rng, cfg);
    conv.init(name + ".conv", rng, cfg);
    ffn2.init(name + ".ffn2", rng, cfg);
    norm_out.init(name + ".norm_out", cfg.attn_dim);
  }

  Var<T> forward(Ctx<T>& ctx, const Var<T>& x,
                 const std::vector<int64_t>& lens,
                 const Tensor<T>* pos_table) {
    Var<T> h = ops::add_scaled(ctx, x, ffn1.forward(ctx, x), T(0.5));
    h = ops::add(ctx, h, mhsa.forward(ctx, h, lens, pos_table));
    h = ops::add(ctx, h, conv.forward(ctx, h, lens));
    h = ops::add_scaled(ctx, h, ffn2.forward(ctx, h), T(0.5));
    return norm_out.forward(ctx, h);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    ffn1.collect(out);
    mhsa.collect(out);
    conv.collect(out);
    ffn2.collect(out);
    norm_out.collect(out);
  }
};

// Total element count across a module's parameters.
template <typename T, typename M>
int64_t count_params(M& module) {
  std::vector<Parameter<T>*> ps;
  module.collect(ps);
  int64_t n = 0;
  for (const auto* p : ps) n += p->value.numel();
  return n;
}

}  // namespace uconv::layers
