#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "uconv/error.hpp"
#include "uconv/layers.hpp"
#include "uconv/ops.hpp"
#include "uconv/rng.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

namespace uconv::reduction {

// Temporal-resolution machinery: the initial x4 frontend, x2 down/upsampling
// between encoder stages, skip alignment, and the exact length arithmetic
// that keeps all of them consistent.

inline int64_t half_len(int64_t t) { return (t + 1) / 2; }
inline int64_t frontend_len(int64_t t) { return half_len(half_len(t)); }

// Ordered reduction levels (powers of two, starting at the x4 frontend) and
// the number of Conformer layers run at each.
struct ReductionPolicy {
  std::vector<int64_t> levels;
  std::vector<int64_t> layers_per_level;

  int64_t depth() const {
    return *std::max_element(levels.begin(), levels.end());
  }
  int64_t final_reduction() const { return levels.back(); }
  int64_t total_layers() const {
    int64_t n = 0;
    for (int64_t l : layers_per_level) n += l;
    return n;
  }
  size_t stages() const { return levels.size(); }

  void validate() const {
    if (levels.empty()) throw ParseError("policy has no levels");
    if (levels.front() != 4) {
      throw ParseError("first level must be x4, got x" +
                       std::to_string(levels.front()));
    }
    for (size_t i = 0; i < levels.size(); ++i) {
      const int64_t l = levels[i];
      if (l < 4 || (l & (l - 1)) != 0) {
        throw ParseError("level " + std::to_string(i + 1) + ": x" +
                         std::to_string(l) +
                         " is not a power of two >= 4");
      }
      if (i > 0 && levels[i - 1] != 2 * l && 2 * levels[i - 1] != l) {
        throw ParseError("level " + std::to_string(i + 1) + ": x" +
                         std::to_string(levels[i - 1]) + " -> x" +
                         std::to_string(l) +
                         " is not a single x2 step");
      }
    }
    if (layers_per_level.size() != levels.size()) {
      throw ParseError("got " + std::to_string(layers_per_level.size()) +
                       " layer counts for " + std::to_string(levels.size()) +
                       " levels");
    }
    for (int64_t n : layers_per_level) {
      if (n < 0) throw ParseError("negative layer count");
    }
  }

  std::string levels_str() const {
    std::string s;
    for (size_t i = 0; i < levels.size(); ++i) {
      if (i) s += '-';
      s += 'x';
      s += std::to_string(levels[i]);
    }
    return s;
  }
  std::string layers_str() const {
    std::string s;
    for (size_t i = 0; i < layers_per_level.size(); ++i) {
      if (i) s += '-';
      s += std::to_string(layers_per_level[i]);
    }
    return s;
  }
};

namespace detail {

inline int64_t parse_int(const std::string& text, size_t field,
                         const char* what) {
  if (text.empty() || text.size() > 9 ||
      text.find_first_not_of("0123456789") != std::string::npos) {
    throw ParseError(std::string(what) + " field " + std::to_string(field) +
                     ": expected an integer, got \"" + text + "\"");
  }
  return std::stoll(text);
}

inline std::vector<std::string> split_dash(const std::string& text) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t dash = text.find('-', start);
    out.push_back(text.substr(start, dash - start));
    if (dash == std::string::npos) break;
    start = dash + 1;
  }
  return out;
}

}  // namespace detail

// "D16-F8" -> x4-x8-x16-x8: climb from the x4 frontend to the depth, then
// descend to the final reduction.
inline std::vector<int64_t> expand_df(int64_t depth, int64_t final_red) {
  if (depth < 4 || (depth & (depth - 1)) != 0) {
    throw ParseError("depth x" + std::to_string(depth) +
                     " is not a power of two >= 4");
  }
  if (final_red < 4 || final_red > depth ||
      (final_red & (final_red - 1)) != 0) {
    throw ParseError("final reduction x" + std::to_string(final_red) +
                     " must be a power of two in [4, depth]");
  }
  std::vector<int64_t> levels;
  for (int64_t l = 4; l <= depth; l *= 2) levels.push_back(l);
  for (int64_t l = depth / 2; l >= final_red; l /= 2) levels.push_back(l);
  return levels;
}

// Accepts explicit levels ("x4-x8-x16-x8") or depth/final shorthand
// ("D16-F8"). layers_text gives per-level counts ("3-3-3-3"); when empty,
// twelve layers are split evenly across levels with the remainder going to
// the most-reduced stages.
inline ReductionPolicy parse_policy(const std::string& levels_text,
                                    const std::string& layers_text = "") {
  if (levels_text.empty()) throw ParseError("empty policy");
  ReductionPolicy p;

  if (levels_text[0] == 'D') {
    const size_t dash = levels_text.find("-F");
    if (dash == std::string::npos) {
      throw ParseError("shorthand policy \"" + levels_text +
                       "\" needs the form D<depth>-F<final>");
    }
    const int64_t depth =
        detail::parse_int(levels_text.substr(1, dash - 1), 1, "policy");
    const int64_t fin =
        detail::parse_int(levels_text.substr(dash + 2), 2, "policy");
    p.levels = expand_df(depth, fin);
  } else {
    const std::vector<std::string> parts = detail::split_dash(levels_text);
    for (size_t i = 0; i < parts.size(); ++i) {
      if (parts[i].empty() || parts[i][0] != 'x') {
        throw ParseError("policy field " + std::to_string(i + 1) +
                         ": expected x<n>, got \"" + parts[i] + "\"");
      }
      p.levels.push_back(
          detail::parse_int(parts[i].substr(1), i + 1, "policy"));
    }
  }

  if (layers_text.empty()) {
    const size_t n = p.levels.size();
    p.layers_per_level.assign(n, 12 / static_cast<int64_t>(n));
    int64_t extra = 12 % static_cast<int64_t>(n);
    // hand the remainder to the deepest levels, later stages first
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      if (p.levels[a] != p.levels[b]) return p.levels[a] > p.levels[b];
      return a > b;
    });
    for (size_t i = 0; extra > 0; ++i, --extra) {
      p.layers_per_level[order[i]] += 1;
    }
  } else {
    const std::vector<std::string> parts = detail::split_dash(layers_text);
    for (size_t i = 0; i < parts.size(); ++i) {
      p.layers_per_level.push_back(
          detail::parse_int(parts[i], i + 1, "layers"));
    }
  }

  p.validate();
  return p;
}

// Length entering each Conformer stage. Downsampling ceil-halves; an
// upsample doubles and truncates to the length last seen at that level, so
// the result aligns with the skip branch.
inline std::vector<int64_t> stage_lengths(const ReductionPolicy& policy,
                                          int64_t t) {
  policy.validate();
  if (t < 1) throw ShapeError("degenerate input of " + std::to_string(t) +
                              " frames");
  std::vector<int64_t> out;
  std::map<int64_t, int64_t> seen;
  int64_t cur = frontend_len(t);
  seen[4] = cur;
  out.push_back(cur);
  for (size_t i = 1; i < policy.levels.size(); ++i) {
    if (policy.levels[i] > policy.levels[i - 1]) {
      cur = half_len(cur);
    } else {
      cur *= 2;
      const auto it = seen.find(policy.levels[i]);
      if (it != seen.end()) cur = std::min(cur, it->second);
    }
    if (cur < 1) throw ShapeError("stage " + std::to_string(i + 1) +
                                  " reduces the input to zero frames");
    seen[policy.levels[i]] = cur;
    out.push_back(cur);
  }
  return out;
}

inline std::vector<int64_t> stage_lengths_batch(
    const ReductionPolicy& policy, const std::vector<int64_t>& lens,
    size_t stage) {
  std::vector<int64_t> out(lens.size());
  for (size_t i = 0; i < lens.size(); ++i) {
    out[i] = stage_lengths(policy, lens[i]).at(stage);
  }
  return out;
}

// log-mel [B,T,80] -> [B,ceil(ceil(T/2)/2), d] via two stride-2 3x3 convs
// over time x frequency and a linear projection of the flattened channels.
// Padded frames are zeroed around each conv so valid outputs never depend on
// the padded extent.
template <typename T>
struct FrontendX4 {
  Parameter<T> c1_w, c1_b, c2_w, c2_b;
  layers::LinearP<T> proj;
  int64_t channels = 64;
  int64_t n_mels = 80;

  void init(const std::string& name, Rng& rng, int64_t attn_dim,
            int64_t conv_channels) {
    channels = conv_channels;
    c1_w = Parameter<T>(name + ".c1.w",
                        Tensor<T>(Shape{3, 3, 1, channels}));
    layers::init_uniform(c1_w.value, rng, 9);
    c1_b = Parameter<T>(name + ".c1.b", Tensor<T>(Shape{channels}));
    c2_w = Parameter<T>(name + ".c2.w",
                        Tensor<T>(Shape{3, 3, channels, channels}));
    layers::init_uniform(c2_w.value, rng, 9 * channels);
    c2_b = Parameter<T>(name + ".c2.b", Tensor<T>(Shape{channels}));
    proj.init(name + ".proj", rng, (n_mels / 4) * channels, attn_dim);
  }

  Var<T> forward(Ctx<T>& ctx, const Var<T>& feats,
                 const std::vector<int64_t>& lens) {
    const int64_t bsz = feats.value.dim(0);
    const int64_t t = feats.value.dim(1);
    const int64_t f = feats.value.dim(2);
    if (feats.value.rank() != 3 || f != n_mels) {
      throw ShapeError("frontend: expected [B,T," + std::to_string(n_mels) +
                       "] features, got " + shape_str(feats.value.shape()));
    }
    layers::check_mask(lens, bsz, t);

    std::vector<int64_t> lens2(lens.size()), lens4(lens.size());
    for (size_t i = 0; i < lens.size(); ++i) {
      lens2[i] = half_len(lens[i]);
      lens4[i] = half_len(lens2[i]);
    }

    Var<T> x = ops::mask_frames(ctx, feats, lens);
    x = ops::reshape(ctx, x, {bsz, t, f, 1});
    x = ops::relu(ctx, ops::conv2d(ctx, x, param_var(ctx, c1_w),
                                   param_var(ctx, c1_b), 2, 1));
    const int64_t t2 = x.value.dim(1), f2 = x.value.dim(2);
    x = ops::reshape(ctx, x, {bsz, t2, f2 * channels});
    x = ops::mask_frames(ctx, x, lens2);
    x = ops::reshape(ctx, x, {bsz, t2, f2, channels});
    x = ops::relu(ctx, ops::conv2d(ctx, x, param_var(ctx, c2_w),
                                   param_var(ctx, c2_b), 2, 1));
    const int64_t t4 = x.value.dim(1), f4 = x.value.dim(2);
    x = ops::reshape(ctx, x, {bsz, t4, f4 * channels});
    x = ops::mask_frames(ctx, x, lens4);
    return proj.forward(ctx, x);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&c1_w);
    out.push_back(&c1_b);
    out.push_back(&c2_w);
    out.push_back(&c2_b);
    proj.collect(out);
  }
};

// conv1d(d->hidden, k3 s1) -> ReLU -> conv1d(hidden->hidden, k3 s2) -> ReLU
// -> conv1d(hidden->d, k1). Ceil-halves the frame count.
template <typename T>
struct DownsampleX2 {
  Parameter<T> c1_w, c1_b, c2_w, c2_b, c3_w, c3_b;

  void init(const std::string& name, Rng& rng, int64_t d,
            int64_t hidden = 512) {
    c1_w = Parameter<T>(name + ".c1.w", Tensor<T>(Shape{3, d, hidden}));
    layers::init_uniform(c1_w.value, rng, 3 * d);
    c1_b = Parameter<T>(name + ".c1.b", Tensor<T>(Shape{hidden}));
    c2_w = Parameter<T>(name + ".c2.w", Tensor<T>(Shape{3, hidden, hidden}));
    layers::init_uniform(c2_w.value, rng, 3 * hidden);
    c2_b = Parameter<T>(name + ".c2.b", Tensor<T>(Shape{hidden}));
    c3_w = Parameter<T>(name + ".c3.w", Tensor<T>(Shape{1, hidden, d}));
    layers::init_uniform(c3_w.value, rng, hidden);
    c3_b = Parameter<T>(name + ".c3.b", Tensor<T>(Shape{d}));
  }

  Var<T> forward(Ctx<T>& ctx, const Var<T>& x,
                 const std::vector<int64_t>& lens) {
    layers::check_mask(lens, x.value.dim(0), x.value.dim(1));
    Var<T> y = ops::mask_frames(ctx, x, lens);
    y = ops::relu(ctx, ops::conv1d(ctx, y, param_var(ctx, c1_w),
                                   param_var(ctx, c1_b), 1, 1));
    y = ops::mask_frames(ctx, y, lens);
    y = ops::relu(ctx, ops::conv1d(ctx, y, param_var(ctx, c2_w),
                                   param_var(ctx, c2_b), 2, 1));
    return ops::conv1d(ctx, y, param_var(ctx, c3_w), param_var(ctx, c3_b),
                       1, 0);
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&c1_w);
    out.push_back(&c1_b);
    out.push_back(&c2_w);
    out.push_back(&c2_b);
    out.push_back(&c3_w);
    out.push_back(&c3_b);
  }
};

// Nearest-neighbor doubling, truncated to the skip branch, then added to it.
// The doubled length may overshoot an odd skip length by one frame; anything
// else indicates a length-arithmetic bug upstream.
template <typename T>
Var<T> skip_combine(Ctx<T>& ctx, const Var<T>& upsampled,
                    const Var<T>& skip) {
  const int64_t tu = upsampled.value.dim(1);
  const int64_t ts = skip.value.dim(1);
  if (tu < ts || tu > ts + 1) {
    throw ShapeError("skip alignment: upsampled " + std::to_string(tu) +
                     " frames vs skip " + std::to_string(ts));
  }
  return ops::add(ctx, ops::truncate_time(ctx, upsampled, ts), skip);
}

}  // namespace uconv::reduction
