#pragma once

#include <chrono>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uconv/error.hpp"
#include "uconv/io.hpp"
#include "uconv/layers.hpp"
#include "uconv/ops.hpp"
#include "uconv/reduction.hpp"
#include "uconv/rng.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

namespace uconv::model {

// Encoder assembly: frontend, Conformer stages at the policy's reduction
// levels, downsample/upsample transitions with skip connections, and a
// shared linear projection producing CTC logits.

struct EncoderConfig {
  reduction::ReductionPolicy policy;
  layers::LayerConfig layer;
  int64_t vocab_size = 257;
  bool intermediate_ctc = false;
  double lambda = 0.5;
  int64_t frontend_channels = 64;
  uint64_t seed = 42;

  void validate() const {
    policy.validate();
    layer.validate();
    if (vocab_size < 2) {
      throw ConfigError("vocab_size must be at least 2 (blank + one label)");
    }
    if (policy.total_layers() < 1) {
      throw ConfigError("policy has no Conformer layers");
    }
    if (lambda < 0.0 || lambda > 1.0) {
      throw ConfigError("lambda must be in [0,1]");
    }
    if (frontend_channels < 1) {
      throw ConfigError("frontend_channels must be positive");
    }
  }

  std::string to_kv() const {
    std::map<std::string, std::string> kv;
    kv["policy"] = policy.levels_str();
    kv["layers"] = policy.layers_str();
    kv["attn_dim"] = std::to_string(layer.attn_dim);
    kv["heads"] = std::to_string(layer.heads);
    kv["ffn_dim"] = std::to_string(layer.ffn_dim);
    kv["conv_kernel"] = std::to_string(layer.conv_kernel);
    kv["vocab_size"] = std::to_string(vocab_size);
    kv["intermediate_ctc"] = intermediate_ctc ? "true" : "false";
    kv["frontend_channels"] = std::to_string(frontend_channels);
    kv["pos_enc"] = layer.rel_pos ? "rel" : "abs";
    kv["seed"] = std::to_string(seed);
    std::ostringstream lam, drop;
    lam << std::setprecision(17) << lambda;
    drop << std::setprecision(17) << layer.dropout;
    kv["lambda"] = lam.str();
    kv["dropout"] = drop.str();
    return io::kv_to_string(kv);
  }

  static EncoderConfig from_kv(const std::string& text) {
    std::map<std::string, std::string> kv = io::parse_kv(text);
    EncoderConfig cfg;
    auto take = [&kv](const std::string& key) {
      auto it = kv.find(key);
      if (it == kv.end()) {
        throw ConfigError("missing config key '" + key + "'");
      }
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    auto take_or = [&kv](const std::string& key, const std::string& dflt) {
      auto it = kv.find(key);
      if (it == kv.end()) return dflt;
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    auto to_int = [](const std::string& key, const std::string& v) {
      try {
        size_t used = 0;
        const long long n = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return static_cast<int64_t>(n);
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got \"" +
                          v + "\"");
      }
    };
    auto to_float = [](const std::string& key, const std::string& v) {
      try {
        size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got \"" +
                          v + "\"");
      }
    };
    auto to_bool = [](const std::string& key, const std::string& v) {
      if (v == "true") return true;
      if (v == "false") return false;
      throw ConfigError("key '" + key + "': expected true or false, got \"" +
                        v + "\"");
    };

    cfg.policy = reduction::parse_policy(take("policy"), take("layers"));
    cfg.layer.attn_dim = to_int("attn_dim", take("attn_dim"));
    cfg.layer.heads = to_int("heads", take("heads"));
    cfg.layer.ffn_dim = to_int("ffn_dim", take("ffn_dim"));
    cfg.layer.conv_kernel = to_int("conv_kernel", take("conv_kernel"));
    cfg.vocab_size = to_int("vocab_size", take("vocab_size"));
    cfg.intermediate_ctc =
        to_bool("intermediate_ctc", take_or("intermediate_ctc", "false"));
    cfg.lambda = to_float("lambda", take_or("lambda", "0.5"));
    cfg.layer.dropout = to_float("dropout", take_or("dropout", "0.1"));
    cfg.seed =
        static_cast<uint64_t>(to_int("seed", take_or("seed", "42")));
    cfg.frontend_channels =
        to_int("frontend_channels", take_or("frontend_channels", "64"));
    const std::string pos = take_or("pos_enc", "rel");
    if (pos != "rel" && pos != "abs") {
      throw ConfigError("key 'pos_enc': expected rel or abs, got \"" + pos +
                        "\"");
    }
    cfg.layer.rel_pos = (pos == "rel");

    if (!kv.empty()) {
      throw ConfigError("unknown config key '" + kv.begin()->first + "'");
    }
    cfg.validate();
    return cfg;
  }
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "conformer-s",    "conv-conformer-v1", "conv-conformer-v2",
      "uconv-d8-f4",    "uconv-d16-f4",      "uconv-d16-f8-v1",
      "uconv-d16-f8-v2", "uconv-d32-f8",     "conformer-l",
      "uconv-l-d16-f8-v1"};
  return names;
}

// Published model rows: the small geometry is 280/8/1024/k5 with 64 frontend
// channels, the large one 512/8/2048/k31 with 512 channels.
inline EncoderConfig preset(const std::string& name) {
  EncoderConfig cfg;
  cfg.layer.attn_dim = 280;
  cfg.layer.heads = 8;
  cfg.layer.ffn_dim = 1024;
  cfg.layer.conv_kernel = 5;
  cfg.frontend_channels = 64;
  cfg.vocab_size = 257;
  cfg.intermediate_ctc = true;

  auto large = [&cfg]() {
    cfg.layer.attn_dim = 512;
    cfg.layer.ffn_dim = 2048;
    cfg.layer.conv_kernel = 31;
    cfg.frontend_channels = 512;
  };

  if (name == "conformer-s") {
    cfg.policy = reduction::parse_policy("x4", "12");
    cfg.intermediate_ctc = false;
  } else if (name == "conv-conformer-v1") {
    cfg.policy = reduction::parse_policy("x4-x8", "2-10");
  } else if (name == "conv-conformer-v2") {
    cfg.policy = reduction::parse_policy("x4-x8", "4-8");
  } else if (name == "uconv-d8-f4") {
    cfg.policy = reduction::parse_policy("x4-x8-x4", "2-8-2");
  } else if (name == "uconv-d16-f4") {
    cfg.policy = reduction::parse_policy("x4-x8-x16-x8-x4", "2-2-4-2-2");
  } else if (name == "uconv-d16-f8-v1") {
    cfg.policy = reduction::parse_policy("x4-x8-x16-x8", "3-3-3-3");
  } else if (name == "uconv-d16-f8-v2") {
    cfg.policy = reduction::parse_policy("x4-x8-x16-x8", "2-4-5-1");
  } else if (name == "uconv-d32-f8") {
    cfg.policy =
        reduction::parse_policy("x4-x8-x16-x32-x16-x8", "2-2-2-2-2-2");
  } else if (name == "conformer-l") {
    cfg.policy = reduction::parse_policy("x4", "12");
    cfg.intermediate_ctc = false;
    large();
  } else if (name == "uconv-l-d16-f8-v1") {
    cfg.policy = reduction::parse_policy("x4-x8-x16-x8", "3-3-3-3");
    large();
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  cfg.validate();
  return cfg;
}

template <typename T>
struct EncoderOutput {
  Var<T> final_logits;                      // [B, T_out, vocab]
  std::vector<Var<T>> intermediate_logits;  // same extents, one per tap
  std::vector<int64_t> out_lens;            // per-utterance valid lengths
};

struct StageTiming {
  std::string label;
  double seconds;
};

template <typename T>
class Encoder {
 public:
  EncoderConfig cfg;

  void build(const EncoderConfig& config) {
    config.validate();
    cfg = config;
    Rng rng(cfg.seed);
    frontend_.init("frontend", rng, cfg.layer.attn_dim,
                   cfg.frontend_channels);
    blocks_.clear();
    downs_.clear();
    size_t down_idx = 0;
    int64_t block_idx = 0;
    for (size_t s = 0; s < cfg.policy.stages(); ++s) {
      if (s > 0 && cfg.policy.levels[s] > cfg.policy.levels[s - 1]) {
        downs_.emplace_back();
        downs_.back().init("down" + std::to_string(down_idx++), rng,
                           cfg.layer.attn_dim);
      }
      for (int64_t j = 0; j < cfg.policy.layers_per_level[s]; ++j) {
        blocks_.emplace_back();
        blocks_.back().init("block" + std::to_string(block_idx++), rng,
                            cfg.layer);
      }
    }
    out_proj_.init("out", rng, cfg.layer.attn_dim, cfg.vocab_size);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps;
    frontend_.collect(ps);
    for (auto& d : downs_) d.collect(ps);
    for (auto& b : blocks_) b.collect(ps);
    out_proj_.collect(ps);
    return ps;
  }

  int64_t count_params() {
    int64_t n = 0;
    for (const auto* p : parameters()) n += p->value.numel();
    return n;
  }

  // feats [B, T, 80] with per-utterance valid lengths. When timing is given,
  // each architectural piece contributes one wall-time entry.
  EncoderOutput<T> forward(Ctx<T>& ctx, const Var<T>& feats,
                           const std::vector<int64_t>& lens,
                           std::vector<StageTiming>* timing = nullptr) {
    using clock = std::chrono::steady_clock;
    auto mark = [&timing](const std::string& label, clock::time_point t0) {
      if (timing) {
        timing->push_back(
            {label, std::chrono::duration<double>(clock::now() - t0).count()});
      }
    };

    const int64_t bsz = feats.value.dim(0);
    for (size_t i = 0; i < lens.size(); ++i) {
      if (lens[i] < 1) {
        throw ShapeError("utterance " + std::to_string(i) +
                         " has no frames");
      }
    }
    layers::check_mask(lens, bsz, feats.value.dim(1));

    auto t0 = clock::now();
    Var<T> x = frontend_.forward(ctx, feats, lens);
    std::vector<int64_t> cur(lens.size());
    for (size_t i = 0; i < lens.size(); ++i) {
      cur[i] = reduction::frontend_len(lens[i]);
    }
    mark("frontend x4", t0);

    // Descending-side activations, consumed by the matching ascent.
    std::map<int64_t, std::pair<Var<T>, std::vector<int64_t>>> skips;
    std::vector<std::pair<Var<T>, int64_t>> taps;  // (stage output, level)

    size_t down_idx = 0;
    size_t block_idx = 0;
    for (size_t s = 0; s < cfg.policy.stages(); ++s) {
      const int64_t level = cfg.policy.levels[s];
      if (s > 0) {
        t0 = clock::now();
        if (level > cfg.policy.levels[s - 1]) {
          x = downs_[down_idx++].forward(ctx, x, cur);
          for (auto& l : cur) l = reduction::half_len(l);
          mark("downsample to x" + std::to_string(level), t0);
        } else {
          auto it = skips.find(level);
          if (it == skips.end()) {
            throw StateError("no skip recorded at level x" +
                             std::to_string(level));
          }
          x = reduction::skip_combine(ctx, ops::upsample2(ctx, x),
                                      it->second.first);
          cur = it->second.second;
          mark("upsample to x" + std::to_string(level), t0);
        }
      }

      t0 = clock::now();
      const int64_t t_ext = x.value.dim(1);
      Tensor<T> pos;
      if (cfg.layer.rel_pos) {
        pos = layers::rel_pos_table<T>(t_ext, cfg.layer.attn_dim);
      } else {
        // absolute positions enter once per stage
        Tensor<T> table =
            layers::abs_pos_table<T>(t_ext, cfg.layer.attn_dim);
        Tensor<T> tiled(Shape{bsz, t_ext, cfg.layer.attn_dim});
        for (int64_t b = 0; b < bsz; ++b) {
          std::copy(table.data(), table.data() + table.numel(),
                    tiled.data() + b * table.numel());
        }
        x = ops::add(ctx, x, ops::constant(tiled));
      }
      for (int64_t j = 0; j < cfg.policy.layers_per_level[s]; ++j) {
        x = blocks_[block_idx++].forward(ctx, x, cur,
                                         cfg.layer.rel_pos ? &pos : nullptr);
      }
      mark("stage x" + std::to_string(level) + " (" +
               std::to_string(cfg.policy.layers_per_level[s]) + " layers)",
           t0);

      skips[level] = {x, cur};
      if (cfg.intermediate_ctc && s + 1 < cfg.policy.stages()) {
        taps.push_back({x, level});
      }
    }

    EncoderOutput<T> out;
    out.out_lens = cur;
    t0 = clock::now();
    out.final_logits = out_proj_.forward(ctx, x);
    mark("output projection", t0);

    const int64_t t_final = x.value.dim(1);
    const int64_t final_level = cfg.policy.final_reduction();
    t0 = clock::now();
    for (auto& [tap, level] : taps) {
      Var<T> a = tap;
      int64_t l = level;
      while (l > final_level) {
        a = ops::upsample2(ctx, a);
        l /= 2;
      }
      while (l < final_level) {
        a = ops::decimate2(ctx, a);
        l *= 2;
      }
      if (a.value.dim(1) > t_final) {
        a = ops::truncate_time(ctx, a, t_final);
      } else if (a.value.dim(1) < t_final) {
        throw StateError("intermediate tap aligned to " +
                         std::to_string(a.value.dim(1)) + " frames, final is " +
                         std::to_string(t_final));
      }
      out.intermediate_logits.push_back(out_proj_.forward(ctx, a));
    }
    if (!taps.empty()) mark("intermediate heads", t0);
    return out;
  }

 private:
  reduction::FrontendX4<T> frontend_;
  std::vector<reduction::DownsampleX2<T>> downs_;
  std::vector<layers::ConformerBlock<T>> blocks_;
  layers::LinearP<T> out_proj_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, named tensors, then the config text.
// ---------------------------------------------------------------------------

namespace detail {

constexpr char kMagic[4] = {'U', 'C', 'N', 'V'};
constexpr uint32_t kVersion = 1;

template <typename T>
constexpr uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <typename T>
void save_checkpoint(Encoder<T>& enc, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(detail::kMagic, 4);
  io::write_u32(os, detail::kVersion);
  std::vector<Parameter<T>*> params = enc.parameters();
  io::write_u32(os, static_cast<uint32_t>(params.size()));
  for (const Parameter<T>* p : params) {
    if (p->name.size() > 0xffff) throw StateError("tensor name too long");
    io::write_u16(os, static_cast<uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    const Shape& shape = p->value.shape();
    os.put(static_cast<char>(shape.size()));
    for (const int64_t e : shape) {
      io::write_u32(os, static_cast<uint32_t>(e));
    }
    os.put(static_cast<char>(detail::dtype_code<T>()));
    const T* data = p->value.data();
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      if constexpr (std::is_same_v<T, float>) {
        io::write_f32(os, data[i]);
      } else {
        io::write_f64(os, data[i]);
      }
    }
  }
  const std::string cfg_text = enc.cfg.to_kv();
  io::write_u32(os, static_cast<uint32_t>(cfg_text.size()));
  os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  if (!os) throw IoError("write failed for " + path);
}

template <typename T>
Encoder<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[4];
  io::read_bytes(is, magic, 4);
  if (std::memcmp(magic, detail::kMagic, 4) != 0) {
    throw ParseError(path + ": bad magic");
  }
  const uint32_t version = io::read_u32(is);
  if (version != detail::kVersion) {
    throw ParseError(path + ": unsupported version " +
                     std::to_string(version));
  }
  const uint32_t count = io::read_u32(is);

  struct Stored {
    Shape shape;
    std::vector<double> data;  // f32 payloads are exact in double
  };
  std::map<std::string, Stored> stored;
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = io::read_u16(is);
    std::string name(name_len, '\0');
    io::read_bytes(is, name.data(), name_len);
    char rank_c;
    io::read_bytes(is, &rank_c, 1);
    Stored st;
    for (int r = 0; r < rank_c; ++r) {
      st.shape.push_back(io::read_u32(is));
    }
    char dtype;
    io::read_bytes(is, &dtype, 1);
    if (dtype != 0 && dtype != 1) {
      throw ParseError(path + ": tensor '" + name + "' has unknown dtype " +
                       std::to_string(static_cast<int>(dtype)));
    }
    const int64_t n = shape_numel(st.shape);
    st.data.resize(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
      st.data[static_cast<size_t>(j)] =
          dtype == 0 ? static_cast<double>(io::read_f32(is))
                     : io::read_f64(is);
    }
    if (!stored.emplace(std::move(name), std::move(st)).second) {
      throw ParseError(path + ": duplicate tensor");
    }
  }
  const uint32_t cfg_len = io::read_u32(is);
  std::string cfg_text(cfg_len, '\0');
  io::read_bytes(is, cfg_text.data(), cfg_len);
  is.peek();
  if (!is.eof()) throw ParseError(path + ": trailing bytes after config");

  Encoder<T> enc;
  enc.build(EncoderConfig::from_kv(cfg_text));
  for (Parameter<T>* p : enc.parameters()) {
    auto it = stored.find(p->name);
    if (it == stored.end()) {
      throw ParseError(path + ": missing tensor '" + p->name + "'");
    }
    if (it->second.shape != p->value.shape()) {
      throw ParseError(path + ": tensor '" + p->name + "' has shape " +
                       shape_str(it->second.shape) + ", expected " +
                       shape_str(p->value.shape()));
    }
    T* dst = p->value.data();
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      dst[i] = static_cast<T>(it->second.data[static_cast<size_t>(i)]);
    }
    stored.erase(it);
  }
  if (!stored.empty()) {
    throw ParseError(path + ": unknown tensor '" + stored.begin()->first +
                     "'");
  }
  return enc;
}

}  // namespace uconv::model
