#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uconv/error.hpp"
#include "uconv/frontend.hpp"
#include "uconv/kernels.hpp"
#include "uconv/model.hpp"
#include "uconv/rng.hpp"
#include "uconv/tensor.hpp"

namespace uconv::bench {

struct SyntheticUtterance {
  Tensor<float> feats;  // [T, 80]
  std::vector<int64_t> labels;
};

// Seeded noise features sized like duration_s of audio. Compute cost is
// content-independent, so noise times the same as speech.
inline SyntheticUtterance make_synthetic(double duration_s,
                                         int64_t transcript_len,
                                         int64_t vocab_size, uint64_t seed) {
  const auto samples = static_cast<int64_t>(
      std::llround(duration_s * static_cast<double>(frontend::kSampleRate)));
  if (samples < frontend::kWindow) {
    throw ShapeError("synthetic utterance too short: " +
                     std::to_string(samples) + " samples");
  }
  if (vocab_size < 2) throw ShapeError("vocab_size must be >= 2");
  if (transcript_len < 0) throw ShapeError("transcript_len must be >= 0");
  const int64_t t = (samples - frontend::kWindow) / frontend::kHop + 1;

  SyntheticUtterance out;
  out.feats = Tensor<float>(Shape{t, frontend::kNumMels});
  Rng rng(seed);
  for (int64_t i = 0; i < out.feats.numel(); ++i) {
    out.feats[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  for (int64_t i = 0; i < transcript_len; ++i) {
    out.labels.push_back(1 + static_cast<int64_t>(rng.uniform_int(
                                 static_cast<uint64_t>(vocab_size - 1))));
  }
  return out;
}

struct ModelEntry {
  std::string name;
  int64_t params = 0;
  std::string policy;
  std::string layers;
  double median_ms = 0.0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double delta_vs_baseline_pct = 0.0;
  std::vector<double> run_ms;                      // raw timed passes
  std::vector<std::pair<std::string, double>> stage_ms;  // means over passes
};

struct BenchReport {
  double duration_s = 0.0;
  int64_t repeats = 0;
  std::vector<ModelEntry> entries;

  std::string markdown() const;
  std::string csv() const;
};

namespace detail {

inline double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double stddev(const std::vector<double>& xs) {
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size()));
}

struct SingleThreadScope {
  int saved;
  SingleThreadScope() : saved(kernels::max_threads()) {
    kernels::set_max_threads(1);
  }
  ~SingleThreadScope() { kernels::set_max_threads(saved); }
};

}  // namespace detail

// Times inference passes over one synthetic utterance: `warmups` untimed,
// then `repeats` timed, all single-threaded in 32-bit floats.
inline ModelEntry time_forward(model::Encoder<float>& enc,
                               const std::string& name, double duration_s,
                               int threads, int64_t repeats, uint64_t seed,
                               int warmups = 2) {
  if (threads != 1) {
    throw ConfigError("timing protocol is single-threaded, got " +
                      std::to_string(threads) + " threads");
  }
  if (repeats < 5) throw ConfigError("need at least 5 repeats");

  const SyntheticUtterance utt = make_synthetic(duration_s, 0, 2, seed);
  const int64_t t = utt.feats.dim(0);
  Tensor<float> feats(Shape{1, t, frontend::kNumMels});
  std::copy(utt.feats.data(), utt.feats.data() + utt.feats.numel(),
            feats.data());
  const Var<float> input(feats);
  const std::vector<int64_t> lens{t};

  detail::SingleThreadScope one_thread;
  if (kernels::max_threads() != 1) {
    throw ConfigError("worker pool did not honor the single-thread protocol");
  }

  ModelEntry entry;
  entry.name = name;
  entry.params = enc.count_params();
  entry.policy = enc.cfg.policy.levels_str();
  entry.layers = enc.cfg.policy.layers_str();

  Ctx<float> ctx{nullptr, false, nullptr};
  for (int i = 0; i < warmups; ++i) enc.forward(ctx, input, lens);

  std::map<std::string, double> stage_sum;
  std::vector<std::string> stage_order;
  for (int64_t r = 0; r < repeats; ++r) {
    std::vector<model::StageTiming> timing;
    const auto t0 = std::chrono::steady_clock::now();
    enc.forward(ctx, input, lens, &timing);
    const auto t1 = std::chrono::steady_clock::now();
    entry.run_ms.push_back(
        std::chrono::duration<double, std::milli>(t1 - t0).count());
    for (const model::StageTiming& st : timing) {
      if (stage_sum.find(st.label) == stage_sum.end()) {
        stage_order.push_back(st.label);
      }
      stage_sum[st.label] += st.seconds * 1e3;
    }
  }
  entry.median_ms = detail::median(entry.run_ms);
  entry.mean_ms = detail::mean(entry.run_ms);
  entry.std_ms = detail::stddev(entry.run_ms);
  for (const std::string& label : stage_order) {
    entry.stage_ms.emplace_back(label,
                                stage_sum[label] / static_cast<double>(repeats));
  }
  return entry;
}

struct NamedConfig {
  std::string name;
  model::EncoderConfig config;
};

// First model is the baseline; deltas are from medians, negative = faster.
inline BenchReport compare(const std::vector<NamedConfig>& models,
                           double duration_s, int64_t repeats,
                           uint64_t seed = 42) {
  if (models.size() < 2) {
    throw ConfigError("compare needs a baseline and at least one candidate");
  }
  BenchReport report;
  report.duration_s = duration_s;
  report.repeats = repeats;
  for (const NamedConfig& nc : models) {
    model::Encoder<float> enc;
    enc.build(nc.config);
    report.entries.push_back(
        time_forward(enc, nc.name, duration_s, 1, repeats, seed));
  }
  const double base = report.entries.front().median_ms;
  for (ModelEntry& e : report.entries) {
    e.delta_vs_baseline_pct = 100.0 * (e.median_ms - base) / base;
  }
  return report;
}

inline std::string BenchReport::markdown() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "| model | params | policy | layers | median ms | mean ms | std ms "
        "| delta vs baseline |\n";
  os << "|---|---:|---|---|---:|---:|---:|---:|\n";
  for (const ModelEntry& e : entries) {
    os << "| " << e.name << " | " << e.params << " | " << e.policy << " | "
       << e.layers << " | " << e.median_ms << " | " << e.mean_ms << " | "
       << e.std_ms << " | " << std::showpos << e.delta_vs_baseline_pct
       << std::noshowpos << "% |\n";
  }
  return os.str();
}

inline std::string BenchReport::csv() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "model,params,policy,layers,median_ms,mean_ms,std_ms,"
        "delta_vs_baseline_pct\n";
  for (const ModelEntry& e : entries) {
    os << e.name << ',' << e.params << ',' << e.policy << ',' << e.layers
       << ',' << e.median_ms << ',' << e.mean_ms << ',' << e.std_ms << ','
       << e.delta_vs_baseline_pct << '\n';
  }
  return os.str();
}

}  // namespace uconv::bench
