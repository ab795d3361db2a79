#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "uconv/ctc.hpp"
#include "uconv/error.hpp"
#include "uconv/frontend.hpp"
#include "uconv/io.hpp"
#include "uconv/model.hpp"
#include "uconv/ops.hpp"
#include "uconv/reduction.hpp"
#include "uconv/rng.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

namespace uconv::train {

struct ScheduleConfig {
  double peak_lr = 2e-3;
  int64_t warmup_steps = 25;
  int64_t total_steps = 1000;

  void validate() const {
    if (!(peak_lr > 0)) throw ConfigError("peak_lr must be positive");
    if (warmup_steps < 1 || warmup_steps > total_steps) {
      throw ConfigError("need 0 < warmup_steps <= total_steps");
    }
  }
};

// Linear ramp to peak over the warmup, inverse-sqrt decay after it.
inline double lr_at(int64_t step, const ScheduleConfig& s) {
  s.validate();
  if (step < 1) throw ShapeError("lr_at: step must be >= 1");
  if (step <= s.warmup_steps) {
    return s.peak_lr * static_cast<double>(step) /
           static_cast<double>(s.warmup_steps);
  }
  return s.peak_lr * std::sqrt(static_cast<double>(s.warmup_steps) /
                               static_cast<double>(step));
}

// Adam with decoupled weight decay. Moments are keyed by parameter name so
// the state survives rebuilding the parameter list.
template <std::floating_point T>
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 1e-6;
  int64_t step_count = 0;

  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };
  std::map<std::string, Moments> moments;

  void step(const std::vector<Parameter<T>*>& params, double lr) {
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (Parameter<T>* p : params) {
      if (!p->grad.defined()) throw StateError("adam: gradient not populated");
      Moments& mom = moments[p->name];
      if (!mom.m.defined()) {
        mom.m = Tensor<T>(p->value.shape());
        mom.v = Tensor<T>(p->value.shape());
      }
      if (mom.m.shape() != p->value.shape()) {
        throw ShapeError("adam: moment shape mismatch for " + p->name);
      }
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        const double g = static_cast<double>(p->grad[i]);
        const double m = beta1 * mom.m[i] + (1.0 - beta1) * g;
        const double v = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
        mom.m[i] = static_cast<T>(m);
        mom.v[i] = static_cast<T>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps) +
                              weight_decay * static_cast<double>(p->value[i]);
        p->value[i] = static_cast<T>(p->value[i] - lr * update);
      }
    }
  }
};

struct Utterance {
  std::string id;
  Tensor<double> feats;  // [T, 80]
  ctc::Labels labels;
  std::string transcript;
};

// Manifest rows are feature-or-wav path plus transcript path. WAV input runs
// through the log-mel pipeline with per-utterance normalization; FEAT files
// are taken as ready features.
inline std::vector<Utterance> load_dataset(const std::string& manifest_path,
                                           const io::Vocab& vocab) {
  std::vector<Utterance> out;
  for (const auto& [audio_path, text_path] : io::read_manifest(manifest_path)) {
    Utterance u;
    u.id = audio_path;
    if (audio_path.size() >= 4 &&
        audio_path.compare(audio_path.size() - 4, 4, ".wav") == 0) {
      frontend::AudioBuffer audio{io::read_wav_mono16k(audio_path)};
      u.feats = frontend::normalize(frontend::extract_logmel(audio));
    } else {
      u.feats = io::read_feat(audio_path);
    }
    u.transcript = io::read_text(text_path);
    u.labels = vocab.encode(u.transcript);
    out.push_back(std::move(u));
  }
  return out;
}

// Sort by length, then pack greedily so padded frames (count * max length in
// the batch) stay within the budget. Deterministic for a given input order.
inline std::vector<std::vector<size_t>> make_batches(
    const std::vector<int64_t>& lengths, int64_t frame_budget) {
  if (frame_budget < 1) throw ConfigError("frame_budget must be positive");
  std::vector<size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return lengths[a] < lengths[b];
  });
  std::vector<std::vector<size_t>> batches;
  for (size_t i : order) {
    if (!batches.empty()) {
      std::vector<size_t>& cur = batches.back();
      const int64_t widest = std::max(lengths[i], lengths[cur.front()]);
      if (widest * static_cast<int64_t>(cur.size() + 1) <= frame_budget) {
        cur.push_back(i);
        continue;
      }
    }
    batches.push_back({i});
  }
  return batches;
}

struct TrainOptions {
  ScheduleConfig schedule;
  int64_t steps = 100;
  uint64_t seed = 42;
  int64_t frame_budget = 20000;
  int64_t grad_accum = 1;
  bool augment = false;
  double weight_decay = 1e-6;

  void validate() const {
    schedule.validate();
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (grad_accum < 1) throw ConfigError("grad_accum must be >= 1");
    if (frame_budget < 1) throw ConfigError("frame_budget must be positive");
  }
};

struct TrainResult {
  std::vector<double> loss_trace;  // combined loss per optimizer step
  std::vector<double> lr_trace;
  int64_t dropped = 0;  // infeasible utterances removed before training
};

namespace detail {

template <std::floating_point T>
Var<T> batch_loss(Ctx<T>& ctx, model::Encoder<T>& enc,
                  const std::vector<Utterance>& data,
                  const std::vector<size_t>& batch, bool augment,
                  Rng& rng) {
  const int64_t bsz = static_cast<int64_t>(batch.size());
  int64_t max_t = 0;
  for (size_t i : batch) max_t = std::max(max_t, data[i].feats.dim(0));
  Tensor<T> feats(Shape{bsz, max_t, frontend::kNumMels});
  std::vector<int64_t> lens(batch.size());
  for (size_t b = 0; b < batch.size(); ++b) {
    Tensor<double> f = data[batch[b]].feats;
    if (augment) f = frontend::mask_augment(f, rng.next_u64());
    lens[b] = f.dim(0);
    for (int64_t t = 0; t < f.dim(0); ++t) {
      for (int64_t d = 0; d < f.dim(1); ++d) {
        feats.at(static_cast<int64_t>(b), t, d) = static_cast<T>(f.at(t, d));
      }
    }
  }

  model::EncoderOutput<T> out = enc.forward(ctx, Var<T>(feats), lens);
  Var<T> total;
  for (size_t b = 0; b < batch.size(); ++b) {
    const int64_t bi = static_cast<int64_t>(b);
    Var<T> fin = ctc::ctc_loss(
        ctx, ops::slice_sequence(ctx, out.final_logits, bi, out.out_lens[b]),
        data[batch[b]].labels);
    std::vector<Var<T>> inter;
    inter.reserve(out.intermediate_logits.size());
    for (const Var<T>& tap : out.intermediate_logits) {
      inter.push_back(ctc::ctc_loss(
          ctx, ops::slice_sequence(ctx, tap, bi, out.out_lens[b]),
          data[batch[b]].labels));
    }
    Var<T> one = ctc::combined_loss(ctx, fin, inter,
                                    static_cast<double>(enc.cfg.lambda));
    total = total.value.defined() ? ops::add(ctx, total, one) : one;
  }
  return ops::scale(ctx, total, static_cast<T>(1.0 / bsz));
}

}  // namespace detail

// Screens infeasible utterances, then loops batches in a seeded shuffled
// order: forward, combined CTC loss, backward, Adam. One optimizer step per
// `grad_accum` batches.
template <std::floating_point T>
TrainResult train(model::Encoder<T>& enc, const std::vector<Utterance>& dataset,
                  const TrainOptions& opts, std::ostream* log = nullptr) {
  opts.validate();
  std::vector<Utterance> kept;
  TrainResult res;
  for (const Utterance& u : dataset) {
    const int64_t t_out =
        reduction::stage_lengths(enc.cfg.policy, u.feats.dim(0)).back();
    if (ctc::feasible(t_out, u.labels)) {
      kept.push_back(u);
    } else {
      ++res.dropped;
      if (log) {
        *log << "dropping " << u.id << ": needs "
             << ctc::min_frames(u.labels) << " output frames, has " << t_out
             << "\n";
      }
    }
  }
  if (log && res.dropped > 0) {
    *log << "dropped " << res.dropped << " infeasible utterance(s)\n";
  }
  if (kept.empty()) throw StateError("train: no feasible utterances");

  std::vector<int64_t> lengths;
  lengths.reserve(kept.size());
  for (const Utterance& u : kept) lengths.push_back(u.feats.dim(0));
  const std::vector<std::vector<size_t>> batches =
      make_batches(lengths, opts.frame_budget);

  Rng rng(opts.seed);
  Adam<T> adam;
  adam.weight_decay = opts.weight_decay;
  const std::vector<Parameter<T>*> params = enc.parameters();

  std::vector<size_t> batch_order(batches.size());
  std::iota(batch_order.begin(), batch_order.end(), size_t{0});
  size_t cursor = batch_order.size();

  for (int64_t step = 1; step <= opts.steps; ++step) {
    for (Parameter<T>* p : params) {
      p->ensure_grad();
      p->zero_grad();
    }
    double step_loss = 0.0;
    for (int64_t acc = 0; acc < opts.grad_accum; ++acc) {
      if (cursor == batch_order.size()) {
        for (size_t i = batch_order.size(); i > 1; --i) {
          std::swap(batch_order[i - 1], batch_order[rng.uniform_int(i)]);
        }
        cursor = 0;
      }
      const std::vector<size_t>& batch = batches[batch_order[cursor++]];
      Tape<T> tape;
      Ctx<T> ctx{&tape, true, &rng};
      Var<T> loss = detail::batch_loss(ctx, enc, kept, batch, opts.augment,
                                       rng);
      if (opts.grad_accum > 1) {
        loss = ops::scale(ctx, loss, static_cast<T>(1.0 / opts.grad_accum));
      }
      step_loss += static_cast<double>(loss.value[0]);
      tape.backward(loss);
    }
    const double lr = lr_at(step, opts.schedule);
    adam.step(params, lr);
    res.loss_trace.push_back(step_loss);
    res.lr_trace.push_back(lr);
    if (log && (step % 50 == 0 || step == opts.steps)) {
      *log << "step " << step << "  lr " << lr << "  loss " << step_loss
           << "\n";
    }
  }
  return res;
}

template <std::floating_point T>
std::pair<model::Encoder<T>, TrainResult> train_toy(
    const model::EncoderConfig& config, const std::vector<Utterance>& dataset,
    int64_t steps, uint64_t seed, std::ostream* log = nullptr) {
  model::Encoder<T> enc;
  enc.build(config);
  TrainOptions opts;
  opts.steps = steps;
  opts.seed = seed;
  opts.schedule.total_steps = std::max<int64_t>(steps, 1);
  opts.schedule.warmup_steps =
      std::min<int64_t>(opts.schedule.total_steps, 25);
  TrainResult res = train(enc, dataset, opts, log);
  return {std::move(enc), std::move(res)};
}

// Greedy-decodes every utterance with the trained encoder and counts exact
// transcript matches.
template <std::floating_point T>
int64_t count_exact_matches(model::Encoder<T>& enc,
                            const std::vector<Utterance>& dataset) {
  Ctx<T> ctx{nullptr, false, nullptr};
  int64_t hits = 0;
  for (const Utterance& u : dataset) {
    Tensor<T> feats(Shape{1, u.feats.dim(0), frontend::kNumMels});
    for (int64_t t = 0; t < u.feats.dim(0); ++t) {
      for (int64_t d = 0; d < u.feats.dim(1); ++d) {
        feats.at(0, t, d) = static_cast<T>(u.feats.at(t, d));
      }
    }
    model::EncoderOutput<T> out = enc.forward(ctx, Var<T>(feats), {u.feats.dim(0)});
    Tensor<double> logits(Shape{out.out_lens[0], enc.cfg.vocab_size});
    for (int64_t t = 0; t < out.out_lens[0]; ++t) {
      for (int64_t v = 0; v < enc.cfg.vocab_size; ++v) {
        logits.at(t, v) = static_cast<double>(out.final_logits.value.at(0, t, v));
      }
    }
    if (ctc::greedy_decode(logits) == u.labels) ++hits;
  }
  return hits;
}

// Writes a small synthetic dataset: FEAT noise features, short transcripts
// over a single-character vocabulary, a manifest, and the vocabulary file.
inline io::Vocab write_toy_dataset(const std::string& dir, int64_t count,
                                   uint64_t seed) {
  io::Vocab vocab;
  for (char c = 'a'; c <= 'h'; ++c) vocab.units.push_back(std::string(1, c));
  io::write_vocab(dir + "/vocab.txt", vocab);

  Rng rng(seed);
  std::string manifest;
  for (int64_t i = 0; i < count; ++i) {
    const int64_t t = 80 + static_cast<int64_t>(rng.uniform_int(41));
    Tensor<double> feats(Shape{t, frontend::kNumMels});
    for (int64_t j = 0; j < feats.numel(); ++j) {
      feats[j] = rng.uniform(-1.0, 1.0);
    }
    const int64_t len = 3 + static_cast<int64_t>(rng.uniform_int(3));
    std::string text;
    for (int64_t k = 0; k < len; ++k) {
      char c;
      do {
        c = static_cast<char>('a' + rng.uniform_int(8));
      } while (!text.empty() && text.back() == c);
      text.push_back(c);
    }
    const std::string stem = "utt" + std::to_string(i);
    io::write_feat(dir + "/" + stem + ".feat", feats);
    io::write_text(dir + "/" + stem + ".txt", text);
    manifest += stem + ".feat\t" + stem + ".txt\n";
  }
  io::write_text(dir + "/manifest.tsv", manifest);
  return vocab;
}

}  // namespace uconv::train
