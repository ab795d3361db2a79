#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "uconv/error.hpp"
#include "uconv/ops.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

namespace uconv::ctc {

// CTC objective and decoding. Blank is label 0 everywhere; targets use
// labels in [1, vocab). All probability arithmetic stays in log space.

using Labels = std::vector<int64_t>;

constexpr int64_t kBlank = 0;

inline double logaddexp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(std::min(a, b) - m));
}

// Fewest output frames that can emit the labels: repeats need a separating
// blank.
inline int64_t min_frames(const Labels& labels) {
  int64_t n = static_cast<int64_t>(labels.size());
  for (size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++n;
  }
  return n;
}

inline bool feasible(int64_t t_out, const Labels& labels) {
  if (t_out < 0) throw ShapeError("negative output length");
  return t_out >= min_frames(labels);
}

inline void check_labels(const Labels& labels, int64_t vocab) {
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1 || labels[i] >= vocab) {
      throw ShapeError("label " + std::to_string(labels[i]) + " at position " +
                       std::to_string(i) + " outside [1, " +
                       std::to_string(vocab) + ")");
    }
  }
}

namespace detail {

// Row-wise log-softmax in double, regardless of the logits' scalar type.
template <typename T>
std::vector<double> log_softmax(const Tensor<T>& logits) {
  const int64_t t = logits.dim(0), v = logits.dim(1);
  std::vector<double> lsm(static_cast<size_t>(t * v));
  for (int64_t i = 0; i < t; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < v; ++j) {
      mx = std::max(mx, static_cast<double>(logits.at(i, j)));
    }
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      z += std::exp(static_cast<double>(logits.at(i, j)) - mx);
    }
    const double logz = mx + std::log(z);
    for (int64_t j = 0; j < v; ++j) {
      lsm[static_cast<size_t>(i * v + j)] =
          static_cast<double>(logits.at(i, j)) - logz;
    }
  }
  return lsm;
}

inline std::vector<int64_t> extend_labels(const Labels& labels) {
  std::vector<int64_t> ext(2 * labels.size() + 1, kBlank);
  for (size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  return ext;
}

}  // namespace detail

// Negative log probability of the labels given per-frame logits [T, V],
// summed over all blank-augmented alignments by the forward recursion over
// the extended label sequence. Differentiable through the tape with the
// analytic forward-backward gradient.
template <typename T>
Var<T> ctc_loss(Ctx<T>& ctx, const Var<T>& logits, const Labels& labels) {
  if (logits.value.rank() != 2 || logits.value.dim(0) < 1 ||
      logits.value.dim(1) < 2) {
    throw ShapeError("ctc: logits must be [T>=1, V>=2], got " +
                     shape_str(logits.value.shape()));
  }
  const int64_t t = logits.value.dim(0);
  const int64_t v = logits.value.dim(1);
  check_labels(labels, v);
  if (!feasible(t, labels)) {
    throw FeasibilityError("target needs " + std::to_string(min_frames(labels)) +
                           " frames, only " + std::to_string(t) +
                           " available");
  }

  const double ninf = -std::numeric_limits<double>::infinity();
  const std::vector<double> lsm = detail::log_softmax(logits.value);
  const std::vector<int64_t> ext = detail::extend_labels(labels);
  const int64_t s_len = static_cast<int64_t>(ext.size());
  auto lp = [&lsm, v](int64_t ti, int64_t label) {
    return lsm[static_cast<size_t>(ti * v + label)];
  };

  std::vector<double> alpha(static_cast<size_t>(t * s_len), ninf);
  alpha[0] = lp(0, kBlank);
  if (s_len > 1) alpha[1] = lp(0, ext[1]);
  for (int64_t ti = 1; ti < t; ++ti) {
    for (int64_t s = 0; s < s_len; ++s) {
      double m = alpha[static_cast<size_t>((ti - 1) * s_len + s)];
      if (s >= 1) {
        m = logaddexp(m, alpha[static_cast<size_t>((ti - 1) * s_len + s - 1)]);
      }
      if (s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2]) {
        m = logaddexp(m, alpha[static_cast<size_t>((ti - 1) * s_len + s - 2)]);
      }
      alpha[static_cast<size_t>(ti * s_len + s)] =
          m == ninf ? ninf : m + lp(ti, ext[s]);
    }
  }
  double log_p = alpha[static_cast<size_t>((t - 1) * s_len + s_len - 1)];
  if (s_len > 1) {
    log_p = logaddexp(
        log_p, alpha[static_cast<size_t>((t - 1) * s_len + s_len - 2)]);
  }

  Var<T> res(Tensor<T>::scalar(static_cast<T>(-log_p)));
  if (!ops::detail::want_node(ctx, {logits.node})) return res;

  // beta mirrors alpha from the right; posteriors give the classic
  // softmax-minus-occupancy gradient.
  std::vector<double> beta(static_cast<size_t>(t * s_len), ninf);
  beta[static_cast<size_t>((t - 1) * s_len + s_len - 1)] =
      lp(t - 1, ext[s_len - 1]);
  if (s_len > 1) {
    beta[static_cast<size_t>((t - 1) * s_len + s_len - 2)] =
        lp(t - 1, ext[s_len - 2]);
  }
  for (int64_t ti = t - 2; ti >= 0; --ti) {
    for (int64_t s = 0; s < s_len; ++s) {
      double m = beta[static_cast<size_t>((ti + 1) * s_len + s)];
      if (s + 1 < s_len) {
        m = logaddexp(m, beta[static_cast<size_t>((ti + 1) * s_len + s + 1)]);
      }
      if (s + 2 < s_len && ext[s] != kBlank && ext[s + 2] != ext[s]) {
        m = logaddexp(m, beta[static_cast<size_t>((ti + 1) * s_len + s + 2)]);
      }
      beta[static_cast<size_t>(ti * s_len + s)] =
          m == ninf ? ninf : m + lp(ti, ext[s]);
    }
  }

  Tensor<T> dlogits(logits.value.shape());
  for (int64_t ti = 0; ti < t; ++ti) {
    std::vector<double> occ(static_cast<size_t>(v), ninf);
    for (int64_t s = 0; s < s_len; ++s) {
      const double a = alpha[static_cast<size_t>(ti * s_len + s)];
      const double b = beta[static_cast<size_t>(ti * s_len + s)];
      if (a == ninf || b == ninf) continue;
      const size_t lab = static_cast<size_t>(ext[s]);
      occ[lab] = logaddexp(occ[lab], a + b - lp(ti, ext[s]));
    }
    for (int64_t j = 0; j < v; ++j) {
      const double post =
          occ[static_cast<size_t>(j)] == ninf
              ? 0.0
              : std::exp(occ[static_cast<size_t>(j)] - log_p);
      dlogits.at(ti, j) =
          static_cast<T>(std::exp(lp(ti, j)) - post);
    }
  }

  const int64_t nx = logits.node;
  res.node = ctx.tape->add_node(
      res.value.shape(), [nx, dlogits](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> dx = dlogits.clone();
        const T g0 = g[0];
        for (int64_t i = 0; i < dx.numel(); ++i) dx[i] *= g0;
        tp.acc(nx, dx);
      });
  return res;
}

// (1-lambda) * final + lambda * mean(intermediates); the final loss passes
// through untouched when there are no intermediate taps.
template <typename T>
Var<T> combined_loss(Ctx<T>& ctx, const Var<T>& final_loss,
                     const std::vector<Var<T>>& intermediates,
                     double lambda) {
  if (lambda < 0.0 || lambda > 1.0) {
    throw ConfigError("lambda must be in [0,1]");
  }
  if (intermediates.empty()) return final_loss;
  Var<T> sum = intermediates[0];
  for (size_t i = 1; i < intermediates.size(); ++i) {
    sum = ops::add(ctx, sum, intermediates[i]);
  }
  Var<T> mean = ops::scale(
      ctx, sum,
      static_cast<T>(1.0 / static_cast<double>(intermediates.size())));
  return ops::add_scaled(ctx,
                         ops::scale(ctx, final_loss,
                                    static_cast<T>(1.0 - lambda)),
                         mean, static_cast<T>(lambda));
}

// Best-path decoding: per-frame argmax (ties to the lower index), collapse
// repeats, drop blanks.
template <typename T>
Labels greedy_decode(const Tensor<T>& logits) {
  if (logits.rank() != 2) {
    throw ShapeError("greedy: logits must be [T, V]");
  }
  const int64_t t = logits.dim(0), v = logits.dim(1);
  Labels out;
  int64_t prev = -1;
  for (int64_t i = 0; i < t; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < v; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    if (best != kBlank && best != prev) out.push_back(best);
    prev = best;
  }
  return out;
}

struct Hypothesis {
  Labels labels;
  double log_prob;
};

// Prefix beam search in log space with per-prefix blank/non-blank masses.
// Pruning and the final ranking break score ties lexicographically, so the
// output is deterministic.
template <typename T>
std::vector<Hypothesis> beam_search(const Tensor<T>& logits, int64_t beam) {
  if (beam < 1) throw ShapeError("beam must be >= 1");
  if (logits.rank() != 2 || logits.dim(1) < 2) {
    throw ShapeError("beam: logits must be [T, V>=2]");
  }
  const int64_t t = logits.dim(0), v = logits.dim(1);
  const std::vector<double> lsm = detail::log_softmax(logits);
  auto lp = [&lsm, v](int64_t ti, int64_t label) {
    return lsm[static_cast<size_t>(ti * v + label)];
  };

  struct Mass {
    double blank = -std::numeric_limits<double>::infinity();
    double non_blank = -std::numeric_limits<double>::infinity();
    double total() const { return logaddexp(blank, non_blank); }
  };
  std::map<Labels, Mass> cur;
  cur[{}].blank = 0.0;

  for (int64_t ti = 0; ti < t; ++ti) {
    std::map<Labels, Mass> next;
    for (const auto& [prefix, mass] : cur) {
      const double total = mass.total();
      // blank keeps the prefix and seals it
      next[prefix].blank = logaddexp(next[prefix].blank, total + lp(ti, kBlank));
      for (int64_t c = 1; c < v; ++c) {
        const double plc = lp(ti, c);
        if (!prefix.empty() && prefix.back() == c) {
          // same symbol running on: stays the same prefix
          next[prefix].non_blank =
              logaddexp(next[prefix].non_blank, mass.non_blank + plc);
          // a fresh emission needs the blank-ended mass
          Labels ext = prefix;
          ext.push_back(c);
          next[ext].non_blank =
              logaddexp(next[ext].non_blank, mass.blank + plc);
        } else {
          Labels ext = prefix;
          ext.push_back(c);
          next[ext].non_blank = logaddexp(next[ext].non_blank, total + plc);
        }
      }
    }

    // prune to the beam, ties resolved by prefix order
    std::vector<std::pair<Labels, Mass>> ranked(next.begin(), next.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) {
                       const double ta = a.second.total();
                       const double tb = b.second.total();
                       if (ta != tb) return ta > tb;
                       return a.first < b.first;
                     });
    if (static_cast<int64_t>(ranked.size()) > beam) {
      ranked.resize(static_cast<size_t>(beam));
    }
    cur = std::map<Labels, Mass>(ranked.begin(), ranked.end());
  }

  std::vector<Hypothesis> out;
  out.reserve(cur.size());
  for (const auto& [prefix, mass] : cur) {
    out.push_back({prefix, mass.total()});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Hypothesis& a, const Hypothesis& b) {
                     if (a.log_prob != b.log_prob) {
                       return a.log_prob > b.log_prob;
                     }
                     return a.labels < b.labels;
                   });
  return out;
}

}  // namespace uconv::ctc
