#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "uconv/ctc.hpp"
#include "uconv/tensor.hpp"

namespace uconv::oracle {

// Brute-force CTC references by exhaustive enumeration of all V^T frame
// paths. Independent of the forward-backward implementation: probabilities
// are multiplied in the probability domain from a locally computed softmax.

inline ctc::Labels collapse(const std::vector<int64_t>& path) {
  ctc::Labels out;
  int64_t prev = -1;
  for (const int64_t p : path) {
    if (p != ctc::kBlank && p != prev) out.push_back(p);
    prev = p;
  }
  return out;
}

namespace detail {

template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& logits) {
  const int64_t t = logits.dim(0), v = logits.dim(1);
  std::vector<double> p(static_cast<size_t>(t * v));
  for (int64_t i = 0; i < t; ++i) {
    double mx = static_cast<double>(logits.at(i, 0));
    for (int64_t j = 1; j < v; ++j) {
      mx = std::max(mx, static_cast<double>(logits.at(i, j)));
    }
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      z += std::exp(static_cast<double>(logits.at(i, j)) - mx);
    }
    for (int64_t j = 0; j < v; ++j) {
      p[static_cast<size_t>(i * v + j)] =
          std::exp(static_cast<double>(logits.at(i, j)) - mx) / z;
    }
  }
  return p;
}

// Visits every path in {0..v-1}^t in odometer order.
template <typename Fn>
void for_each_path(int64_t t, int64_t v, Fn&& fn) {
  std::vector<int64_t> path(static_cast<size_t>(t), 0);
  while (true) {
    fn(path);
    int64_t i = t - 1;
    while (i >= 0 && path[static_cast<size_t>(i)] == v - 1) {
      path[static_cast<size_t>(i)] = 0;
      --i;
    }
    if (i < 0) break;
    ++path[static_cast<size_t>(i)];
  }
}

}  // namespace detail

// -log of the summed probability of all paths collapsing to the target.
template <typename T>
double ctc_loss_by_enumeration(const Tensor<T>& logits,
                               const ctc::Labels& target) {
  const int64_t t = logits.dim(0), v = logits.dim(1);
  const std::vector<double> probs = detail::softmax_rows(logits);
  double total = 0.0;
  detail::for_each_path(t, v, [&](const std::vector<int64_t>& path) {
    if (collapse(path) != target) return;
    double p = 1.0;
    for (int64_t i = 0; i < t; ++i) {
      p *= probs[static_cast<size_t>(i * v + path[static_cast<size_t>(i)])];
    }
    total += p;
  });
  return -std::log(total);
}

// Labelling with the greatest marginal probability; ties break toward the
// lexicographically smaller label sequence.
template <typename T>
ctc::Labels best_labelling_by_enumeration(const Tensor<T>& logits) {
  const int64_t t = logits.dim(0), v = logits.dim(1);
  const std::vector<double> probs = detail::softmax_rows(logits);
  std::map<ctc::Labels, double> marginal;
  detail::for_each_path(t, v, [&](const std::vector<int64_t>& path) {
    double p = 1.0;
    for (int64_t i = 0; i < t; ++i) {
      p *= probs[static_cast<size_t>(i * v + path[static_cast<size_t>(i)])];
    }
    marginal[collapse(path)] += p;
  });
  ctc::Labels best;
  double best_p = -1.0;
  for (const auto& [labels, p] : marginal) {
    if (p > best_p) {
      best = labels;
      best_p = p;
    }
  }
  return best;
}

// Exact log marginal probability of one labelling, for comparing decoder
// scores against ground truth.
template <typename T>
double labelling_log_prob(const Tensor<T>& logits, const ctc::Labels& target) {
  const int64_t t = logits.dim(0), v = logits.dim(1);
  const std::vector<double> probs = detail::softmax_rows(logits);
  double total = 0.0;
  detail::for_each_path(t, v, [&](const std::vector<int64_t>& path) {
    if (collapse(path) != target) return;
    double p = 1.0;
    for (int64_t i = 0; i < t; ++i) {
      p *= probs[static_cast<size_t>(i * v + path[static_cast<size_t>(i)])];
    }
    total += p;
  });
  return std::log(total);
}

// True iff some length-t path over the alphabet collapses to the target;
// the alphabet only needs the target's labels plus blank.
inline bool labelling_reachable(int64_t t, const ctc::Labels& target,
                                int64_t vocab) {
  if (t == 0) return target.empty();
  bool found = false;
  detail::for_each_path(t, vocab, [&](const std::vector<int64_t>& path) {
    if (!found && collapse(path) == target) found = true;
  });
  return found;
}

}  // namespace uconv::oracle
