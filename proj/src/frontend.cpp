#include "uconv/frontend.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "uconv/error.hpp"
#include "uconv/rng.hpp"

namespace uconv::frontend {

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

}  // namespace

MelFilterbank make_mel_filterbank() {
  const int64_t bins = kNfft / 2 + 1;
  const double f_lo = 0.0;
  const double f_hi = static_cast<double>(kSampleRate) / 2.0;
  const double m_lo = hz_to_mel(f_lo);
  const double m_hi = hz_to_mel(f_hi);

  std::vector<double> edges(static_cast<size_t>(kNumMels) + 2);
  for (size_t i = 0; i < edges.size(); ++i) {
    const double m = m_lo + (m_hi - m_lo) * static_cast<double>(i) /
                                static_cast<double>(kNumMels + 1);
    edges[i] = mel_to_hz(m);
  }

  Tensor<double> w(Shape{kNumMels, bins});
  for (int64_t m = 0; m < kNumMels; ++m) {
    const double left = edges[static_cast<size_t>(m)];
    const double center = edges[static_cast<size_t>(m) + 1];
    const double right = edges[static_cast<size_t>(m) + 2];
    for (int64_t k = 0; k < bins; ++k) {
      const double f =
          static_cast<double>(k) * static_cast<double>(kSampleRate) / kNfft;
      double v = 0.0;
      if (f > left && f < right) {
        v = f <= center ? (f - left) / (center - left)
                        : (right - f) / (right - center);
      }
      w.at(m, k) = v;
    }
  }
  return MelFilterbank{std::move(w), std::move(edges)};
}

void fft_pow2(std::complex<double>* a, int64_t n) {
  if (n <= 0 || (n & (n - 1)) != 0) {
    throw ShapeError("fft length must be a power of two, got " +
                     std::to_string(n));
  }
  for (int64_t i = 1, j = 0; i < n; ++i) {
    int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int64_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (int64_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int64_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

int64_t num_frames(int64_t num_samples) {
  if (num_samples < kWindow) return 0;
  return (num_samples - kWindow) / kHop + 1;
}

Tensor<double> extract_logmel(const AudioBuffer& audio) {
  if (audio.sample_rate != kSampleRate) {
    throw ParseError("expected 16000 Hz audio, got " +
                     std::to_string(audio.sample_rate));
  }
  const int64_t n = static_cast<int64_t>(audio.samples.size());
  const int64_t t = num_frames(n);
  if (t < 1) {
    throw ParseError("audio too short: " + std::to_string(n) +
                     " samples, need at least " + std::to_string(kWindow));
  }

  std::vector<double> window(static_cast<size_t>(kWindow));
  for (int64_t i = 0; i < kWindow; ++i) {
    window[static_cast<size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                             static_cast<double>(kWindow));
  }
  const MelFilterbank fb = make_mel_filterbank();
  const int64_t bins = kNfft / 2 + 1;

  Tensor<double> out(Shape{t, kNumMels});
  std::vector<std::complex<double>> buf(static_cast<size_t>(kNfft));
  std::vector<double> power(static_cast<size_t>(bins));
  for (int64_t f = 0; f < t; ++f) {
    const double* src = audio.samples.data() + f * kHop;
    for (int64_t i = 0; i < kWindow; ++i) {
      buf[static_cast<size_t>(i)] = src[i] * window[static_cast<size_t>(i)];
    }
    std::fill(buf.begin() + kWindow, buf.end(), std::complex<double>(0.0));
    fft_pow2(buf.data(), kNfft);
    for (int64_t k = 0; k < bins; ++k) {
      power[static_cast<size_t>(k)] = std::norm(buf[static_cast<size_t>(k)]);
    }
    for (int64_t m = 0; m < kNumMels; ++m) {
      const double* wrow = fb.weights.data() + m * bins;
      double e = 0.0;
      for (int64_t k = 0; k < bins; ++k) {
        e += wrow[k] * power[static_cast<size_t>(k)];
      }
      out.at(f, m) = std::log(std::max(e, kLogFloor));
    }
  }
  return out;
}

Tensor<double> mask_augment(const Tensor<double>& feats, uint64_t seed) {
  if (feats.rank() != 2 || feats.dim(1) != kNumMels) {
    throw ShapeError("mask_augment: want [T," + std::to_string(kNumMels) +
                     "], got " + shape_str(feats.shape()));
  }
  const int64_t t = feats.dim(0);
  const int64_t d = feats.dim(1);
  double mean = 0.0;
  for (int64_t i = 0; i < feats.numel(); ++i) mean += feats[i];
  mean /= static_cast<double>(feats.numel());

  Tensor<double> out = feats.clone();
  Rng rng(seed);
  for (int rep = 0; rep < 2; ++rep) {
    const int64_t w = static_cast<int64_t>(rng.uniform_int(11));
    const int64_t start =
        static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(d - w + 1)));
    for (int64_t i = 0; i < t; ++i) {
      for (int64_t j = start; j < start + w; ++j) out.at(i, j) = mean;
    }
  }
  const int64_t max_tw = t / 20;
  for (int rep = 0; rep < 2; ++rep) {
    const int64_t w =
        static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(max_tw + 1)));
    const int64_t start =
        static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(t - w + 1)));
    for (int64_t i = start; i < start + w; ++i) {
      for (int64_t j = 0; j < d; ++j) out.at(i, j) = mean;
    }
  }
  return out;
}

Tensor<double> normalize(const Tensor<double>& feats) {
  if (feats.rank() != 2) {
    throw ShapeError("normalize: want rank 2, got " +
                     shape_str(feats.shape()));
  }
  const int64_t t = feats.dim(0);
  const int64_t d = feats.dim(1);
  Tensor<double> out(feats.shape());
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (int64_t i = 0; i < t; ++i) mean += feats.at(i, j);
    mean /= static_cast<double>(t);
    double var = 0.0;
    for (int64_t i = 0; i < t; ++i) {
      const double v = feats.at(i, j) - mean;
      var += v * v;
    }
    var /= static_cast<double>(t);
    const double rstd = 1.0 / std::sqrt(std::max(var, 1e-8));
    for (int64_t i = 0; i < t; ++i) {
      out.at(i, j) = (feats.at(i, j) - mean) * rstd;
    }
  }
  return out;
}

}  // namespace uconv::frontend
