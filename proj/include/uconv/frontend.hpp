#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "uconv/tensor.hpp"

namespace uconv::frontend {

// 16 kHz mono feature extraction: 25 ms Hann windows every 10 ms, 512-point
// spectrum, 80 triangular mel filters over 0-8000 Hz, natural log with a
// 1e-10 floor. All math is double so the gain-shift and normalization
// identities hold to 1e-9; files store float32 at the io boundary.

inline constexpr int64_t kSampleRate = 16000;
inline constexpr int64_t kWindow = 400;
inline constexpr int64_t kHop = 160;
inline constexpr int64_t kNfft = 512;
inline constexpr int64_t kNumMels = 80;
inline constexpr double kLogFloor = 1e-10;

struct AudioBuffer {
  std::vector<double> samples;  // in [-1, 1]
  int64_t sample_rate = kSampleRate;
};

// weights[m, k] applies to power-spectrum bin k (0..256); edges_hz has
// 82 points, filter m spans (edges_hz[m], edges_hz[m+2]) with its peak at
// edges_hz[m+1].
struct MelFilterbank {
  Tensor<double> weights;
  std::vector<double> edges_hz;
};

MelFilterbank make_mel_filterbank();

// In-place radix-2 transform; n must be a power of two.
void fft_pow2(std::complex<double>* a, int64_t n);

int64_t num_frames(int64_t num_samples);

// [T, 80]; throws ParseError when the buffer is shorter than one window or
// not 16 kHz.
Tensor<double> extract_logmel(const AudioBuffer& audio);

// Training-time masking: two frequency stripes (width uniform in [0,10])
// then two time stripes (width uniform in [0, floor(0.05 T)]), drawn in that
// order from an Rng seeded with `seed`; masked cells take the pre-mask mean
// over the whole matrix.
Tensor<double> mask_augment(const Tensor<double>& feats, uint64_t seed);

// Per-dimension zero mean / unit variance over the utterance, variance
// floored at 1e-8.
Tensor<double> normalize(const Tensor<double>& feats);

}  // namespace uconv::frontend
