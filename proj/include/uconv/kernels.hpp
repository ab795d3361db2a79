#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace uconv::kernels {

// Worker count used by every parallel kernel below. The speed harness pins
// this to 1; tests sweep it to confirm results do not depend on it.
int max_threads();
void set_max_threads(int n);

// Each kernel parallelizes over independent output elements, so results are
// bit-identical for any worker count. The *_serial twins are naive reference
// implementations kept for correctness tests and the kernel benchmark.

// ---------------------------------------------------------------------------
// GEMM family. C is overwritten.
// ---------------------------------------------------------------------------

// C[m,n] = A[m,k] * B[k,n]
template <typename T>
void gemm(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  const int nt = max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    std::fill(crow, crow + n, T(0));
    int64_t kk = 0;
    for (; kk + 4 <= k; kk += 4) {
      const T a0 = arow[kk], a1 = arow[kk + 1], a2 = arow[kk + 2],
              a3 = arow[kk + 3];
      const T* b0 = b + kk * n;
      const T* b1 = b0 + n;
      const T* b2 = b1 + n;
      const T* b3 = b2 + n;
#pragma omp simd
      for (int64_t j = 0; j < n; ++j) {
        crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
    }
    for (; kk < k; ++kk) {
      const T av = arow[kk];
      const T* brow = b + kk * n;
#pragma omp simd
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_serial(const T* a, const T* b, T* c, int64_t m, int64_t k,
                 int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T s = 0;
      for (int64_t kk = 0; kk < k; ++kk) s += a[i * k + kk] * b[kk * n + j];
      c[i * n + j] = s;
    }
  }
}

// C[m,n] = A[m,e] * B[n,e]^T  (rows of B as the right-hand vectors)
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t e, int64_t n) {
  const int nt = max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * e;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * e;
      T s = 0;
#pragma omp simd reduction(+ : s)
      for (int64_t t = 0; t < e; ++t) s += arow[t] * brow[t];
      crow[j] = s;
    }
  }
}

template <typename T>
void gemm_nt_serial(const T* a, const T* b, T* c, int64_t m, int64_t e,
                    int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T s = 0;
      for (int64_t t = 0; t < e; ++t) s += a[i * e + t] * b[j * e + t];
      c[i * n + j] = s;
    }
  }
}

// C[m,n] = A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  const int nt = max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    std::fill(crow, crow + n, T(0));
    for (int64_t kk = 0; kk < k; ++kk) {
      const T av = a[kk * m + i];
      const T* brow = b + kk * n;
#pragma omp simd
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_tn_serial(const T* a, const T* b, T* c, int64_t m, int64_t k,
                    int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      T s = 0;
      for (int64_t kk = 0; kk < k; ++kk) s += a[kk * m + i] * b[kk * n + j];
      c[i * n + j] = s;
    }
  }
}

// ---------------------------------------------------------------------------
// 1-D convolution, cross-correlation semantics, batched over b.
// x[b,t,ci], w[j,ci,co], y[b,to,co]; to = floor((t_in + 2*pad - k)/stride) + 1
// ---------------------------------------------------------------------------

inline int64_t conv_out_len(int64_t t, int64_t k, int64_t stride,
                            int64_t pad) {
  return (t + 2 * pad - k) / stride + 1;
}

template <typename T>
void conv1d(const T* x, const T* w, const T* bias, T* y, int64_t bsz,
            int64_t t_in, int64_t ci, int64_t co, int64_t k, int64_t stride,
            int64_t pad) {
  const int64_t t_out = conv_out_len(t_in, k, stride, pad);
  const int nt = max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t bt = 0; bt < bsz * t_out; ++bt) {
    const int64_t b = bt / t_out;
    const int64_t to = bt % t_out;
    const T* xb = x + b * t_in * ci;
    T* yrow = y + bt * co;
    if (bias) {
      std::copy(bias, bias + co, yrow);
    } else {
      std::fill(yrow, yrow + co, T(0));
    }
    for (int64_t j = 0; j < k; ++j) {
      const int64_t ti = to * stride - pad + j;
      if (ti < 0 || ti >= t_in) continue;
      const T* xrow = xb + ti * ci;
      const T* wrow = w + j * ci * co;
      for (int64_t c = 0; c < ci; ++c) {
        const T xv = xrow[c];
        const T* wv = wrow + c * co;
#pragma omp simd
        for (int64_t o = 0; o < co; ++o) yrow[o] += xv * wv[o];
      }
    }
  }
}

template <typename T>
void conv1d_serial(const T* x, const T* w, const T* bias, T* y, int64_t bsz,
                   int64_t t_in, int64_t ci, int64_t co, int64_t k,
                   int64_t stride, int64_t pad) {
  const int64_t t_out = conv_out_len(t_in, k, stride, pad);
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t to = 0; to < t_out; ++to) {
      for (int64_t o = 0; o < co; ++o) {
        T s = bias ? bias[o] : T(0);
        for (int64_t j = 0; j < k; ++j) {
          const int64_t ti = to * stride - pad + j;
          if (ti < 0 || ti >= t_in) continue;
          for (int64_t c = 0; c < ci; ++c) {
            s += x[(b * t_in + ti) * ci + c] * w[(j * ci + c) * co + o];
          }
        }
        y[(b * t_out + to) * co + o] = s;
      }
    }
  }
}

// Gradients. dx/dw/db must be pre-sized; dw and db are accumulated into,
// dx is overwritten.
template <typename T>
void conv1d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db,
                     int64_t bsz, int64_t t_in, int64_t ci, int64_t co,
                     int64_t k, int64_t stride, int64_t pad) {
  const int64_t t_out = conv_out_len(t_in, k, stride, pad);
  const int nt = max_threads();
  if (dx) {
#pragma omp parallel for schedule(static) num_threads(nt)
    for (int64_t bt = 0; bt < bsz * t_in; ++bt) {
      const int64_t b = bt / t_in;
      const int64_t ti = bt % t_in;
      T* dxrow = dx + bt * ci;
      std::fill(dxrow, dxrow + ci, T(0));
      for (int64_t j = 0; j < k; ++j) {
        const int64_t num = ti + pad - j;
        if (num < 0 || num % stride != 0) continue;
        const int64_t to = num / stride;
        if (to < 0 || to >= t_out) continue;
        const T* dyrow = dy + (b * t_out + to) * co;
        const T* wrow = w + j * ci * co;
        for (int64_t c = 0; c < ci; ++c) {
          T s = 0;
          const T* wv = wrow + c * co;
#pragma omp simd reduction(+ : s)
          for (int64_t o = 0; o < co; ++o) s += dyrow[o] * wv[o];
          dxrow[c] += s;
        }
      }
    }
  }
  if (dw) {
#pragma omp parallel for schedule(static) num_threads(nt)
    for (int64_t jc = 0; jc < k * ci; ++jc) {
      const int64_t j = jc / ci;
      const int64_t c = jc % ci;
      T* dwrow = dw + jc * co;
      for (int64_t b = 0; b < bsz; ++b) {
        for (int64_t to = 0; to < t_out; ++to) {
          const int64_t ti = to * stride - pad + j;
          if (ti < 0 || ti >= t_in) continue;
          const T xv = x[(b * t_in + ti) * ci + c];
          const T* dyrow = dy + (b * t_out + to) * co;
#pragma omp simd
          for (int64_t o = 0; o < co; ++o) dwrow[o] += xv * dyrow[o];
        }
      }
    }
  }
  if (db) {
    for (int64_t bt = 0; bt < bsz * t_out; ++bt) {
      const T* dyrow = dy + bt * co;
      for (int64_t o = 0; o < co; ++o) db[o] += dyrow[o];
    }
  }
}

// ---------------------------------------------------------------------------
// 2-D convolution over time x frequency, square kernel.
// x[b,t,f,ci], w[jt,jf,ci,co], y[b,to,fo,co]
// ---------------------------------------------------------------------------

template <typename T>
void conv2d(const T* x, const T* w, const T* bias, T* y, int64_t bsz,
            int64_t t_in, int64_t f_in, int64_t ci, int64_t co, int64_t k,
            int64_t stride, int64_t pad) {
  const int64_t t_out = conv_out_len(t_in, k, stride, pad);
  const int64_t f_out = conv_out_len(f_in, k, stride, pad);
  const int nt = max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t btf = 0; btf < bsz * t_out * f_out; ++btf) {
    const int64_t b = btf / (t_out * f_out);
    const int64_t to = (btf / f_out) % t_out;
    const int64_t fo = btf % f_out;
    T* yrow = y + btf * co;
    if (bias) {
      std::copy(bias, bias + co, yrow);
    } else {
      std::fill(yrow, yrow + co, T(0));
    }
    for (int64_t jt = 0; jt < k; ++jt) {
      const int64_t ti = to * stride - pad + jt;
      if (ti < 0 || ti >= t_in) continue;
      for (int64_t jf = 0; jf < k; ++jf) {
        const int64_t fi = fo * stride - pad + jf;
        if (fi < 0 || fi >= f_in) continue;
        const T* xrow = x + ((b * t_in + ti) * f_in + fi) * ci;
        const T* wrow = w + (jt * k + jf) * ci * co;
        for (int64_t c = 0; c < ci; ++c) {
          const T xv = xrow[c];
          const T* wv = wrow + c * co;
#pragma omp simd
          for (int64_t o = 0; o < co; ++o) yrow[o] += xv * wv[o];
        }
      }
    }
  }
}

template <typename T>
void conv2d_serial(const T* x, const T* w, const T* bias, T* y, int64_t bsz,
                   int64_t t_in, int64_t f_in, int64_t ci, int64_t co,
                   int64_t k, int64_t stride, int64_t pad) {
  const int64_t t_out = conv_out_len(t_in, k, stride, pad);
  const int64_t f_out = conv_out_len(f_in, k, stride, pad);
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t to = 0; to < t_out; ++to) {
      for (int64_t fo = 0; fo < f_out; ++fo) {
        for (int64_t o = 0; o < co; ++o) {
          T s = bias ? bias[o] : T(0);
          for (int64_t jt = 0; jt < k; ++jt) {
            const int64_t ti = to * stride - pad + jt;
            if (ti < 0 || ti >= t_in) continue;
            for (int64_t jf = 0; jf < k; ++jf) {
              const int64_t fi = fo * stride - pad + jf;
              if (fi < 0 || fi >= f_in) continue;
              for (int64_t c = 0; c < ci; ++c) {
                s += x[((b * t_in + ti) * f_in + fi) * ci + c] *
                     w[((jt * k + jf) * ci + c) * co + o];
              }
            }
          }
          y[((b * t_out + to) * f_out + fo) * co + o] = s;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db,
                     int64_t bsz, int64_t t_in, int64_t f_in, int64_t ci,
                     int64_t co, int64_t k, int64_t stride, int64_t pad) {
  const int64_t t_out = conv_out_len(t_in, k, stride, pad);
  const int64_t f_out = conv_out_len(f_in, k, stride, pad);
  const int nt = max_threads();
  if (dx) {
#pragma omp parallel for schedule(static) num_threads(nt)
    for (int64_t btf = 0; btf < bsz * t_in * f_in; ++btf) {
      const int64_t b = btf / (t_in * f_in);
      const int64_t ti = (btf / f_in) % t_in;
      const int64_t fi = btf % f_in;
      T* dxrow = dx + btf * ci;
      std::fill(dxrow, dxrow + ci, T(0));
      for (int64_t jt = 0; jt < k; ++jt) {
        const int64_t numt = ti + pad - jt;
        if (numt < 0 || numt % stride != 0) continue;
        const int64_t to = numt / stride;
        if (to >= t_out) continue;
        for (int64_t jf = 0; jf < k; ++jf) {
          const int64_t numf = fi + pad - jf;
          if (numf < 0 || numf % stride != 0) continue;
          const int64_t fo = numf / stride;
          if (fo >= f_out) continue;
          const T* dyrow = dy + ((b * t_out + to) * f_out + fo) * co;
          const T* wrow = w + (jt * k + jf) * ci * co;
          for (int64_t c = 0; c < ci; ++c) {
            T s = 0;
            const T* wv = wrow + c * co;
#pragma omp simd reduction(+ : s)
            for (int64_t o = 0; o < co; ++o) s += dyrow[o] * wv[o];
            dxrow[c] += s;
          }
        }
      }
    }
  }
  if (dw) {
#pragma omp parallel for schedule(static) num_threads(nt)
    for (int64_t jjc = 0; jjc < k * k * ci; ++jjc) {
      const int64_t jt = jjc / (k * ci);
      const int64_t jf = (jjc / ci) % k;
      const int64_t c = jjc % ci;
      T* dwrow = dw + jjc * co;
      for (int64_t b = 0; b < bsz; ++b) {
        for (int64_t to = 0; to < t_out; ++to) {
          const int64_t ti = to * stride - pad + jt;
          if (ti < 0 || ti >= t_in) continue;
          for (int64_t fo = 0; fo < f_out; ++fo) {
            const int64_t fi = fo * stride - pad + jf;
            if (fi < 0 || fi >= f_in) continue;
            const T xv = x[((b * t_in + ti) * f_in + fi) * ci + c];
            const T* dyrow = dy + ((b * t_out + to) * f_out + fo) * co;
#pragma omp simd
            for (int64_t o = 0; o < co; ++o) dwrow[o] += xv * dyrow[o];
          }
        }
      }
    }
  }
  if (db) {
    for (int64_t i = 0; i < bsz * t_out * f_out; ++i) {
      const T* dyrow = dy + i * co;
      for (int64_t o = 0; o < co; ++o) db[o] += dyrow[o];
    }
  }
}

// ---------------------------------------------------------------------------
// Depthwise 1-D convolution, stride 1, same-length padding.
// x[b,t,c], w[j,c], y[b,t,c]
// ---------------------------------------------------------------------------

template <typename T>
void dwconv1d(const T* x, const T* w, const T* bias, T* y, int64_t bsz,
              int64_t t_in, int64_t ch, int64_t k) {
  const int64_t pad = (k - 1) / 2;
  const int nt = max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t bt = 0; bt < bsz * t_in; ++bt) {
    const int64_t b = bt / t_in;
    const int64_t t = bt % t_in;
    T* yrow = y + bt * ch;
    if (bias) {
      std::copy(bias, bias + ch, yrow);
    } else {
      std::fill(yrow, yrow + ch, T(0));
    }
    for (int64_t j = 0; j < k; ++j) {
      const int64_t ti = t - pad + j;
      if (ti < 0 || ti >= t_in) continue;
      const T* xrow = x + (b * t_in + ti) * ch;
      const T* wrow = w + j * ch;
#pragma omp simd
      for (int64_t c = 0; c < ch; ++c) yrow[c] += xrow[c] * wrow[c];
    }
  }
}

template <typename T>
void dwconv1d_serial(const T* x, const T* w, const T* bias, T* y, int64_t bsz,
                     int64_t t_in, int64_t ch, int64_t k) {
  const int64_t pad = (k - 1) / 2;
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t t = 0; t < t_in; ++t) {
      for (int64_t c = 0; c < ch; ++c) {
        T s = bias ? bias[c] : T(0);
        for (int64_t j = 0; j < k; ++j) {
          const int64_t ti = t - pad + j;
          if (ti < 0 || ti >= t_in) continue;
          s += x[(b * t_in + ti) * ch + c] * w[j * ch + c];
        }
        y[(b * t_in + t) * ch + c] = s;
      }
    }
  }
}

template <typename T>
void dwconv1d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw,
                       T* db, int64_t bsz, int64_t t_in, int64_t ch,
                       int64_t k) {
  const int64_t pad = (k - 1) / 2;
  const int nt = max_threads();
  if (dx) {
#pragma omp parallel for schedule(static) num_threads(nt)
    for (int64_t bt = 0; bt < bsz * t_in; ++bt) {
      const int64_t b = bt / t_in;
      const int64_t ti = bt % t_in;
      T* dxrow = dx + bt * ch;
      std::fill(dxrow, dxrow + ch, T(0));
      for (int64_t j = 0; j < k; ++j) {
        const int64_t t = ti + pad - j;
        if (t < 0 || t >= t_in) continue;
        const T* dyrow = dy + (b * t_in + t) * ch;
        const T* wrow = w + j * ch;
#pragma omp simd
        for (int64_t c = 0; c < ch; ++c) dxrow[c] += dyrow[c] * wrow[c];
      }
    }
  }
  if (dw) {
#pragma omp parallel for schedule(static) num_threads(nt)
    for (int64_t j = 0; j < k; ++j) {
      T* dwrow = dw + j * ch;
      for (int64_t b = 0; b < bsz; ++b) {
        for (int64_t t = 0; t < t_in; ++t) {
          const int64_t ti = t - pad + j;
          if (ti < 0 || ti >= t_in) continue;
          const T* xrow = x + (b * t_in + ti) * ch;
          const T* dyrow = dy + (b * t_in + t) * ch;
#pragma omp simd
          for (int64_t c = 0; c < ch; ++c) dwrow[c] += xrow[c] * dyrow[c];
        }
      }
    }
  }
  if (db) {
    for (int64_t bt = 0; bt < bsz * t_in; ++bt) {
      const T* dyrow = dy + bt * ch;
      for (int64_t c = 0; c < ch; ++c) db[c] += dyrow[c];
    }
  }
}

// ---------------------------------------------------------------------------
// Row-wise softmax with max subtraction.
// ---------------------------------------------------------------------------

template <typename T>
void softmax_rows(const T* in, T* out, int64_t rows, int64_t cols) {
  const int nt = max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = in + r * cols;
    T* y = out + r * cols;
    T mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const T inv = T(1) / sum;
#pragma omp simd
    for (int64_t j = 0; j < cols; ++j) y[j] *= inv;
  }
}

template <typename T>
void softmax_rows_serial(const T* in, T* out, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = in + r * cols;
    T* y = out + r * cols;
    T mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int64_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (int64_t j = 0; j < cols; ++j) y[j] /= sum;
  }
}

// ---------------------------------------------------------------------------
// Row-wise layer normalization. mean/rstd outputs are optional and feed the
// backward pass.
// ---------------------------------------------------------------------------

template <typename T>
void layer_norm_rows(const T* in, const T* gain, const T* bias, T* out,
                     T* mean_out, T* rstd_out, int64_t rows, int64_t d,
                     T eps) {
  const int nt = max_threads();
#pragma omp parallel for schedule(static) num_threads(nt)
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = in + r * d;
    T* y = out + r * d;
    T mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) {
      const T dv = x[j] - mean;
      var += dv * dv;
    }
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + eps);
#pragma omp simd
    for (int64_t j = 0; j < d; ++j) {
      y[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
    }
    if (mean_out) mean_out[r] = mean;
    if (rstd_out) rstd_out[r] = rstd;
  }
}

template <typename T>
void layer_norm_rows_serial(const T* in, const T* gain, const T* bias, T* out,
                            T* mean_out, T* rstd_out, int64_t rows, int64_t d,
                            T eps) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* x = in + r * d;
    T* y = out + r * d;
    T mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
      y[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
    }
    if (mean_out) mean_out[r] = mean;
    if (rstd_out) rstd_out[r] = rstd;
  }
}

}  // namespace uconv::kernels
