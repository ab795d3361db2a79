#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "uconv/error.hpp"
#include "uconv/kernels.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

namespace uconv::ops {

// Every op computes its value eagerly and, when ctx records and any input is
// tracked, appends one tape node whose closure routes the output gradient to
// the inputs. Captured tensors share storage with the forward values.

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
bool want_node(const Ctx<T>& ctx, std::initializer_list<int64_t> parents) {
  if (!ctx.recording()) return false;
  for (int64_t p : parents) {
    if (p >= 0) return true;
  }
  return false;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

inline constexpr double kMaskFill = -1e30;

template <typename T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t));
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Ctx<T>& ctx, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.value, b.value, "add");
  Tensor<T> out(a.value.shape());
  const T* pa = a.value.data();
  const T* pb = b.value.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  Var<T> r(std::move(out));
  if (detail::want_node(ctx, {a.node, b.node})) {
    const int64_t na = a.node, nb = b.node;
    r.node = ctx.tape->add_node(
        r.value.shape(), [na, nb](Tape<T>& tp, const Tensor<T>& g) {
          tp.acc(na, g);
          tp.acc(nb, g);
        });
  }
  return r;
}

// a + alpha * b, the residual form used by the half-step feed-forward paths.
template <typename T>
Var<T> add_scaled(Ctx<T>& ctx, const Var<T>& a, const Var<T>& b, T alpha) {
  detail::require_same_shape(a.value, b.value, "add_scaled");
  Tensor<T> out(a.value.shape());
  const T* pa = a.value.data();
  const T* pb = b.value.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + alpha * pb[i];
  Var<T> r(std::move(out));
  if (detail::want_node(ctx, {a.node, b.node})) {
    const int64_t na = a.node, nb = b.node;
    r.node = ctx.tape->add_node(
        r.value.shape(), [na, nb, alpha](Tape<T>& tp, const Tensor<T>& g) {
          tp.acc(na, g);
          tp.acc_scaled(nb, alpha, g);
        });
  }
  return r;
}

template <typename T>
Var<T> scale(Ctx<T>& ctx, const Var<T>& a, T alpha) {
  Tensor<T> out(a.value.shape());
  const T* pa = a.value.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = alpha * pa[i];
  Var<T> r(std::move(out));
  if (detail::want_node(ctx, {a.node})) {
    const int64_t na = a.node;
    r.node = ctx.tape->add_node(
        r.value.shape(), [na, alpha](Tape<T>& tp, const Tensor<T>& g) {
          tp.acc_scaled(na, alpha, g);
        });
  }
  return r;
}

template <typename T>
Var<T> mul(Ctx<T>& ctx, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.value, b.value, "mul");
  Tensor<T> out(a.value.shape());
  const T* pa = a.value.data();
  const T* pb = b.value.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  Var<T> r(std::move(out));
  if (detail::want_node(ctx, {a.node, b.node})) {
    const int64_t na = a.node, nb = b.node;
    Tensor<T> av = a.value;
    Tensor<T> bv = b.value;
    r.node = ctx.tape->add_node(
        r.value.shape(), [na, nb, av, bv](Tape<T>& tp, const Tensor<T>& g) {
          const int64_t m = g.numel();
          const T* pg = g.data();
          if (na >= 0) {
            Tensor<T> da(av.shape());
            T* pd = da.data();
            const T* pbv = bv.data();
            for (int64_t i = 0; i < m; ++i) pd[i] = pg[i] * pbv[i];
            tp.acc(na, da);
          }
          if (nb >= 0) {
            Tensor<T> db(bv.shape());
            T* pd = db.data();
            const T* pav = av.data();
            for (int64_t i = 0; i < m; ++i) pd[i] = pg[i] * pav[i];
            tp.acc(nb, db);
          }
        });
  }
  return r;
}

// Reduces to a [1] scalar.
template <typename T>
Var<T> sum_all(Ctx<T>& ctx, const Var<T>& a) {
  Tensor<T> out(Shape{1});
  const T* pa = a.value.data();
  T s = 0;
  const int64_t n = a.value.numel();
  for (int64_t i = 0; i < n; ++i) s += pa[i];
  out[0] = s;
  Var<T> r(std::move(out));
  if (detail::want_node(ctx, {a.node})) {
    const int64_t na = a.node;
    Shape as = a.value.shape();
    r.node = ctx.tape->add_node(
        r.value.shape(), [na, as](Tape<T>& tp, const Tensor<T>& g) {
          tp.acc(na, Tensor<T>::full(as, g[0]));
        });
  }
  return r;
}

template <typename T>
Var<T> relu(Ctx<T>& ctx, const Var<T>& a) {
  Tensor<T> out(a.value.shape());
  const T* pa = a.value.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  Var<T> r(std::move(out));
  if (detail::want_node(ctx, {a.node})) {
    const int64_t na = a.node;
    Tensor<T> x = a.value;
    r.node = ctx.tape->add_node(
        r.value.shape(), [na, x](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(x.shape());
          const T* px = x.data();
          const T* pg = g.data();
          T* pd = dx.data();
          const int64_t m = x.numel();
          for (int64_t i = 0; i < m; ++i) pd[i] = px[i] > T(0) ? pg[i] : T(0);
          tp.acc(na, dx);
        });
  }
  return r;
}

template <typename T>
Var<T> swish(Ctx<T>& ctx, const Var<T>& a) {
  Tensor<T> out(a.value.shape());
  const T* pa = a.value.data();
  T* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * detail::sigmoid(pa[i]);
  Var<T> r(std::move(out));
  if (detail::want_node(ctx, {a.node})) {
    const int64_t na = a.node;
    Tensor<T> x = a.value;
    r.node = ctx.tape->add_node(
        r.value.shape(), [na, x](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(x.shape());
          const T* px = x.data();
          const T* pg = g.data();
          T* pd = dx.data();
          const int64_t m = x.numel();
          for (int64_t i = 0; i < m; ++i) {
            const T s = detail::sigmoid(px[i]);
            pd[i] = pg[i] * (s * (T(1) + px[i] * (T(1) - s)));
          }
          tp.acc(na, dx);
        });
  }
  return r;
}

// Gated linear unit over the last axis: splits [..., 2c] into value and gate
// halves, returns value * sigmoid(gate) with shape [..., c].
template <typename T>
Var<T> glu_lastaxis(Ctx<T>& ctx, const Var<T>& a) {
  const Shape& s = a.value.shape();
  const int64_t twoC = s.back();
  if (twoC % 2 != 0) {
    throw ShapeError("glu needs an even last axis, got " + shape_str(s));
  }
  const int64_t c = twoC / 2;
  Shape os = s;
  os.back() = c;
  const int64_t rows = a.value.numel() / twoC;
  Tensor<T> out(os);
  const T* pa = a.value.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = pa + r * twoC;
    T* yr = po + r * c;
    for (int64_t j = 0; j < c; ++j) {
      yr[j] = xr[j] * detail::sigmoid(xr[c + j]);
    }
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {a.node})) {
    const int64_t na = a.node;
    Tensor<T> x = a.value;
    res.node = ctx.tape->add_node(
        res.value.shape(), [na, x, rows, c](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(x.shape());
          const T* px = x.data();
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px + r * 2 * c;
            const T* gr = pg + r * c;
            T* dr = pd + r * 2 * c;
            for (int64_t j = 0; j < c; ++j) {
              const T sg = detail::sigmoid(xr[c + j]);
              dr[j] = gr[j] * sg;
              dr[c + j] = gr[j] * xr[j] * sg * (T(1) - sg);
            }
          }
          tp.acc(na, dx);
        });
  }
  return res;
}

// Inverted dropout. Identity when not training or rate == 0; otherwise the
// kept mask is drawn from ctx.rng and captured for the backward pass.
template <typename T>
Var<T> dropout(Ctx<T>& ctx, const Var<T>& a, T rate) {
  if (!ctx.training || rate <= T(0)) return a;
  if (rate >= T(1)) throw ConfigError("dropout rate must be < 1");
  if (!ctx.rng) throw StateError("dropout in training mode needs an rng");
  Tensor<T> mask(a.value.shape());
  const T keep_scale = T(1) / (T(1) - rate);
  T* pm = mask.data();
  const int64_t n = mask.numel();
  for (int64_t i = 0; i < n; ++i) {
    pm[i] = ctx.rng->bernoulli(1.0 - static_cast<double>(rate))
                ? keep_scale
                : T(0);
  }
  Tensor<T> out(a.value.shape());
  const T* pa = a.value.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pm[i];
  Var<T> r(std::move(out));
  if (detail::want_node(ctx, {a.node})) {
    const int64_t na = a.node;
    r.node = ctx.tape->add_node(
        r.value.shape(), [na, mask](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(mask.shape());
          const T* pm2 = mask.data();
          const T* pg = g.data();
          T* pd = dx.data();
          const int64_t m = mask.numel();
          for (int64_t i = 0; i < m; ++i) pd[i] = pg[i] * pm2[i];
          tp.acc(na, dx);
        });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// x[..., din] -> [..., dout]; W[din, dout], optional bias[dout]
// (pass a default Var for none).
template <typename T>
Var<T> linear(Ctx<T>& ctx, const Var<T>& x, const Var<T>& w,
              const Var<T>& b) {
  const Shape& xs = x.value.shape();
  if (w.value.rank() != 2 || xs.back() != w.value.dim(0)) {
    throw ShapeError("linear: x " + shape_str(xs) + " vs w " +
                     shape_str(w.value.shape()));
  }
  const int64_t din = w.value.dim(0);
  const int64_t dout = w.value.dim(1);
  const int64_t rows = x.value.numel() / din;
  const bool has_bias = b.value.defined();
  if (has_bias &&
      (b.value.rank() != 1 || b.value.dim(0) != dout)) {
    throw ShapeError("linear: bad bias shape " + shape_str(b.value.shape()));
  }
  Shape os = xs;
  os.back() = dout;
  Tensor<T> out(os);
  kernels::gemm(x.value.data(), w.value.data(), out.data(), rows, din, dout);
  if (has_bias) {
    T* po = out.data();
    const T* pb = b.value.data();
    for (int64_t r = 0; r < rows; ++r) {
      T* yr = po + r * dout;
      for (int64_t j = 0; j < dout; ++j) yr[j] += pb[j];
    }
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node, w.node, b.node})) {
    const int64_t nx = x.node, nw = w.node, nb = b.node;
    Tensor<T> xv = x.value;
    Tensor<T> wv = w.value;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, nw, nb, xv, wv, rows, din, dout](Tape<T>& tp,
                                              const Tensor<T>& g) {
          if (nx >= 0) {
            Tensor<T> dx(xv.shape());
            kernels::gemm_nt(g.data(), wv.data(), dx.data(), rows, dout, din);
            tp.acc(nx, dx);
          }
          if (nw >= 0) {
            Tensor<T> dw(wv.shape());
            kernels::gemm_tn(xv.data(), g.data(), dw.data(), din, rows, dout);
            tp.acc(nw, dw);
          }
          if (nb >= 0) {
            Tensor<T> db(Shape{dout});
            T* pd = db.data();
            const T* pg = g.data();
            for (int64_t r = 0; r < rows; ++r) {
              const T* gr = pg + r * dout;
              for (int64_t j = 0; j < dout; ++j) pd[j] += gr[j];
            }
            tp.acc(nb, db);
          }
        });
  }
  return res;
}

template <typename T>
Var<T> matmul(Ctx<T>& ctx, const Var<T>& a, const Var<T>& b) {
  if (a.value.rank() != 2 || b.value.rank() != 2 ||
      a.value.dim(1) != b.value.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.value.shape()) + " x " +
                     shape_str(b.value.shape()));
  }
  const int64_t m = a.value.dim(0);
  const int64_t k = a.value.dim(1);
  const int64_t n = b.value.dim(1);
  Tensor<T> out(Shape{m, n});
  kernels::gemm(a.value.data(), b.value.data(), out.data(), m, k, n);
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {a.node, b.node})) {
    const int64_t na = a.node, nb = b.node;
    Tensor<T> av = a.value;
    Tensor<T> bv = b.value;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [na, nb, av, bv, m, k, n](Tape<T>& tp, const Tensor<T>& g) {
          if (na >= 0) {
            Tensor<T> da(av.shape());
            kernels::gemm_nt(g.data(), bv.data(), da.data(), m, n, k);
            tp.acc(na, da);
          }
          if (nb >= 0) {
            Tensor<T> db(bv.shape());
            kernels::gemm_tn(av.data(), g.data(), db.data(), k, m, n);
            tp.acc(nb, db);
          }
        });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Convolutions (channels-last layouts, see kernels.hpp)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv1d(Ctx<T>& ctx, const Var<T>& x, const Var<T>& w, const Var<T>& b,
              int64_t stride, int64_t pad) {
  if (x.value.rank() != 3 || w.value.rank() != 3 ||
      x.value.dim(2) != w.value.dim(1)) {
    throw ShapeError("conv1d: x " + shape_str(x.value.shape()) + " vs w " +
                     shape_str(w.value.shape()));
  }
  const int64_t bsz = x.value.dim(0), t_in = x.value.dim(1);
  const int64_t ci = w.value.dim(1), co = w.value.dim(2), k = w.value.dim(0);
  const int64_t t_out = kernels::conv_out_len(t_in, k, stride, pad);
  if (t_out < 1) {
    throw ShapeError("conv1d: input length " + std::to_string(t_in) +
                     " too short for kernel " + std::to_string(k));
  }
  Tensor<T> out(Shape{bsz, t_out, co});
  kernels::conv1d(x.value.data(), w.value.data(),
                  b.value.defined() ? b.value.data() : nullptr, out.data(),
                  bsz, t_in, ci, co, k, stride, pad);
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node, w.node, b.node})) {
    const int64_t nx = x.node, nw = w.node, nb = b.node;
    Tensor<T> xv = x.value;
    Tensor<T> wv = w.value;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, nw, nb, xv, wv, bsz, t_in, ci, co, k, stride, pad](
            Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx, dw, db;
          if (nx >= 0) dx = Tensor<T>(xv.shape());
          if (nw >= 0) dw = Tensor<T>(wv.shape());
          if (nb >= 0) db = Tensor<T>(Shape{co});
          kernels::conv1d_backward(xv.data(), wv.data(), g.data(),
                                   dx.defined() ? dx.data() : nullptr,
                                   dw.defined() ? dw.data() : nullptr,
                                   db.defined() ? db.data() : nullptr, bsz,
                                   t_in, ci, co, k, stride, pad);
          if (nx >= 0) tp.acc(nx, dx);
          if (nw >= 0) tp.acc(nw, dw);
          if (nb >= 0) tp.acc(nb, db);
        });
  }
  return res;
}

template <typename T>
Var<T> conv2d(Ctx<T>& ctx, const Var<T>& x, const Var<T>& w, const Var<T>& b,
              int64_t stride, int64_t pad) {
  if (x.value.rank() != 4 || w.value.rank() != 4 ||
      x.value.dim(3) != w.value.dim(2) || w.value.dim(0) != w.value.dim(1)) {
    throw ShapeError("conv2d: x " + shape_str(x.value.shape()) + " vs w " +
                     shape_str(w.value.shape()));
  }
  const int64_t bsz = x.value.dim(0), t_in = x.value.dim(1),
                f_in = x.value.dim(2);
  const int64_t ci = w.value.dim(2), co = w.value.dim(3), k = w.value.dim(0);
  const int64_t t_out = kernels::conv_out_len(t_in, k, stride, pad);
  const int64_t f_out = kernels::conv_out_len(f_in, k, stride, pad);
  if (t_out < 1 || f_out < 1) {
    throw ShapeError("conv2d: input " + shape_str(x.value.shape()) +
                     " too small for kernel " + std::to_string(k));
  }
  Tensor<T> out(Shape{bsz, t_out, f_out, co});
  kernels::conv2d(x.value.data(), w.value.data(),
                  b.value.defined() ? b.value.data() : nullptr, out.data(),
                  bsz, t_in, f_in, ci, co, k, stride, pad);
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node, w.node, b.node})) {
    const int64_t nx = x.node, nw = w.node, nb = b.node;
    Tensor<T> xv = x.value;
    Tensor<T> wv = w.value;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, nw, nb, xv, wv, bsz, t_in, f_in, ci, co, k, stride, pad](
            Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx, dw, db;
          if (nx >= 0) dx = Tensor<T>(xv.shape());
          if (nw >= 0) dw = Tensor<T>(wv.shape());
          if (nb >= 0) db = Tensor<T>(Shape{co});
          kernels::conv2d_backward(xv.data(), wv.data(), g.data(),
                                   dx.defined() ? dx.data() : nullptr,
                                   dw.defined() ? dw.data() : nullptr,
                                   db.defined() ? db.data() : nullptr, bsz,
                                   t_in, f_in, ci, co, k, stride, pad);
          if (nx >= 0) tp.acc(nx, dx);
          if (nw >= 0) tp.acc(nw, dw);
          if (nb >= 0) tp.acc(nb, db);
        });
  }
  return res;
}

// Depthwise, stride 1, same-length output.
template <typename T>
Var<T> dwconv1d(Ctx<T>& ctx, const Var<T>& x, const Var<T>& w,
                const Var<T>& b) {
  if (x.value.rank() != 3 || w.value.rank() != 2 ||
      x.value.dim(2) != w.value.dim(1)) {
    throw ShapeError("dwconv1d: x " + shape_str(x.value.shape()) + " vs w " +
                     shape_str(w.value.shape()));
  }
  const int64_t bsz = x.value.dim(0), t_in = x.value.dim(1),
                ch = x.value.dim(2), k = w.value.dim(0);
  if (k % 2 == 0) throw ShapeError("dwconv1d kernel must be odd");
  Tensor<T> out(x.value.shape());
  kernels::dwconv1d(x.value.data(), w.value.data(),
                    b.value.defined() ? b.value.data() : nullptr, out.data(),
                    bsz, t_in, ch, k);
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node, w.node, b.node})) {
    const int64_t nx = x.node, nw = w.node, nb = b.node;
    Tensor<T> xv = x.value;
    Tensor<T> wv = w.value;
    res.node = ctx.tape->add_node(
        res.value.shape(), [nx, nw, nb, xv, wv, bsz, t_in, ch, k](
                               Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx, dw, db;
          if (nx >= 0) dx = Tensor<T>(xv.shape());
          if (nw >= 0) dw = Tensor<T>(wv.shape());
          if (nb >= 0) db = Tensor<T>(Shape{ch});
          kernels::dwconv1d_backward(xv.data(), wv.data(), g.data(),
                                     dx.defined() ? dx.data() : nullptr,
                                     dw.defined() ? dw.data() : nullptr,
                                     db.defined() ? db.data() : nullptr, bsz,
                                     t_in, ch, k);
          if (nx >= 0) tp.acc(nx, dx);
          if (nw >= 0) tp.acc(nw, dw);
          if (nb >= 0) tp.acc(nb, db);
        });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Normalization and softmax
// ---------------------------------------------------------------------------

template <typename T>
Var<T> layer_norm(Ctx<T>& ctx, const Var<T>& x, const Var<T>& gain,
                  const Var<T>& bias, T eps = T(1e-5)) {
  const int64_t d = x.value.shape().back();
  if (gain.value.rank() != 1 || gain.value.dim(0) != d ||
      bias.value.rank() != 1 || bias.value.dim(0) != d) {
    throw ShapeError("layer_norm: parameter shapes do not match last axis " +
                     std::to_string(d));
  }
  const int64_t rows = x.value.numel() / d;
  Tensor<T> out(x.value.shape());
  Tensor<T> mean(Shape{rows});
  Tensor<T> rstd(Shape{rows});
  kernels::layer_norm_rows(x.value.data(), gain.value.data(),
                           bias.value.data(), out.data(), mean.data(),
                           rstd.data(), rows, d, eps);
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node, gain.node, bias.node})) {
    const int64_t nx = x.node, ng = gain.node, nb = bias.node;
    Tensor<T> xv = x.value;
    Tensor<T> gv = gain.value;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, ng, nb, xv, gv, mean, rstd, rows, d](Tape<T>& tp,
                                                  const Tensor<T>& g) {
          Tensor<T> dx, dgain, dbias;
          if (nx >= 0) dx = Tensor<T>(xv.shape());
          if (ng >= 0) dgain = Tensor<T>(Shape{d});
          if (nb >= 0) dbias = Tensor<T>(Shape{d});
          const T* px = xv.data();
          const T* pgam = gv.data();
          const T* pg = g.data();
          const T* pm = mean.data();
          const T* pr = rstd.data();
          for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px + r * d;
            const T* gr = pg + r * d;
            const T mu = pm[r];
            const T rs = pr[r];
            if (ng >= 0 || nb >= 0) {
              T* pdg = ng >= 0 ? dgain.data() : nullptr;
              T* pdb = nb >= 0 ? dbias.data() : nullptr;
              for (int64_t j = 0; j < d; ++j) {
                if (pdg) pdg[j] += gr[j] * (xr[j] - mu) * rs;
                if (pdb) pdb[j] += gr[j];
              }
            }
            if (nx >= 0) {
              // dx = rstd * (a - mean(a) - xhat * mean(a*xhat)),  a = g*gain
              T s1 = 0, s2 = 0;
              for (int64_t j = 0; j < d; ++j) {
                const T a = gr[j] * pgam[j];
                const T xh = (xr[j] - mu) * rs;
                s1 += a;
                s2 += a * xh;
              }
              s1 /= static_cast<T>(d);
              s2 /= static_cast<T>(d);
              T* dr = dx.data() + r * d;
              for (int64_t j = 0; j < d; ++j) {
                const T a = gr[j] * pgam[j];
                const T xh = (xr[j] - mu) * rs;
                dr[j] = rs * (a - s1 - xh * s2);
              }
            }
          }
          if (nx >= 0) tp.acc(nx, dx);
          if (ng >= 0) tp.acc(ng, dgain);
          if (nb >= 0) tp.acc(nb, dbias);
        });
  }
  return res;
}

template <typename T>
Var<T> softmax_lastaxis(Ctx<T>& ctx, const Var<T>& x) {
  const int64_t d = x.value.shape().back();
  const int64_t rows = x.value.numel() / d;
  Tensor<T> out(x.value.shape());
  kernels::softmax_rows(x.value.data(), out.data(), rows, d);
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    Tensor<T> y = res.value;
    res.node = ctx.tape->add_node(
        res.value.shape(), [nx, y, rows, d](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(y.shape());
          const T* py = y.data();
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t r = 0; r < rows; ++r) {
            const T* yr = py + r * d;
            const T* gr = pg + r * d;
            T* dr = pd + r * d;
            T dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
            for (int64_t j = 0; j < d; ++j) dr[j] = yr[j] * (gr[j] - dot);
          }
          tp.acc(nx, dx);
        });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Padding masks
// ---------------------------------------------------------------------------

// Zeroes frames at or past each sequence's length. x[B,T,d].
template <typename T>
Var<T> mask_frames(Ctx<T>& ctx, const Var<T>& x,
                   const std::vector<int64_t>& lens) {
  if (x.value.rank() != 3 ||
      x.value.dim(0) != static_cast<int64_t>(lens.size())) {
    throw ShapeError("mask_frames: x " + shape_str(x.value.shape()) +
                     " vs " + std::to_string(lens.size()) + " lengths");
  }
  const int64_t bsz = x.value.dim(0), t = x.value.dim(1), d = x.value.dim(2);
  Tensor<T> out(x.value.shape());
  const T* px = x.value.data();
  T* po = out.data();
  for (int64_t b = 0; b < bsz; ++b) {
    const int64_t lb = std::min<int64_t>(lens[static_cast<size_t>(b)], t);
    const int64_t keep = lb * d;
    std::copy(px + b * t * d, px + b * t * d + keep, po + b * t * d);
    std::fill(po + b * t * d + keep, po + (b + 1) * t * d, T(0));
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    std::vector<int64_t> ls = lens;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, ls, bsz, t, d](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(g.shape());
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t b = 0; b < bsz; ++b) {
            const int64_t lb =
                std::min<int64_t>(ls[static_cast<size_t>(b)], t);
            const int64_t keep = lb * d;
            std::copy(pg + b * t * d, pg + b * t * d + keep, pd + b * t * d);
          }
          tp.acc(nx, dx);
        });
  }
  return res;
}

// Adds a large negative constant to attention scores at padded key columns.
// s[B*H, Tq, Tk], lens per batch entry. Additive, so the gradient passes
// through unchanged.
template <typename T>
Var<T> mask_attn_scores(Ctx<T>& ctx, const Var<T>& s,
                        const std::vector<int64_t>& lens, int64_t heads) {
  if (s.value.rank() != 3 ||
      s.value.dim(0) != static_cast<int64_t>(lens.size()) * heads) {
    throw ShapeError("mask_attn_scores: s " + shape_str(s.value.shape()) +
                     " vs " + std::to_string(lens.size()) + " x " +
                     std::to_string(heads));
  }
  const int64_t n = s.value.dim(0), tq = s.value.dim(1), tk = s.value.dim(2);
  Tensor<T> out = s.value.clone();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t lb =
        std::min<int64_t>(lens[static_cast<size_t>(i / heads)], tk);
    if (lb >= tk) continue;
    for (int64_t q = 0; q < tq; ++q) {
      T* row = po + (i * tq + q) * tk;
      for (int64_t j = lb; j < tk; ++j) row[j] += static_cast<T>(kMaskFill);
    }
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {s.node})) {
    const int64_t ns = s.node;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [ns](Tape<T>& tp, const Tensor<T>& g) { tp.acc(ns, g); });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Attention plumbing
// ---------------------------------------------------------------------------

// [B,T,d] -> [B*H, T, d/H]; head h of batch b lands at row b*H + h.
template <typename T>
Var<T> split_heads(Ctx<T>& ctx, const Var<T>& x, int64_t heads) {
  if (x.value.rank() != 3 || x.value.dim(2) % heads != 0) {
    throw ShapeError("split_heads: " + shape_str(x.value.shape()) + " into " +
                     std::to_string(heads) + " heads");
  }
  const int64_t bsz = x.value.dim(0), t = x.value.dim(1), d = x.value.dim(2);
  const int64_t dh = d / heads;
  Tensor<T> out(Shape{bsz * heads, t, dh});
  const T* px = x.value.data();
  T* po = out.data();
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t i = 0; i < t; ++i) {
        const T* src = px + (b * t + i) * d + h * dh;
        T* dst = po + ((b * heads + h) * t + i) * dh;
        std::copy(src, src + dh, dst);
      }
    }
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, bsz, heads, t, d, dh](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(Shape{bsz, t, d});
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t b = 0; b < bsz; ++b) {
            for (int64_t h = 0; h < heads; ++h) {
              for (int64_t i = 0; i < t; ++i) {
                const T* src = pg + ((b * heads + h) * t + i) * dh;
                T* dst = pd + (b * t + i) * d + h * dh;
                std::copy(src, src + dh, dst);
              }
            }
          }
          tp.acc(nx, dx);
        });
  }
  return res;
}

// Inverse of split_heads: [B*H, T, dh] -> [B, T, H*dh].
template <typename T>
Var<T> merge_heads(Ctx<T>& ctx, const Var<T>& x, int64_t heads) {
  if (x.value.rank() != 3 || x.value.dim(0) % heads != 0) {
    throw ShapeError("merge_heads: " + shape_str(x.value.shape()) + " from " +
                     std::to_string(heads) + " heads");
  }
  const int64_t bsz = x.value.dim(0) / heads, t = x.value.dim(1),
                dh = x.value.dim(2);
  const int64_t d = heads * dh;
  Tensor<T> out(Shape{bsz, t, d});
  const T* px = x.value.data();
  T* po = out.data();
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t i = 0; i < t; ++i) {
        const T* src = px + ((b * heads + h) * t + i) * dh;
        T* dst = po + (b * t + i) * d + h * dh;
        std::copy(src, src + dh, dst);
      }
    }
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, bsz, heads, t, d, dh](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(Shape{bsz * heads, t, dh});
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t b = 0; b < bsz; ++b) {
            for (int64_t h = 0; h < heads; ++h) {
              for (int64_t i = 0; i < t; ++i) {
                const T* src = pg + (b * t + i) * d + h * dh;
                T* dst = pd + ((b * heads + h) * t + i) * dh;
                std::copy(src, src + dh, dst);
              }
            }
          }
          tp.acc(nx, dx);
        });
  }
  return res;
}

// Adds a per-head bias to [B*H, T, dh]; bias[H, dh], row n uses head n % H.
template <typename T>
Var<T> add_head_bias(Ctx<T>& ctx, const Var<T>& x, const Var<T>& bias) {
  if (x.value.rank() != 3 || bias.value.rank() != 2 ||
      x.value.dim(2) != bias.value.dim(1) ||
      x.value.dim(0) % bias.value.dim(0) != 0) {
    throw ShapeError("add_head_bias: x " + shape_str(x.value.shape()) +
                     " vs bias " + shape_str(bias.value.shape()));
  }
  const int64_t n = x.value.dim(0), t = x.value.dim(1), dh = x.value.dim(2);
  const int64_t heads = bias.value.dim(0);
  Tensor<T> out(x.value.shape());
  const T* px = x.value.data();
  const T* pb = bias.value.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    const T* brow = pb + (i % heads) * dh;
    for (int64_t q = 0; q < t; ++q) {
      const T* xr = px + (i * t + q) * dh;
      T* yr = po + (i * t + q) * dh;
      for (int64_t c = 0; c < dh; ++c) yr[c] = xr[c] + brow[c];
    }
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node, bias.node})) {
    const int64_t nx = x.node, nb = bias.node;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, nb, n, t, dh, heads](Tape<T>& tp, const Tensor<T>& g) {
          if (nx >= 0) tp.acc(nx, g);
          if (nb >= 0) {
            Tensor<T> db(Shape{heads, dh});
            const T* pg = g.data();
            T* pd = db.data();
            for (int64_t i = 0; i < n; ++i) {
              T* drow = pd + (i % heads) * dh;
              for (int64_t q = 0; q < t; ++q) {
                const T* gr = pg + (i * t + q) * dh;
                for (int64_t c = 0; c < dh; ++c) drow[c] += gr[c];
              }
            }
            tp.acc(nb, db);
          }
        });
  }
  return res;
}

// Batched matmul with a cyclic right operand: y[n] = a[n] * b[n % M].
// a[N,m,k], b[M,k,p] -> y[N,m,p]. N must be a multiple of M.
template <typename T>
Var<T> bmm(Ctx<T>& ctx, const Var<T>& a, const Var<T>& b) {
  if (a.value.rank() != 3 || b.value.rank() != 3 ||
      a.value.dim(2) != b.value.dim(1) ||
      a.value.dim(0) % b.value.dim(0) != 0) {
    throw ShapeError("bmm: " + shape_str(a.value.shape()) + " x " +
                     shape_str(b.value.shape()));
  }
  const int64_t nbig = a.value.dim(0), m = a.value.dim(1), k = a.value.dim(2);
  const int64_t msmall = b.value.dim(0), p = b.value.dim(2);
  Tensor<T> out(Shape{nbig, m, p});
  for (int64_t i = 0; i < nbig; ++i) {
    kernels::gemm(a.value.data() + i * m * k,
                  b.value.data() + (i % msmall) * k * p,
                  out.data() + i * m * p, m, k, p);
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {a.node, b.node})) {
    const int64_t na = a.node, nb = b.node;
    Tensor<T> av = a.value;
    Tensor<T> bv = b.value;
    res.node = ctx.tape->add_node(
        res.value.shape(), [na, nb, av, bv, nbig, m, k, msmall, p](
                               Tape<T>& tp, const Tensor<T>& g) {
          if (na >= 0) {
            Tensor<T> da(av.shape());
            for (int64_t i = 0; i < nbig; ++i) {
              kernels::gemm_nt(g.data() + i * m * p,
                               bv.data() + (i % msmall) * k * p,
                               da.data() + i * m * k, m, p, k);
            }
            tp.acc(na, da);
          }
          if (nb >= 0) {
            Tensor<T> db(bv.shape());
            Tensor<T> tmp(Shape{k, p});
            for (int64_t i = 0; i < nbig; ++i) {
              kernels::gemm_tn(av.data() + i * m * k, g.data() + i * m * p,
                               tmp.data(), k, m, p);
              T* dst = db.data() + (i % msmall) * k * p;
              const T* src = tmp.data();
              for (int64_t j = 0; j < k * p; ++j) dst[j] += src[j];
            }
            tp.acc(nb, db);
          }
        });
  }
  return res;
}

// Batched a[n] * b[n % M]^T: a[N,m,e], b[M,p,e] -> y[N,m,p].
template <typename T>
Var<T> bmm_nt(Ctx<T>& ctx, const Var<T>& a, const Var<T>& b) {
  if (a.value.rank() != 3 || b.value.rank() != 3 ||
      a.value.dim(2) != b.value.dim(2) ||
      a.value.dim(0) % b.value.dim(0) != 0) {
    throw ShapeError("bmm_nt: " + shape_str(a.value.shape()) + " x " +
                     shape_str(b.value.shape()));
  }
  const int64_t nbig = a.value.dim(0), m = a.value.dim(1), e = a.value.dim(2);
  const int64_t msmall = b.value.dim(0), p = b.value.dim(1);
  Tensor<T> out(Shape{nbig, m, p});
  for (int64_t i = 0; i < nbig; ++i) {
    kernels::gemm_nt(a.value.data() + i * m * e,
                     b.value.data() + (i % msmall) * p * e,
                     out.data() + i * m * p, m, e, p);
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {a.node, b.node})) {
    const int64_t na = a.node, nb = b.node;
    Tensor<T> av = a.value;
    Tensor<T> bv = b.value;
    res.node = ctx.tape->add_node(
        res.value.shape(), [na, nb, av, bv, nbig, m, e, msmall, p](
                               Tape<T>& tp, const Tensor<T>& g) {
          if (na >= 0) {
            Tensor<T> da(av.shape());
            for (int64_t i = 0; i < nbig; ++i) {
              kernels::gemm(g.data() + i * m * p,
                            bv.data() + (i % msmall) * p * e,
                            da.data() + i * m * e, m, p, e);
            }
            tp.acc(na, da);
          }
          if (nb >= 0) {
            Tensor<T> db(bv.shape());
            Tensor<T> tmp(Shape{p, e});
            for (int64_t i = 0; i < nbig; ++i) {
              kernels::gemm_tn(g.data() + i * m * p, av.data() + i * m * e,
                               tmp.data(), p, m, e);
              T* dst = db.data() + (i % msmall) * p * e;
              const T* src = tmp.data();
              for (int64_t j = 0; j < p * e; ++j) dst[j] += src[j];
            }
            tp.acc(nb, db);
          }
        });
  }
  return res;
}

// Relative-to-absolute score alignment. x[N,T,2T-1] holds scores against
// relative offsets ordered from T-1 down to -(T-1); the output pairs query i
// with key j through y[n,i,j] = x[n,i,T-1-i+j].
template <typename T>
Var<T> rel_shift(Ctx<T>& ctx, const Var<T>& x) {
  if (x.value.rank() != 3 || x.value.dim(2) != 2 * x.value.dim(1) - 1) {
    throw ShapeError("rel_shift: want [N,T,2T-1], got " +
                     shape_str(x.value.shape()));
  }
  const int64_t n = x.value.dim(0), t = x.value.dim(1);
  const int64_t l = 2 * t - 1;
  Tensor<T> out(Shape{n, t, t});
  const T* px = x.value.data();
  T* po = out.data();
  for (int64_t i2 = 0; i2 < n * t; ++i2) {
    const int64_t i = i2 % t;
    const T* xr = px + i2 * l + (t - 1 - i);
    T* yr = po + i2 * t;
    std::copy(xr, xr + t, yr);
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    res.node = ctx.tape->add_node(
        res.value.shape(), [nx, n, t, l](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(Shape{n, t, l});
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t i2 = 0; i2 < n * t; ++i2) {
            const int64_t i = i2 % t;
            const T* gr = pg + i2 * t;
            T* dr = pd + i2 * l + (t - 1 - i);
            std::copy(gr, gr + t, dr);
          }
          tp.acc(nx, dx);
        });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Time-axis restructuring
// ---------------------------------------------------------------------------

// Nearest-neighbor x2: each frame is repeated. [B,T,d] -> [B,2T,d].
template <typename T>
Var<T> upsample2(Ctx<T>& ctx, const Var<T>& x) {
  if (x.value.rank() != 3) {
    throw ShapeError("upsample2: want rank 3, got " +
                     shape_str(x.value.shape()));
  }
  const int64_t bsz = x.value.dim(0), t = x.value.dim(1), d = x.value.dim(2);
  Tensor<T> out(Shape{bsz, 2 * t, d});
  const T* px = x.value.data();
  T* po = out.data();
  for (int64_t bt = 0; bt < bsz * t; ++bt) {
    const T* src = px + bt * d;
    T* dst = po + bt * 2 * d;
    std::copy(src, src + d, dst);
    std::copy(src, src + d, dst + d);
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    res.node = ctx.tape->add_node(
        res.value.shape(), [nx, bsz, t, d](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(Shape{bsz, t, d});
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t bt = 0; bt < bsz * t; ++bt) {
            const T* g0 = pg + bt * 2 * d;
            T* dst = pd + bt * d;
            for (int64_t c = 0; c < d; ++c) dst[c] = g0[c] + g0[d + c];
          }
          tp.acc(nx, dx);
        });
  }
  return res;
}

// Drops trailing frames: [B,T,d] -> [B,new_t,d].
template <typename T>
Var<T> truncate_time(Ctx<T>& ctx, const Var<T>& x, int64_t new_t) {
  if (x.value.rank() != 3 || new_t < 1 || new_t > x.value.dim(1)) {
    throw ShapeError("truncate_time: " + shape_str(x.value.shape()) + " to " +
                     std::to_string(new_t));
  }
  const int64_t bsz = x.value.dim(0), t = x.value.dim(1), d = x.value.dim(2);
  if (new_t == t) return x;
  Tensor<T> out(Shape{bsz, new_t, d});
  const T* px = x.value.data();
  T* po = out.data();
  for (int64_t b = 0; b < bsz; ++b) {
    std::copy(px + b * t * d, px + b * t * d + new_t * d, po + b * new_t * d);
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, bsz, t, d, new_t](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(Shape{bsz, t, d});
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t b = 0; b < bsz; ++b) {
            std::copy(pg + b * new_t * d, pg + (b + 1) * new_t * d,
                      pd + b * t * d);
          }
          tp.acc(nx, dx);
        });
  }
  return res;
}

// Keeps every second frame starting at 0: [B,T,d] -> [B,ceil(T/2),d].
template <typename T>
Var<T> decimate2(Ctx<T>& ctx, const Var<T>& x) {
  if (x.value.rank() != 3) {
    throw ShapeError("decimate2: want rank 3, got " +
                     shape_str(x.value.shape()));
  }
  const int64_t bsz = x.value.dim(0), t = x.value.dim(1), d = x.value.dim(2);
  const int64_t to = (t + 1) / 2;
  Tensor<T> out(Shape{bsz, to, d});
  const T* px = x.value.data();
  T* po = out.data();
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t i = 0; i < to; ++i) {
      const T* src = px + (b * t + 2 * i) * d;
      std::copy(src, src + d, po + (b * to + i) * d);
    }
  }
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, bsz, t, d, to](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(Shape{bsz, t, d});
          const T* pg = g.data();
          T* pd = dx.data();
          for (int64_t b = 0; b < bsz; ++b) {
            for (int64_t i = 0; i < to; ++i) {
              const T* src = pg + (b * to + i) * d;
              std::copy(src, src + d, pd + (b * t + 2 * i) * d);
            }
          }
          tp.acc(nx, dx);
        });
  }
  return res;
}

// Pulls one sequence out of a batch: x[B,T,d], row b, first len frames.
template <typename T>
Var<T> slice_sequence(Ctx<T>& ctx, const Var<T>& x, int64_t b, int64_t len) {
  if (x.value.rank() != 3 || b < 0 || b >= x.value.dim(0) || len < 1 ||
      len > x.value.dim(1)) {
    throw ShapeError("slice_sequence: " + shape_str(x.value.shape()) +
                     " row " + std::to_string(b) + " len " +
                     std::to_string(len));
  }
  const int64_t t = x.value.dim(1), d = x.value.dim(2);
  Tensor<T> out(Shape{len, d});
  const T* px = x.value.data() + b * t * d;
  std::copy(px, px + len * d, out.data());
  Var<T> res(std::move(out));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    const int64_t bsz = x.value.dim(0);
    res.node = ctx.tape->add_node(
        res.value.shape(),
        [nx, bsz, t, d, b, len](Tape<T>& tp, const Tensor<T>& g) {
          Tensor<T> dx(Shape{bsz, t, d});
          std::copy(g.data(), g.data() + len * d, dx.data() + b * t * d);
          tp.acc(nx, dx);
        });
  }
  return res;
}

// Same storage, new shape.
template <typename T>
Var<T> reshape(Ctx<T>& ctx, const Var<T>& x, Shape shape) {
  Var<T> res(x.value.reshaped(shape));
  if (detail::want_node(ctx, {x.node})) {
    const int64_t nx = x.node;
    Shape old = x.value.shape();
    res.node = ctx.tape->add_node(
        std::move(shape), [nx, old](Tape<T>& tp, const Tensor<T>& g) {
          tp.acc(nx, g.reshaped(old));
        });
  }
  return res;
}

}  // namespace uconv::ops
