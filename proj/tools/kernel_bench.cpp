// Times the OpenMP kernels against their serial reference twins on
// encoder-sized problems and prints throughput for both.

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "uconv/kernels.hpp"
#include "uconv/rng.hpp"
#include "uconv/tensor.hpp"

namespace {

using uconv::Rng;
using uconv::Shape;
using uconv::Tensor;
namespace kn = uconv::kernels;

Tensor<float> rand_tensor(Rng& rng, Shape shape) {
  Tensor<float> t(std::move(shape));
  float* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    p[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  return t;
}

double time_best_of(const std::function<void()>& fn, int repeats) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

void report(const std::string& name, double flops, double serial_s,
            double parallel_s) {
  std::printf("%-28s %10.2f ms %8.2f GF/s | %10.2f ms %8.2f GF/s | x%.2f\n",
              name.c_str(), serial_s * 1e3, flops / serial_s * 1e-9,
              parallel_s * 1e3, flops / parallel_s * 1e-9,
              serial_s / parallel_s);
}

}  // namespace

int main(int argc, char** argv) {
  int threads = 0;
  if (argc > 1) threads = std::atoi(argv[1]);
  if (threads > 0) kn::set_max_threads(threads);
  std::printf("workers: %d\n", kn::max_threads());
  std::printf("%-28s %25s | %25s | speedup\n", "kernel", "serial",
              "parallel");

  Rng rng(42);
  const int reps = 5;

  {
    const int64_t m = 750, k = 280, n = 1024;
    auto a = rand_tensor(rng, {m, k});
    auto b = rand_tensor(rng, {k, n});
    Tensor<float> c(Shape{m, n});
    const double flops = 2.0 * m * k * n;
    const double ts = time_best_of(
        [&] { kn::gemm_serial(a.data(), b.data(), c.data(), m, k, n); },
        reps);
    const double tp = time_best_of(
        [&] { kn::gemm(a.data(), b.data(), c.data(), m, k, n); }, reps);
    report("gemm 750x280x1024", flops, ts, tp);
  }
  {
    const int64_t m = 750, e = 64, n = 750;
    auto a = rand_tensor(rng, {m, e});
    auto b = rand_tensor(rng, {n, e});
    Tensor<float> c(Shape{m, n});
    const double flops = 2.0 * m * e * n;
    const double ts = time_best_of(
        [&] { kn::gemm_nt_serial(a.data(), b.data(), c.data(), m, e, n); },
        reps);
    const double tp = time_best_of(
        [&] { kn::gemm_nt(a.data(), b.data(), c.data(), m, e, n); }, reps);
    report("gemm_nt 750x64x750", flops, ts, tp);
  }
  {
    const int64_t bsz = 1, t = 750, ci = 280, co = 512, k = 3;
    auto x = rand_tensor(rng, {bsz, t, ci});
    auto w = rand_tensor(rng, {k, ci, co});
    auto bias = rand_tensor(rng, {co});
    Tensor<float> y(Shape{bsz, t, co});
    const double flops = 2.0 * bsz * t * k * ci * co;
    const double ts = time_best_of(
        [&] {
          kn::conv1d_serial(x.data(), w.data(), bias.data(), y.data(), bsz,
                            t, ci, co, k, 1, 1);
        },
        reps);
    const double tp = time_best_of(
        [&] {
          kn::conv1d(x.data(), w.data(), bias.data(), y.data(), bsz, t, ci,
                     co, k, 1, 1);
        },
        reps);
    report("conv1d t750 280->512 k3", flops, ts, tp);
  }
  {
    const int64_t bsz = 1, t = 1500, f = 40, ci = 64, co = 64, k = 3;
    auto x = rand_tensor(rng, {bsz, t, f, ci});
    auto w = rand_tensor(rng, {k, k, ci, co});
    auto bias = rand_tensor(rng, {co});
    const int64_t to = kn::conv_out_len(t, k, 2, 1);
    const int64_t fo = kn::conv_out_len(f, k, 2, 1);
    Tensor<float> y(Shape{bsz, to, fo, co});
    const double flops = 2.0 * bsz * to * fo * k * k * ci * co;
    const double ts = time_best_of(
        [&] {
          kn::conv2d_serial(x.data(), w.data(), bias.data(), y.data(), bsz,
                            t, f, ci, co, k, 2, 1);
        },
        reps);
    const double tp = time_best_of(
        [&] {
          kn::conv2d(x.data(), w.data(), bias.data(), y.data(), bsz, t, f,
                     ci, co, k, 2, 1);
        },
        reps);
    report("conv2d 1500x40 64->64 s2", flops, ts, tp);
  }
  {
    const int64_t bsz = 1, t = 750, ch = 280, k = 5;
    auto x = rand_tensor(rng, {bsz, t, ch});
    auto w = rand_tensor(rng, {k, ch});
    auto bias = rand_tensor(rng, {ch});
    Tensor<float> y(Shape{bsz, t, ch});
    const double flops = 2.0 * bsz * t * k * ch;
    const double ts = time_best_of(
        [&] {
          kn::dwconv1d_serial(x.data(), w.data(), bias.data(), y.data(), bsz,
                              t, ch, k);
        },
        reps);
    const double tp = time_best_of(
        [&] {
          kn::dwconv1d(x.data(), w.data(), bias.data(), y.data(), bsz, t, ch,
                       k);
        },
        reps);
    report("dwconv1d t750 c280 k5", flops, ts, tp);
  }
  {
    const int64_t rows = 8 * 750, cols = 750;
    auto x = rand_tensor(rng, {rows, cols});
    Tensor<float> y(Shape{rows, cols});
    const double flops = 5.0 * rows * cols;
    const double ts = time_best_of(
        [&] { kn::softmax_rows_serial(x.data(), y.data(), rows, cols); },
        reps);
    const double tp = time_best_of(
        [&] { kn::softmax_rows(x.data(), y.data(), rows, cols); }, reps);
    report("softmax 6000x750", flops, ts, tp);
  }
  {
    const int64_t rows = 750, d = 280;
    auto x = rand_tensor(rng, {rows, d});
    auto gain = rand_tensor(rng, {d});
    auto bias = rand_tensor(rng, {d});
    Tensor<float> y(Shape{rows, d});
    const double flops = 7.0 * rows * d;
    const double ts = time_best_of(
        [&] {
          kn::layer_norm_rows_serial(x.data(), gain.data(), bias.data(),
                                     y.data(), static_cast<float*>(nullptr),
                                     static_cast<float*>(nullptr), rows, d,
                                     1e-5f);
        },
        reps);
    const double tp = time_best_of(
        [&] {
          kn::layer_norm_rows(x.data(), gain.data(), bias.data(), y.data(),
                              static_cast<float*>(nullptr),
                              static_cast<float*>(nullptr), rows, d, 1e-5f);
        },
        reps);
    report("layer_norm 750x280", flops, ts, tp);
  }
  return 0;
}
