#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstring>
#include <functional>
#include <vector>

#include "doctest.h"
#include "uconv/kernels.hpp"
#include "uconv/layers.hpp"
#include "uconv/ops.hpp"
#include "uconv/rng.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

using namespace uconv;
using namespace uconv::layers;

namespace {

Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

Var<double> pv(Ctx<double>& ctx, Parameter<double>& p) {
  return ctx.recording() ? watch(*ctx.tape, p) : Var<double>(p.value);
}

using LossFn = std::function<Var<double>(Ctx<double>&)>;

// Central-difference check of every element of every parameter's gradient.
// Module parameters route through param_var inside forward(), so the same
// closure serves both the analytic and the perturbed evaluations.
void gradcheck(std::vector<Parameter<double>*> params, const LossFn& loss,
               double tol = 1e-4, double h = 1e-5) {
  Tape<double> tape;
  Ctx<double> ctx{&tape, false, nullptr};
  Var<double> l = loss(ctx);
  REQUIRE(l.value.numel() == 1);
  tape.backward(l);

  Ctx<double> eval_ctx{nullptr, false, nullptr};
  for (Parameter<double>* p : params) {
    REQUIRE(p->grad.defined());
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = loss(eval_ctx).value[0];
      p->value[i] = saved - h;
      const double down = loss(eval_ctx).value[0];
      p->value[i] = saved;
      const double fd = (up - down) / (2 * h);
      const double an = p->grad[i];
      const double err = std::abs(an - fd) / std::max(1.0, std::abs(fd));
      INFO(p->name, " element ", i, ": analytic ", an, " vs fd ", fd);
      CHECK(err < tol);
    }
    p->zero_grad();
  }
}

Var<double> weighted_sum(Ctx<double>& ctx, const Var<double>& y,
                         const Tensor<double>& w) {
  return ops::sum_all(ctx, ops::mul(ctx, y, ops::constant(w)));
}

LayerConfig tiny_config() {
  LayerConfig cfg;
  cfg.attn_dim = 6;
  cfg.heads = 2;
  cfg.ffn_dim = 8;
  cfg.conv_kernel = 3;
  cfg.dropout = 0.0;
  return cfg;
}

LayerConfig base_config() {
  // The 280-dim / 8-head / 1024-ffn / k5 geometry the frozen counts pin.
  LayerConfig cfg;
  cfg.attn_dim = 280;
  cfg.heads = 8;
  cfg.ffn_dim = 1024;
  cfg.conv_kernel = 5;
  return cfg;
}

template <typename M>
void zero_non_norm(M& module) {
  std::vector<Parameter<double>*> ps;
  module.collect(ps);
  for (auto* p : ps) {
    if (p->name.find("norm") == std::string::npos) p->value.fill(0.0);
  }
}

}  // namespace

TEST_CASE("config validation rejects bad geometry") {
  LayerConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.attn_dim = 7;  // not a multiple of heads=2
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.conv_kernel = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.ffn_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.heads = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("mask validation rejects inconsistent lengths") {
  CHECK_NOTHROW(check_mask({3, 1}, 2, 3));
  CHECK_THROWS_AS(check_mask({3}, 2, 3), ShapeError);
  CHECK_THROWS_AS(check_mask({0, 1}, 2, 3), ShapeError);
  CHECK_THROWS_AS(check_mask({4, 1}, 2, 3), ShapeError);
}

TEST_CASE("parameter counts match the closed-form sizes") {
  const LayerConfig cfg = base_config();
  Rng rng(1);

  // ffn: 2d + (d*f + f) + (f*d + d)
  Ffn<double> ffn;
  ffn.init("ffn", rng, cfg);
  CHECK(count_params<double>(ffn) == 575304);

  // mhsa: 2d + 4(d^2 + d) + d^2 + 2d (projections, position weights, biases)
  Mhsa<double> mhsa;
  mhsa.init("mhsa", rng, cfg);
  CHECK(count_params<double>(mhsa) == 394240);

  // absolute-position variant drops the position weights and head biases
  LayerConfig abs_cfg = cfg;
  abs_cfg.rel_pos = false;
  Mhsa<double> mhsa_abs;
  mhsa_abs.init("mhsa", rng, abs_cfg);
  CHECK(count_params<double>(mhsa_abs) == 315280);

  // conv module: two norms + pointwise d->2d + depthwise k + pointwise d->d
  ConvModule<double> conv;
  conv.init("conv", rng, cfg);
  CHECK(count_params<double>(conv) == 238840);

  ConformerBlock<double> block;
  block.init("block", rng, cfg);
  CHECK(count_params<double>(block) == 1784248);
  CHECK(count_params<double>(block) ==
        2 * 575304 + 394240 + 238840 + 2 * 280);
}

TEST_CASE("initialization is seeded, bounded, and zero-biased") {
  Rng r1(7), r2(7), r3(8);
  LinearP<double> a, b, c;
  a.init("l", r1, 100, 20);
  b.init("l", r2, 100, 20);
  c.init("l", r3, 100, 20);
  CHECK(std::memcmp(a.w.value.data(), b.w.value.data(),
                    sizeof(double) * a.w.value.numel()) == 0);
  CHECK(std::memcmp(a.w.value.data(), c.w.value.data(),
                    sizeof(double) * a.w.value.numel()) != 0);
  double max_abs = 0.0, min_abs = 1e9;
  for (int64_t i = 0; i < a.w.value.numel(); ++i) {
    max_abs = std::max(max_abs, std::abs(a.w.value[i]));
    min_abs = std::min(min_abs, std::abs(a.w.value[i]));
  }
  CHECK(max_abs <= 0.1);  // 1/sqrt(fan_in) with fan_in = 100
  CHECK(max_abs > 0.05);
  for (int64_t i = 0; i < a.b.value.numel(); ++i) CHECK(a.b.value[i] == 0.0);

  LayerNormP<double> n;
  n.init("norm", 16);
  for (int64_t i = 0; i < 16; ++i) {
    CHECK(n.gain.value[i] == 1.0);
    CHECK(n.bias.value[i] == 0.0);
  }
}

TEST_CASE("position tables encode offsets sinusoidally") {
  // Row t-1-l of the relative table is offset l; the zero-offset row is
  // sin(0), cos(0) interleaved.
  Tensor<double> rel = rel_pos_table<double>(3, 4);
  CHECK(rel.dim(0) == 5);
  CHECK(rel.dim(1) == 4);
  CHECK(rel.at(2, 0) == doctest::Approx(0.0));
  CHECK(rel.at(2, 1) == doctest::Approx(1.0));
  CHECK(rel.at(2, 2) == doctest::Approx(0.0));
  CHECK(rel.at(2, 3) == doctest::Approx(1.0));
  // offset +1 and -1 rows mirror in the sine channels
  CHECK(rel.at(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(rel.at(3, 0) == doctest::Approx(std::sin(-1.0)));
  CHECK(rel.at(1, 0) == doctest::Approx(-rel.at(3, 0)));

  Tensor<double> abs = abs_pos_table<double>(2, 4);
  CHECK(abs.at(0, 0) == doctest::Approx(0.0));
  CHECK(abs.at(0, 1) == doctest::Approx(1.0));
  CHECK(abs.at(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(abs.at(1, 3) == doctest::Approx(std::cos(1.0 / 100.0)));
}

TEST_CASE("a block with zeroed non-norm weights reduces to its final norm") {
  LayerConfig cfg = tiny_config();
  cfg.dropout = 0.1;  // inert in eval mode
  Rng rng(3);
  ConformerBlock<double> block;
  block.init("block", rng, cfg);
  zero_non_norm(block);

  const int64_t bsz = 2, t = 4, d = cfg.attn_dim;
  Tensor<double> x = rand_tensor(rng, {bsz, t, d});
  std::vector<int64_t> lens{4, 3};
  Tensor<double> pos = rel_pos_table<double>(t, d);

  Ctx<double> ctx{nullptr, false, nullptr};
  Var<double> y = block.forward(ctx, Var<double>(x), lens, &pos);

  // Every sublayer's closing projection is zero, so the residual stream
  // stays at x and only the output norm acts.
  Tensor<double> gain = Tensor<double>::full({d}, 1.0);
  Tensor<double> bias(Shape{d});
  Tensor<double> expect(x.shape()), mean(Shape{bsz * t}), rstd(Shape{bsz * t});
  kernels::layer_norm_rows_serial(x.data(), gain.data(), bias.data(),
                                  expect.data(), mean.data(), rstd.data(),
                                  bsz * t, d, 1e-5);
  for (int64_t i = 0; i < expect.numel(); ++i) {
    CHECK(y.value[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv module mixes time only within the depthwise halo") {
  LayerConfig cfg = tiny_config();  // kernel 3: halo of one frame
  Rng rng(5);
  ConvModule<double> conv;
  conv.init("conv", rng, cfg);

  const int64_t t = 6, d = cfg.attn_dim;
  Tensor<double> x = rand_tensor(rng, {1, t, d});
  std::vector<int64_t> lens{t};
  Ctx<double> ctx{nullptr, false, nullptr};
  Var<double> y0 = conv.forward(ctx, Var<double>(x), lens);

  // Perturb one channel only: a constant shift across a whole frame would
  // be absorbed by the leading norm.
  Tensor<double> x2 = x.clone();
  x2.at(0, 3, 0) += 0.25;
  Var<double> y1 = conv.forward(ctx, Var<double>(x2), lens);

  for (int64_t i = 0; i < t; ++i) {
    double diff = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      diff = std::max(diff, std::abs(y1.value.at(0, i, c) -
                                     y0.value.at(0, i, c)));
    }
    if (i >= 2 && i <= 4) {
      CHECK(diff > 1e-9);  // within distance (k-1)/2 of the edit
    } else {
      CHECK(diff == 0.0);
    }
  }

  SUBCASE("an identity depthwise tap makes the module frame-local") {
    conv.dw_w.value.fill(0.0);
    for (int64_t c = 0; c < d; ++c) conv.dw_w.value.at(1, c) = 1.0;
    conv.dw_b.value.fill(0.0);
    Var<double> z0 = conv.forward(ctx, Var<double>(x), lens);
    Var<double> z1 = conv.forward(ctx, Var<double>(x2), lens);
    for (int64_t i = 0; i < t; ++i) {
      if (i == 3) continue;
      for (int64_t c = 0; c < d; ++c) {
        CHECK(z1.value.at(0, i, c) == z0.value.at(0, i, c));
      }
    }
  }
}

TEST_CASE("single-frame attention is the value-path transform") {
  LayerConfig cfg = tiny_config();
  Rng rng(11);
  Mhsa<double> mhsa;
  mhsa.init("mhsa", rng, cfg);

  const int64_t d = cfg.attn_dim;
  Tensor<double> x = rand_tensor(rng, {2, 1, d});
  std::vector<int64_t> lens{1, 1};
  Tensor<double> pos = rel_pos_table<double>(1, d);
  Ctx<double> ctx{nullptr, false, nullptr};

  Var<double> y = mhsa.forward(ctx, Var<double>(x), lens, &pos);

  // With one frame the attention weight is exactly 1, so the module is
  // out(value(norm(x))) regardless of queries, keys, or position terms.
  Var<double> expect = mhsa.lo.forward(
      ctx, mhsa.lv.forward(ctx, mhsa.norm.forward(ctx, Var<double>(x))));
  for (int64_t i = 0; i < y.value.numel(); ++i) {
    CHECK(y.value[i] == doctest::Approx(expect.value[i]).epsilon(1e-12));
  }
}

TEST_CASE("attention weights beyond the valid length are exactly zero") {
  LayerConfig cfg = tiny_config();
  cfg.attn_dim = 8;
  Rng rng(13);
  Mhsa<double> mhsa;
  mhsa.init("mhsa", rng, cfg);

  const int64_t t = 4;
  Tensor<double> x = rand_tensor(rng, {1, t, cfg.attn_dim});
  std::vector<int64_t> lens{2};
  Tensor<double> pos = rel_pos_table<double>(t, cfg.attn_dim);
  Ctx<double> ctx{nullptr, false, nullptr};

  Tensor<double> attn;
  mhsa.forward(ctx, Var<double>(x), lens, &pos, &attn);
  REQUIRE(attn.dim(0) == cfg.heads);
  REQUIRE(attn.dim(1) == t);
  REQUIRE(attn.dim(2) == t);
  for (int64_t h = 0; h < cfg.heads; ++h) {
    for (int64_t i = 0; i < t; ++i) {
      double row_sum = 0.0;
      for (int64_t j = 0; j < t; ++j) {
        if (j >= lens[0]) CHECK(attn.at(h, i, j) == 0.0);
        row_sum += attn.at(h, i, j);
      }
      CHECK(std::abs(row_sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("padding beyond the valid length never changes valid outputs") {
  for (const bool rel : {true, false}) {
    CAPTURE(rel);
    LayerConfig cfg;
    cfg.attn_dim = 8;
    cfg.heads = 2;
    cfg.ffn_dim = 16;
    cfg.conv_kernel = 5;
    cfg.rel_pos = rel;
    Rng rng(17);
    ConformerBlock<double> block;
    block.init("block", rng, cfg);

    const int64_t bsz = 2, t = 6, pad_t = 11, d = cfg.attn_dim;
    std::vector<int64_t> lens{6, 4};
    Rng data_rng(23);
    Tensor<double> x = rand_tensor(data_rng, {bsz, t, d});
    Tensor<double> xp = Tensor<double>::full({bsz, pad_t, d}, 7.5);
    for (int64_t b = 0; b < bsz; ++b) {
      for (int64_t i = 0; i < t; ++i) {
        for (int64_t c = 0; c < d; ++c) xp.at(b, i, c) = x.at(b, i, c);
      }
    }

    Ctx<double> ctx{nullptr, false, nullptr};
    Tensor<double> pos = rel_pos_table<double>(t, d);
    Tensor<double> pos_p = rel_pos_table<double>(pad_t, d);
    Var<double> y = block.forward(ctx, Var<double>(x), lens, &pos);
    Var<double> yp = block.forward(ctx, Var<double>(xp), lens, &pos_p);

    for (int64_t b = 0; b < bsz; ++b) {
      for (int64_t i = 0; i < lens[static_cast<size_t>(b)]; ++i) {
        for (int64_t c = 0; c < d; ++c) {
          CHECK(std::abs(y.value.at(b, i, c) - yp.value.at(b, i, c)) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("ffn gradients match finite differences") {
  LayerConfig cfg = tiny_config();
  Rng rng(29);
  Ffn<double> ffn;
  ffn.init("ffn", rng, cfg);
  Parameter<double> x{"x", rand_tensor(rng, {2, 3, cfg.attn_dim})};
  Tensor<double> w = rand_tensor(rng, {2, 3, cfg.attn_dim});

  std::vector<Parameter<double>*> params{&x};
  ffn.collect(params);
  gradcheck(params, [&](Ctx<double>& c) {
    return weighted_sum(c, ffn.forward(c, pv(c, x)), w);
  });
}

TEST_CASE("attention gradients match finite differences") {
  LayerConfig cfg = tiny_config();
  const int64_t t = 3;
  std::vector<int64_t> lens{3, 2};
  Tensor<double> pos = rel_pos_table<double>(t, cfg.attn_dim);

  for (const bool rel : {true, false}) {
    CAPTURE(rel);
    cfg.rel_pos = rel;
    Rng rng(31);
    Mhsa<double> mhsa;
    mhsa.init("mhsa", rng, cfg);
    Parameter<double> x{"x", rand_tensor(rng, {2, t, cfg.attn_dim})};
    Tensor<double> w = rand_tensor(rng, {2, t, cfg.attn_dim});

    std::vector<Parameter<double>*> params{&x};
    mhsa.collect(params);
    gradcheck(params, [&](Ctx<double>& c) {
      return weighted_sum(c, mhsa.forward(c, pv(c, x), lens, &pos), w);
    });
  }
}

TEST_CASE("conv module gradients match finite differences") {
  LayerConfig cfg = tiny_config();
  Rng rng(37);
  ConvModule<double> conv;
  conv.init("conv", rng, cfg);
  std::vector<int64_t> lens{4, 3};
  Parameter<double> x{"x", rand_tensor(rng, {2, 4, cfg.attn_dim})};
  Tensor<double> w = rand_tensor(rng, {2, 4, cfg.attn_dim});

  std::vector<Parameter<double>*> params{&x};
  conv.collect(params);
  gradcheck(params, [&](Ctx<double>& c) {
    return weighted_sum(c, conv.forward(c, pv(c, x), lens), w);
  });
}

TEST_CASE("whole-block gradients match finite differences") {
  LayerConfig cfg = tiny_config();
  Rng rng(41);
  ConformerBlock<double> block;
  block.init("block", rng, cfg);
  const int64_t t = 3;
  std::vector<int64_t> lens{3, 2};
  Tensor<double> pos = rel_pos_table<double>(t, cfg.attn_dim);
  Parameter<double> x{"x", rand_tensor(rng, {2, t, cfg.attn_dim})};
  Tensor<double> w = rand_tensor(rng, {2, t, cfg.attn_dim});

  std::vector<Parameter<double>*> params{&x};
  block.collect(params);
  gradcheck(params, [&](Ctx<double>& c) {
    return weighted_sum(c, block.forward(c, pv(c, x), lens, &pos), w);
  });
}

TEST_CASE("attention rejects a mismatched position table") {
  LayerConfig cfg = tiny_config();
  Rng rng(43);
  Mhsa<double> mhsa;
  mhsa.init("mhsa", rng, cfg);
  Tensor<double> x = rand_tensor(rng, {1, 3, cfg.attn_dim});
  std::vector<int64_t> lens{3};
  Tensor<double> wrong = rel_pos_table<double>(4, cfg.attn_dim);
  Ctx<double> ctx{nullptr, false, nullptr};
  CHECK_THROWS_AS(mhsa.forward(ctx, Var<double>(x), lens, &wrong), ShapeError);
  CHECK_THROWS_AS(mhsa.forward(ctx, Var<double>(x), lens, nullptr),
                  ShapeError);
}

TEST_CASE("training-mode dropout is seeded and scales kept activations") {
  LayerConfig cfg = tiny_config();
  cfg.dropout = 0.4;
  Rng rng(47);
  Ffn<double> ffn;
  ffn.init("ffn", rng, cfg);
  Tensor<double> x = rand_tensor(rng, {2, 3, cfg.attn_dim});

  Rng d1(99), d2(99);
  Ctx<double> c1{nullptr, true, &d1};
  Ctx<double> c2{nullptr, true, &d2};
  Var<double> y1 = ffn.forward(c1, Var<double>(x));
  Var<double> y2 = ffn.forward(c2, Var<double>(x));
  CHECK(std::memcmp(y1.value.data(), y2.value.data(),
                    sizeof(double) * y1.value.numel()) == 0);

  Rng d3(100);
  Ctx<double> c3{nullptr, true, &d3};
  Var<double> y3 = ffn.forward(c3, Var<double>(x));
  CHECK(std::memcmp(y1.value.data(), y3.value.data(),
                    sizeof(double) * y1.value.numel()) != 0);
}
