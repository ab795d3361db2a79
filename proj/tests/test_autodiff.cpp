#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <functional>
#include <vector>

#include "doctest.h"
#include "uconv/ops.hpp"
#include "uconv/rng.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

using namespace uconv;

namespace {

Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Uniform but bounded away from zero, for kinked activations.
Tensor<double> rand_nonzero(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double v = rng.uniform(0.3, 1.0);
    t[i] = rng.bernoulli(0.5) ? v : -v;
  }
  return t;
}

// Var view of a parameter: a tape leaf when recording, a plain value
// otherwise. Lets the same closure serve the analytic and perturbed passes.
Var<double> pv(Ctx<double>& ctx, Parameter<double>& p) {
  return ctx.recording() ? watch(*ctx.tape, p) : Var<double>(p.value);
}

using LossFn = std::function<Var<double>(Ctx<double>&)>;

// Central-difference check of every element of every parameter's gradient.
void gradcheck(std::vector<Parameter<double>*> params, const LossFn& loss,
               double tol = 1e-6, double h = 1e-5) {
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

// loss = sum(op_output * fixed_random_weights), exercising every output.
Var<double> weighted_sum(Ctx<double>& ctx, const Var<double>& y,
                         const Tensor<double>& w) {
  return ops::sum_all(ctx, ops::mul(ctx, y, ops::constant(w)));
}

}  // namespace

TEST_CASE("a null tape records nothing and tracked state propagates") {
  Rng rng(1);
  Parameter<double> p{"p", rand_tensor(rng, {2, 3})};
  Ctx<double> off{nullptr, false, nullptr};
  Var<double> x(p.value);
  Var<double> y = ops::relu(off, ops::scale(off, x, 2.0));
  CHECK_FALSE(y.tracked());

  Tape<double> tape;
  Ctx<double> on{&tape, false, nullptr};
  Var<double> z = ops::relu(on, ops::scale(on, x, 2.0));
  CHECK_FALSE(z.tracked());  // untracked inputs stay off the tape
  CHECK(tape.size() == 0);

  Var<double> w = ops::relu(on, ops::scale(on, pv(on, p), 2.0));
  CHECK(w.tracked());
  CHECK(tape.size() == 3);
}

TEST_CASE("backward misuse raises typed errors") {
  Rng rng(2);
  Parameter<double> p{"p", rand_tensor(rng, {3})};
  Tape<double> tape;
  Ctx<double> ctx{&tape, false, nullptr};

  Var<double> untracked(rand_tensor(rng, {1}));
  CHECK_THROWS_AS(tape.backward(untracked), StateError);

  Var<double> vec = pv(ctx, p);
  CHECK_THROWS_AS(tape.backward(vec), ShapeError);

  Var<double> l = ops::sum_all(ctx, vec);
  tape.backward(l);
  CHECK_THROWS_AS(tape.backward(l), StateError);

  tape.reset();
  CHECK(tape.size() == 0);
}

TEST_CASE("parameter gradients accumulate across tapes until zeroed") {
  Rng rng(3);
  Parameter<double> p{"p", rand_tensor(rng, {4})};
  for (int round = 0; round < 2; ++round) {
    Tape<double> tape;
    Ctx<double> ctx{&tape, false, nullptr};
    tape.backward(ops::sum_all(ctx, pv(ctx, p)));
  }
  for (int64_t i = 0; i < 4; ++i) CHECK(p.grad[i] == doctest::Approx(2.0));
  p.zero_grad();
  for (int64_t i = 0; i < 4; ++i) CHECK(p.grad[i] == 0.0);
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(4);
  Parameter<double> a{"a", rand_nonzero(rng, {2, 5})};
  Parameter<double> b{"b", rand_tensor(rng, {2, 5})};
  const auto r = rand_tensor(rng, {2, 5});
  const auto r1 = rand_tensor(rng, {1});

  gradcheck({&a, &b}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::add(c, pv(c, a), pv(c, b)), r);
  });
  gradcheck({&a, &b}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::add_scaled(c, pv(c, a), pv(c, b), 0.5), r);
  });
  gradcheck({&a}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::scale(c, pv(c, a), -1.7), r);
  });
  gradcheck({&a, &b}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::mul(c, pv(c, a), pv(c, b)), r);
  });
  gradcheck({&a}, [&](Ctx<double>& c) {
    return ops::mul(c, ops::sum_all(c, pv(c, a)), ops::constant(r1));
  });
  gradcheck({&a}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::relu(c, pv(c, a)), r);
  });
  gradcheck({&a}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::swish(c, pv(c, a)), r);
  });

  Parameter<double> g{"g", rand_tensor(rng, {3, 4, 6})};
  const auto rg = rand_tensor(rng, {3, 4, 3});
  gradcheck({&g}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::glu_lastaxis(c, pv(c, g)), rg);
  });
}

TEST_CASE("linear and matmul gradients match finite differences") {
  Rng rng(5);
  Parameter<double> x{"x", rand_tensor(rng, {2, 3, 4})};
  Parameter<double> w{"w", rand_tensor(rng, {4, 5})};
  Parameter<double> b{"b", rand_tensor(rng, {5})};
  const auto r = rand_tensor(rng, {2, 3, 5});
  gradcheck({&x, &w, &b}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::linear(c, pv(c, x), pv(c, w), pv(c, b)), r);
  });
  gradcheck({&x, &w}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::linear(c, pv(c, x), pv(c, w), Var<double>()),
                        r);
  });

  Parameter<double> ma{"ma", rand_tensor(rng, {3, 4})};
  Parameter<double> mb{"mb", rand_tensor(rng, {4, 2})};
  const auto rm = rand_tensor(rng, {3, 2});
  gradcheck({&ma, &mb}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::matmul(c, pv(c, ma), pv(c, mb)), rm);
  });
}

TEST_CASE("convolution op gradients match finite differences") {
  Rng rng(6);
  {
    Parameter<double> x{"x", rand_tensor(rng, {2, 7, 3})};
    Parameter<double> w{"w", rand_tensor(rng, {3, 3, 4})};
    Parameter<double> b{"b", rand_tensor(rng, {4})};
    const auto r = rand_tensor(rng, {2, 4, 4});
    gradcheck({&x, &w, &b}, [&](Ctx<double>& c) {
      return weighted_sum(
          c, ops::conv1d(c, pv(c, x), pv(c, w), pv(c, b), 2, 1), r);
    });
  }
  {
    Parameter<double> x{"x", rand_tensor(rng, {1, 6, 5, 2})};
    Parameter<double> w{"w", rand_tensor(rng, {3, 3, 2, 3})};
    Parameter<double> b{"b", rand_tensor(rng, {3})};
    const auto r = rand_tensor(rng, {1, 3, 3, 3});
    gradcheck({&x, &w, &b}, [&](Ctx<double>& c) {
      return weighted_sum(
          c, ops::conv2d(c, pv(c, x), pv(c, w), pv(c, b), 2, 1), r);
    });
  }
  {
    Parameter<double> x{"x", rand_tensor(rng, {2, 8, 4})};
    Parameter<double> w{"w", rand_tensor(rng, {5, 4})};
    Parameter<double> b{"b", rand_tensor(rng, {4})};
    const auto r = rand_tensor(rng, {2, 8, 4});
    gradcheck({&x, &w, &b}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::dwconv1d(c, pv(c, x), pv(c, w), pv(c, b)),
                          r);
    });
  }
}

TEST_CASE("layer_norm and softmax gradients match finite differences") {
  Rng rng(7);
  Parameter<double> x{"x", rand_tensor(rng, {3, 4, 6}, -2.0, 2.0)};
  Parameter<double> gain{"gain", rand_tensor(rng, {6}, 0.5, 1.5)};
  Parameter<double> bias{"bias", rand_tensor(rng, {6})};
  const auto r = rand_tensor(rng, {3, 4, 6});
  gradcheck({&x, &gain, &bias}, [&](Ctx<double>& c) {
    return weighted_sum(
        c, ops::layer_norm(c, pv(c, x), pv(c, gain), pv(c, bias)), r);
  });
  gradcheck({&x}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::softmax_lastaxis(c, pv(c, x)), r);
  });
}

TEST_CASE("masking op gradients match finite differences") {
  Rng rng(8);
  const std::vector<int64_t> lens{3, 5};
  Parameter<double> x{"x", rand_tensor(rng, {2, 5, 3})};
  const auto r = rand_tensor(rng, {2, 5, 3});
  gradcheck({&x}, [&](Ctx<double>& c) {
    return weighted_sum(c, ops::mask_frames(c, pv(c, x), lens), r);
  });

  // 2 batch entries x 2 heads of 4x5 scores; softmax makes the mask bite.
  Parameter<double> s{"s", rand_tensor(rng, {4, 4, 5})};
  const auto rs = rand_tensor(rng, {4, 4, 5});
  gradcheck({&s}, [&](Ctx<double>& c) {
    Var<double> masked = ops::mask_attn_scores(c, pv(c, s), lens, 2);
    return weighted_sum(c, ops::softmax_lastaxis(c, masked), rs);
  });
}

TEST_CASE("masked attention columns get exactly zero weight and gradient") {
  Rng rng(9);
  Parameter<double> s{"s", rand_tensor(rng, {2, 3, 4})};
  const std::vector<int64_t> lens{2};  // one batch entry, two heads
  Tape<double> tape;
  Ctx<double> ctx{&tape, false, nullptr};
  Var<double> w =
      ops::softmax_lastaxis(ctx, ops::mask_attn_scores(ctx, pv(ctx, s), lens, 2));
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t q = 0; q < 3; ++q) {
      CHECK(w.value.at(n, q, 2) == 0.0);
      CHECK(w.value.at(n, q, 3) == 0.0);
      CHECK(w.value.at(n, q, 0) + w.value.at(n, q, 1) ==
            doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  tape.backward(ops::sum_all(ctx, w));
  for (int64_t n = 0; n < 2; ++n) {
    for (int64_t q = 0; q < 3; ++q) {
      CHECK(s.grad.at(n, q, 2) == 0.0);
      CHECK(s.grad.at(n, q, 3) == 0.0);
    }
  }
}

TEST_CASE("attention plumbing op gradients match finite differences") {
  Rng rng(10);
  {
    Parameter<double> x{"x", rand_tensor(rng, {2, 3, 6})};
    const auto r = rand_tensor(rng, {4, 3, 3});
    gradcheck({&x}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::split_heads(c, pv(c, x), 2), r);
    });
    const auto rm = rand_tensor(rng, {2, 3, 6});
    gradcheck({&x}, [&](Ctx<double>& c) {
      Var<double> h = ops::split_heads(c, pv(c, x), 2);
      return weighted_sum(c, ops::merge_heads(c, h, 2), rm);
    });
  }
  {
    Parameter<double> x{"x", rand_tensor(rng, {4, 3, 5})};
    Parameter<double> u{"u", rand_tensor(rng, {2, 5})};
    const auto r = rand_tensor(rng, {4, 3, 5});
    gradcheck({&x, &u}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::add_head_bias(c, pv(c, x), pv(c, u)), r);
    });
  }
  {
    Parameter<double> a{"a", rand_tensor(rng, {4, 2, 3})};
    Parameter<double> b{"b", rand_tensor(rng, {2, 3, 5})};
    const auto r = rand_tensor(rng, {4, 2, 5});
    gradcheck({&a, &b}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::bmm(c, pv(c, a), pv(c, b)), r);
    });
  }
  {
    Parameter<double> a{"a", rand_tensor(rng, {4, 2, 5})};
    Parameter<double> b{"b", rand_tensor(rng, {2, 3, 5})};
    const auto r = rand_tensor(rng, {4, 2, 3});
    gradcheck({&a, &b}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::bmm_nt(c, pv(c, a), pv(c, b)), r);
    });
  }
  {
    Parameter<double> x{"x", rand_tensor(rng, {2, 4, 7})};
    const auto r = rand_tensor(rng, {2, 4, 4});
    gradcheck({&x}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::rel_shift(c, pv(c, x)), r);
    });
  }
}

TEST_CASE("rel_shift pairs query i and key j through offset T-1-i+j") {
  // x[n,i,l] = 100*i + l makes the gather pattern directly readable.
  Tensor<double> x(Shape{1, 3, 5});
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t l = 0; l < 5; ++l) x.at(0, i, l) = 100.0 * i + l;
  }
  Ctx<double> ctx{nullptr, false, nullptr};
  Var<double> y = ops::rel_shift(ctx, Var<double>(x));
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 3; ++j) {
      CHECK(y.value.at(0, i, j) == 100.0 * i + (2 - i + j));
    }
  }
}

TEST_CASE("time restructuring op gradients match finite differences") {
  Rng rng(11);
  Parameter<double> x{"x", rand_tensor(rng, {2, 5, 3})};
  {
    const auto r = rand_tensor(rng, {2, 10, 3});
    gradcheck({&x}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::upsample2(c, pv(c, x)), r);
    });
  }
  {
    const auto r = rand_tensor(rng, {2, 4, 3});
    gradcheck({&x}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::truncate_time(c, pv(c, x), 4), r);
    });
  }
  {
    const auto r = rand_tensor(rng, {2, 3, 3});
    gradcheck({&x}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::decimate2(c, pv(c, x)), r);
    });
  }
  {
    const auto r = rand_tensor(rng, {4, 3});
    gradcheck({&x}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::slice_sequence(c, pv(c, x), 1, 4), r);
    });
  }
  {
    const auto r = rand_tensor(rng, {5, 6});
    gradcheck({&x}, [&](Ctx<double>& c) {
      return weighted_sum(c, ops::reshape(c, pv(c, x), {5, 6}), r);
    });
  }
}

TEST_CASE("upsample2 then truncate_time inverts ceil-halving lengths") {
  Rng rng(12);
  for (int64_t t : {1, 2, 5, 8, 11}) {
    auto x = rand_tensor(rng, {1, t, 2});
    Ctx<double> ctx{nullptr, false, nullptr};
    Var<double> down = ops::decimate2(ctx, Var<double>(x));
    CHECK(down.value.dim(1) == (t + 1) / 2);
    Var<double> up = ops::upsample2(ctx, down);
    CHECK(up.value.dim(1) >= t);
    CHECK(up.value.dim(1) <= t + 1);
    Var<double> back = ops::truncate_time(ctx, up, t);
    CHECK(back.value.dim(1) == t);
  }
}

TEST_CASE("dropout scales kept elements and drops the rest consistently") {
  Rng rng(13);
  Parameter<double> x{"x", rand_tensor(rng, {500}, 0.5, 1.5)};
  Tape<double> tape;
  Rng drop_rng(99);
  Ctx<double> ctx{&tape, true, &drop_rng};
  Var<double> y = ops::dropout(ctx, pv(ctx, x), 0.25);
  tape.backward(ops::sum_all(ctx, y));

  int64_t kept = 0;
  for (int64_t i = 0; i < 500; ++i) {
    const double ratio = y.value[i] / x.value[i];
    if (ratio != 0.0) {
      CHECK(ratio == doctest::Approx(1.0 / 0.75));
      CHECK(x.grad[i] == doctest::Approx(1.0 / 0.75));
      ++kept;
    } else {
      CHECK(x.grad[i] == 0.0);
    }
  }
  CHECK(kept > 300);
  CHECK(kept < 450);

  // Same seed, same mask.
  Rng drop_rng2(99);
  Ctx<double> ctx2{nullptr, true, &drop_rng2};
  Var<double> y2 = ops::dropout(ctx2, Var<double>(x.value), 0.25);
  for (int64_t i = 0; i < 500; ++i) CHECK(y2.value[i] == y.value[i]);

  // Eval mode is the identity and records nothing.
  Tape<double> tape3;
  Ctx<double> ctx3{&tape3, false, nullptr};
  Var<double> xin = pv(ctx3, x);
  Var<double> y3 = ops::dropout(ctx3, xin, 0.25);
  CHECK(y3.node == xin.node);
  CHECK(y3.value.data() == x.value.data());
}

TEST_CASE("shape errors carry both shapes in the message") {
  Rng rng(14);
  Ctx<double> ctx{nullptr, false, nullptr};
  Var<double> a(rand_tensor(rng, {2, 3}));
  Var<double> b(rand_tensor(rng, {3, 2}));
  CHECK_THROWS_WITH_AS(ops::add(ctx, a, b),
                       doctest::Contains("[2,3]"), ShapeError);
  CHECK_THROWS_AS(ops::matmul(ctx, a, a), ShapeError);
  CHECK_THROWS_AS(ops::glu_lastaxis(ctx, a), ShapeError);
  CHECK_THROWS_AS(ops::rel_shift(ctx, Var<double>(rand_tensor(rng, {1, 3, 4}))),
                  ShapeError);
}
