#include "uconv/checks.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "uconv/ctc.hpp"
#include "uconv/layers.hpp"
#include "uconv/model.hpp"
#include "uconv/oracle.hpp"
#include "uconv/ops.hpp"
#include "uconv/reduction.hpp"
#include "uconv/rng.hpp"
#include "uconv/tape.hpp"
#include "uconv/tensor.hpp"

namespace uconv::checks {
namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> x(std::move(shape));
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(lo, hi);
  return x;
}

// ---- params ----

CheckResult budget_check(const std::string& preset_name, double target) {
  model::Encoder<float> enc;
  enc.build(model::preset(preset_name));
  const auto count = static_cast<double>(enc.count_params());
  const double rel = std::abs(count - target) / target;
  CheckResult r;
  r.name = "params: " + preset_name;
  r.pass = rel <= 0.05;
  r.detail = std::to_string(enc.count_params()) + " vs target " +
             fmt(target) + " (" + fmt(100.0 * rel) + "% off)";
  return r;
}

// ---- grads ----

using LossFn = std::function<Var<double>(Ctx<double>&)>;

Var<double> pv(Ctx<double>& ctx, Parameter<double>& p) {
  return ctx.recording() ? watch(*ctx.tape, p) : Var<double>(p.value);
}

// Scalar loss: elementwise product with a fixed pseudo-random weighting so
// every output element contributes distinctly.
Var<double> weighted_sum(Ctx<double>& ctx, const Var<double>& y,
                         uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w = rand_tensor(rng, y.value.shape());
  return ops::sum_all(ctx, ops::mul(ctx, y, ops::constant(w)));
}

double max_rel_err(const std::vector<Parameter<double>*>& params,
                   const LossFn& loss, double h = 1e-5) {
  Tape<double> tape;
  Ctx<double> ctx{&tape, false, nullptr};
  Var<double> l = loss(ctx);
  tape.backward(l);

  Ctx<double> ev{nullptr, false, nullptr};
  double worst = 0.0;
  for (Parameter<double>* p : params) {
    if (!p->grad.defined()) return HUGE_VAL;
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double up = loss(ev).value[0];
      p->value[i] = saved - h;
      const double down = loss(ev).value[0];
      p->value[i] = saved;
      const double fd = (up - down) / (2 * h);
      const double rel =
          std::abs(p->grad[i] - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, rel);
    }
    p->zero_grad();
  }
  return worst;
}

CheckResult grad_result(const std::string& label, double worst) {
  CheckResult r;
  r.name = "grad: " + label;
  r.pass = worst < 1e-4;
  r.detail = "max relative error " + fmt(worst);
  return r;
}

layers::LayerConfig small_layer() {
  layers::LayerConfig cfg;
  cfg.attn_dim = 6;
  cfg.heads = 2;
  cfg.ffn_dim = 8;
  cfg.conv_kernel = 3;
  cfg.dropout = 0.0;
  return cfg;
}

// ---- lengths ----

CheckResult table_check(const std::string& levels,
                        const std::vector<int64_t>& expect) {
  std::string ones;
  for (size_t i = 0; i < expect.size(); ++i) ones += i ? "-1" : "1";
  const auto policy = reduction::parse_policy(levels, ones);
  const auto got = reduction::stage_lengths(policy, 2998);
  CheckResult r;
  r.name = "lengths: " + levels + " at 2998 frames";
  r.pass = got == expect;
  std::ostringstream os;
  for (size_t i = 0; i < got.size(); ++i) os << (i ? " " : "") << got[i];
  r.detail = "stage lengths " + os.str();
  return r;
}

}  // namespace

std::vector<CheckResult> run_params_suite() {
  std::vector<CheckResult> out;
  out.push_back(budget_check("conformer-s", 21.8e6));
  out.push_back(budget_check("conv-conformer-v1", 23.2e6));
  out.push_back(budget_check("conv-conformer-v2", 23.2e6));
  out.push_back(budget_check("uconv-d8-f4", 23.2e6));
  out.push_back(budget_check("uconv-d16-f4", 24.6e6));
  out.push_back(budget_check("uconv-d16-f8-v1", 24.6e6));
  out.push_back(budget_check("uconv-d16-f8-v2", 24.6e6));
  out.push_back(budget_check("uconv-d32-f8", 26.0e6));
  out.push_back(budget_check("conformer-l", 83.0e6));

  Rng rng(1);
  reduction::DownsampleX2<float> down;
  down.init("down", rng, 280);
  const auto count =
      static_cast<double>(layers::count_params<float>(down));
  CheckResult r;
  r.name = "params: downsampling x2 block";
  r.pass = std::abs(count - 1.4e6) <= 0.10 * 1.4e6;
  r.detail = fmt(count) + " vs target 1.4M (10% band)";
  out.push_back(r);
  return out;
}

std::vector<CheckResult> run_oracle_suite(uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed);
  Ctx<double> ctx{nullptr, false, nullptr};

  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const int64_t v = 2 + static_cast<int64_t>(rng.uniform_int(3));
    ctc::Labels target;
    const auto len = static_cast<int64_t>(rng.uniform_int(4));
    for (int64_t i = 0; i < len; ++i) {
      target.push_back(
          1 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(v - 1))));
    }
    const int64_t min_t = std::max<int64_t>(1, ctc::min_frames(target));
    const int64_t t =
        min_t + static_cast<int64_t>(rng.uniform_int(
                    static_cast<uint64_t>(8 - min_t + 1)));
    const Tensor<double> logits = rand_tensor(rng, Shape{t, v}, -2.0, 2.0);
    const double dp = ctc::ctc_loss(ctx, Var<double>(logits), target).value[0];
    const double brute = oracle::ctc_loss_by_enumeration(logits, target);
    worst = std::max(worst, std::abs(dp - brute));
  }
  CheckResult loss_r;
  loss_r.name = "oracle: ctc loss vs enumeration, 200 instances";
  loss_r.pass = worst < 1e-9;
  loss_r.detail = "max abs difference " + fmt(worst);
  out.push_back(loss_r);

  // Width 512 exceeds the number of prefixes that can be alive before the
  // last frame (364 for T<=6 over 3 symbols), making the search exhaustive.
  int mismatches = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const int64_t v = 2 + static_cast<int64_t>(rng.uniform_int(3));
    const int64_t t = 1 + static_cast<int64_t>(rng.uniform_int(6));
    const Tensor<double> logits = rand_tensor(rng, Shape{t, v}, -2.0, 2.0);
    const ctc::Labels best = oracle::best_labelling_by_enumeration(logits);
    if (ctc::beam_search(logits, 512)[0].labels != best) ++mismatches;
  }
  CheckResult beam_r;
  beam_r.name = "oracle: beam top-1 vs enumeration, 100 instances";
  beam_r.pass = mismatches == 0;
  beam_r.detail = std::to_string(mismatches) + " mismatches";
  out.push_back(beam_r);
  return out;
}

std::vector<CheckResult> run_grad_suite(uint64_t seed) {
  std::vector<CheckResult> out;
  const layers::LayerConfig cfg = small_layer();
  Rng init_rng(seed);
  Rng data_rng(seed + 1);
  const std::vector<int64_t> lens{4, 3};
  Parameter<double> x{"x", rand_tensor(data_rng, Shape{2, 4, cfg.attn_dim})};
  const Tensor<double> rel_table =
      layers::rel_pos_table<double>(4, cfg.attn_dim);

  auto collect_and_x = [&x](auto& module) {
    std::vector<Parameter<double>*> ps;
    module.collect(ps);
    ps.push_back(&x);
    return ps;
  };

  {
    layers::LinearP<double> lin;
    lin.init("lin", init_rng, cfg.attn_dim, 5);
    out.push_back(grad_result(
        "linear", max_rel_err(collect_and_x(lin), [&](Ctx<double>& c) {
          return weighted_sum(c, lin.forward(c, pv(c, x)), 11);
        })));
  }
  {
    layers::LayerNormP<double> norm;
    norm.init("norm", cfg.attn_dim);
    Rng nr(3);
    for (int64_t i = 0; i < norm.gain.value.numel(); ++i) {
      norm.gain.value[i] = nr.uniform(0.5, 1.5);
      norm.bias.value[i] = nr.uniform(-0.5, 0.5);
    }
    out.push_back(grad_result(
        "layer norm", max_rel_err(collect_and_x(norm), [&](Ctx<double>& c) {
          return weighted_sum(c, norm.forward(c, pv(c, x)), 12);
        })));
  }
  {
    layers::Ffn<double> ffn;
    ffn.init("ffn", init_rng, cfg);
    out.push_back(grad_result(
        "feed-forward", max_rel_err(collect_and_x(ffn), [&](Ctx<double>& c) {
          return weighted_sum(c, ffn.forward(c, pv(c, x)), 13);
        })));
  }
  {
    layers::Mhsa<double> attn;
    attn.init("attn", init_rng, cfg);
    out.push_back(grad_result(
        "attention, relative positions",
        max_rel_err(collect_and_x(attn), [&](Ctx<double>& c) {
          return weighted_sum(c, attn.forward(c, pv(c, x), lens, &rel_table),
                              14);
        })));
  }
  {
    layers::LayerConfig abs_cfg = cfg;
    abs_cfg.rel_pos = false;
    layers::Mhsa<double> attn;
    attn.init("attn", init_rng, abs_cfg);
    out.push_back(grad_result(
        "attention, absolute positions",
        max_rel_err(collect_and_x(attn), [&](Ctx<double>& c) {
          return weighted_sum(c, attn.forward(c, pv(c, x), lens, nullptr),
                              15);
        })));
  }
  {
    layers::ConvModule<double> conv;
    conv.init("conv", init_rng, cfg);
    out.push_back(grad_result(
        "convolution module",
        max_rel_err(collect_and_x(conv), [&](Ctx<double>& c) {
          return weighted_sum(c, conv.forward(c, pv(c, x), lens), 16);
        })));
  }
  {
    layers::ConformerBlock<double> block;
    block.init("block", init_rng, cfg);
    out.push_back(grad_result(
        "conformer block",
        max_rel_err(collect_and_x(block), [&](Ctx<double>& c) {
          return weighted_sum(c, block.forward(c, pv(c, x), lens, &rel_table),
                              17);
        })));
  }
  {
    reduction::FrontendX4<double> fe;
    fe.init("frontend", init_rng, cfg.attn_dim, 2);
    Parameter<double> feats{"feats", rand_tensor(data_rng, Shape{1, 9, 80})};
    std::vector<Parameter<double>*> ps;
    fe.collect(ps);
    ps.push_back(&feats);
    out.push_back(grad_result(
        "frontend x4", max_rel_err(ps, [&](Ctx<double>& c) {
          return weighted_sum(c, fe.forward(c, pv(c, feats), {9}), 18);
        })));
  }
  {
    reduction::DownsampleX2<double> down;
    down.init("down", init_rng, cfg.attn_dim, 10);
    out.push_back(grad_result(
        "downsampling x2",
        max_rel_err(collect_and_x(down), [&](Ctx<double>& c) {
          return weighted_sum(c, down.forward(c, pv(c, x), lens), 19);
        })));
  }
  {
    Parameter<double> logits{"logits",
                             rand_tensor(data_rng, Shape{5, 3}, -2.0, 2.0)};
    out.push_back(grad_result(
        "ctc loss", max_rel_err({&logits}, [&](Ctx<double>& c) {
          return ctc::ctc_loss(c, pv(c, logits), {1, 2, 1});
        })));
  }
  return out;
}

std::vector<CheckResult> run_lengths_suite(uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(table_check("x4", {750}));
  out.push_back(table_check("x4-x8", {750, 375}));
  out.push_back(table_check("x4-x8-x16-x8", {750, 375, 188, 375}));
  out.push_back(
      table_check("x4-x8-x16-x32-x16-x8", {750, 375, 188, 94, 188, 375}));

  const std::vector<std::string> levels = {"x4", "x4-x8", "x4-x8-x16-x8",
                                           "x4-x8-x16-x32-x16-x8"};
  Rng rng(seed);
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const int64_t t = 16 + static_cast<int64_t>(rng.uniform_int(6000 - 16 + 1));
    for (const std::string& lv : levels) {
      std::string ones;
      const auto stages =
          static_cast<size_t>(std::count(lv.begin(), lv.end(), 'x'));
      for (size_t i = 0; i < stages; ++i) ones += i ? "-1" : "1";
      const auto policy = reduction::parse_policy(lv, ones);
      const int64_t fin = reduction::stage_lengths(policy, t).back();
      const double ideal = static_cast<double>(t) /
                           static_cast<double>(policy.final_reduction());
      worst = std::max(worst, std::abs(static_cast<double>(fin) - ideal));
    }
  }
  CheckResult r;
  r.name = "lengths: final vs T/F over 1000 random lengths";
  r.pass = worst <= 2.0;
  r.detail = "max deviation " + fmt(worst) + " frames";
  out.push_back(r);
  return out;
}

std::vector<CheckResult> run_feasibility_suite() {
  // Every target over the alphabet {1,2} up to length 5, so adjacent repeats
  // of every pattern occur, against every output length up to 10.
  std::vector<ctc::Labels> targets = {{}};
  for (size_t head = 0, len = 0; len < 5; ++len) {
    const size_t tail = targets.size();
    for (size_t i = head; i < tail; ++i) {
      for (int64_t sym = 1; sym <= 2; ++sym) {
        ctc::Labels y = targets[i];
        y.push_back(sym);
        targets.push_back(std::move(y));
      }
    }
    head = tail;
  }

  int64_t cases = 0;
  int64_t wrong = 0;
  for (const ctc::Labels& y : targets) {
    int64_t repeats = 0;
    for (size_t i = 1; i < y.size(); ++i) {
      if (y[i] == y[i - 1]) ++repeats;
    }
    if (ctc::min_frames(y) != static_cast<int64_t>(y.size()) + repeats) {
      ++wrong;
    }
    for (int64_t t = 0; t <= 10; ++t) {
      ++cases;
      if (ctc::feasible(t, y) != oracle::labelling_reachable(t, y, 3)) {
        ++wrong;
      }
    }
  }
  CheckResult r;
  r.name = "feasibility: rule vs path enumeration";
  r.pass = wrong == 0;
  r.detail = std::to_string(cases) + " (target, length) cases over " +
             std::to_string(targets.size()) + " targets, " +
             std::to_string(wrong) + " disagreements";
  return {r};
}

std::vector<CheckResult> run_all(uint64_t seed) {
  std::vector<CheckResult> out = run_params_suite();
  for (auto& r : run_oracle_suite(seed)) out.push_back(std::move(r));
  for (auto& r : run_grad_suite(seed)) out.push_back(std::move(r));
  for (auto& r : run_lengths_suite(seed)) out.push_back(std::move(r));
  for (auto& r : run_feasibility_suite()) out.push_back(std::move(r));
  return out;
}

int print_results(const std::vector<CheckResult>& results, std::ostream& os) {
  int failures = 0;
  for (const CheckResult& r : results) {
    os << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << ": " << r.detail
       << "\n";
    if (!r.pass) ++failures;
  }
  os << results.size() << " checks, " << failures << " failed\n";
  return failures;
}

}  // namespace uconv::checks
