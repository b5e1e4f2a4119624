#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "affectnet/grad_check.hpp"
#include "affectnet/objectives.hpp"

namespace {

using namespace affectnet;

std::vector<double> uniform(std::size_t n, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::vector<float> as_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

// Direct two-pass CCC in long double.
double ccc_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  long double sxy = 0, sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sx += (x[i] - mx) * (x[i] - mx);
    sy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(2 * sxy / n / (sx / n + sy / n + (mx - my) * (mx - my)));
}

// ---------------------------------------------------------------------------
// Expression loss

TEST(ExprLoss, UniformLogitsGiveLn7) {
  for (std::size_t cls = 0; cls < 7; ++cls) {
    const std::vector<std::size_t> t{cls};
    EXPECT_NEAR(expr_loss(Tensor64::zeros({1, 7}), t, Mask{1}).value.item(), std::log(7.0), 1e-12);
  }
}

TEST(ExprLoss, ConfidentCorrectIsNearZero) {
  std::vector<double> v(7, -40.0);
  v[3] = 40.0;
  const std::vector<std::size_t> t{3};
  EXPECT_LT(expr_loss(Tensor64({1, 7}, v), t, Mask{1}).value.item(), 1e-30);
}

TEST(ExprLoss, MatchesExtendedPrecisionNll) {
  const auto logits = uniform(28, 1, -4, 4);
  const std::vector<std::size_t> t{0, 6, 2, 4};
  long double total = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    long double s = 0;
    for (std::size_t k = 0; k < 7; ++k) s += std::exp(static_cast<long double>(logits[i * 7 + k]));
    total += std::log(s) - logits[i * 7 + t[i]];
  }
  const float got = expr_loss(Tensor({4, 7}, as_float(logits)), t, Mask{1, 1, 1, 1}).value.item();
  // Inputs are rounded to float first; compare against the rounded logits' loss.
  long double total_f = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    long double s = 0;
    for (std::size_t k = 0; k < 7; ++k) s += std::exp(static_cast<long double>(static_cast<float>(logits[i * 7 + k])));
    total_f += std::log(s) - static_cast<float>(logits[i * 7 + t[i]]);
  }
  EXPECT_NEAR(got, static_cast<double>(total_f / 4), 1e-5);
  EXPECT_NEAR(got, static_cast<double>(total / 4), 1e-5);
}

TEST(ExprLoss, NonNegativeAndMasked) {
  const auto logits = uniform(21, 2, -5, 5);
  const std::vector<std::size_t> t{1, 5, 0};
  const auto full = expr_loss(Tensor64({3, 7}, logits), t, Mask{1, 1, 1});
  EXPECT_GE(full.value.item(), 0.0);
  EXPECT_EQ(full.count, 3u);
  const auto none = expr_loss(Tensor64({3, 7}, logits), t, Mask{0, 0, 0});
  EXPECT_FALSE(none.present());
  EXPECT_EQ(none.value.item(), 0.0);
}

TEST(ExprLoss, TargetOutOfRangeRejected) {
  const std::vector<std::size_t> t{7};
  EXPECT_THROW((void)expr_loss(Tensor64::zeros({1, 7}), t, Mask{1}), ValidationError);
}

// ---------------------------------------------------------------------------
// AU loss

TEST(AuLoss, ZeroLogitsGiveEightLn2) {
  const std::vector<std::uint8_t> y{1, 0, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_NEAR(au_loss(Tensor64::zeros({2, 8}), y, Mask{1, 1}).value.item(), 8 * std::log(2.0), 1e-12);
}

TEST(AuLoss, ConfidentCorrectAndConfidentWrong) {
  const std::vector<std::uint8_t> y{1, 0, 1, 0, 1, 1, 0, 0};
  std::vector<double> right(8), wrong(8);
  for (std::size_t k = 0; k < 8; ++k) {
    right[k] = y[k] ? 40 : -40;
    wrong[k] = -right[k];
  }
  EXPECT_LT(au_loss(Tensor64({1, 8}, right), y, Mask{1}).value.item(), 1e-15);
  const double w = au_loss(Tensor64({1, 8}, wrong), y, Mask{1}).value.item();
  EXPECT_TRUE(std::isfinite(w));
  EXPECT_NEAR(w, 8 * (40 + std::log1p(std::exp(-40.0))), 1e-9);
  const float wf = au_loss(Tensor({1, 8}, as_float(wrong)), y, Mask{1}).value.item();
  EXPECT_NEAR(wf, 320.0f, 1e-3);
}

TEST(AuLoss, MonotoneAwayFromTarget) {
  const std::vector<std::uint8_t> y{1, 0, 1, 0, 1, 1, 0, 0};
  auto x = uniform(8, 3, -2, 2);
  double prev = au_loss(Tensor64({1, 8}, x), y, Mask{1}).value.item();
  for (int step = 0; step < 10; ++step) {
    x[0] -= 0.5;  // target 1: moving down is moving away
    const double cur = au_loss(Tensor64({1, 8}, x), y, Mask{1}).value.item();
    EXPECT_GE(cur, prev);
    prev = cur;
  }
}

TEST(AuLoss, NonBinaryRejected) {
  const std::vector<std::uint8_t> y{2, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_THROW((void)au_loss(Tensor64::zeros({1, 8}), y, Mask{1}), ValidationError);
}

// ---------------------------------------------------------------------------
// CCC

TEST(Ccc, HandCases) {
  const std::vector<double> a{1, 2, 3}, b{3, 2, 1}, c{5, 5, 5};
  EXPECT_EQ(ccc(a, a), 1.0);
  EXPECT_EQ(ccc(a, b), -1.0);
  EXPECT_EQ(ccc(c, a), 0.0);
}

TEST(Ccc, DegeneratePolicy) {
  const std::vector<double> c{0.5, 0.5, 0.5}, d{0.2, 0.2, 0.2};
  EXPECT_EQ(ccc(c, c), 1.0);
  EXPECT_EQ(ccc(c, d), 1.0 - 1.0);  // different constants: denominator 0.09 is not degenerate
  const std::vector<double> e{0.5, 0.5, 0.5}, f{0.5, 0.5, 0.5 + 1e-9};
  EXPECT_EQ(ccc(e, f), 1.0);
}

TEST(Ccc, RejectsShortOrMismatched) {
  const std::vector<double> one{1}, two{1, 2}, three{1, 2, 3};
  EXPECT_THROW((void)ccc(one, one), ValidationError);
  EXPECT_THROW((void)ccc(two, three), ValidationError);
}

TEST(Ccc, MatchesOracleOnRandomSeries) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto x = uniform(100, 1000 + s), y = uniform(100, 5000 + s, -0.5, 1.5);
    EXPECT_NEAR(ccc(x, y), ccc_oracle(x, y), 1e-12);
  }
}

TEST(Ccc, SymmetryRangeAffineInvariance) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto x = uniform(50, 100 + s), y = uniform(50, 200 + s);
    const double r = ccc(x, y);
    EXPECT_DOUBLE_EQ(r, ccc(y, x));
    EXPECT_GE(r, -1.0);
    EXPECT_LE(r, 1.0);
    EXPECT_NEAR(ccc(x, x), 1.0, 1e-15);
    std::vector<double> ax(50), ay(50);
    for (std::size_t i = 0; i < 50; ++i) {
      ax[i] = 2.5 * x[i] + 0.3;
      ay[i] = 2.5 * y[i] + 0.3;
    }
    EXPECT_NEAR(ccc(ax, ay), r, 1e-12);
  }
}

TEST(Ccc, PermutationNull) {
  const auto x = uniform(10000, 7);
  auto y = x;
  std::mt19937_64 rng(8);
  std::shuffle(y.begin(), y.end(), rng);
  EXPECT_LT(std::abs(ccc(x, y)), 0.05);
}

TEST(Ccc, FullSetDiffersFromMeanOfBatches) {
  const std::vector<double> x{0, 1, 10, 11}, y{1, 0, 11, 10};
  const double full = ccc(x, y);
  const double batched = 0.5 * (ccc(std::vector<double>{0, 1}, std::vector<double>{1, 0}) +
                                ccc(std::vector<double>{10, 11}, std::vector<double>{11, 10}));
  EXPECT_NEAR(batched, -1.0, 1e-15);
  EXPECT_GT(full, 0.9);
  EXPECT_NEAR(metric_ccc(x, y, x, x).valence, full, 0.0);
}

TEST(Ccc, PerGroupMean) {
  const std::vector<double> x{0, 1, 10, 11}, y{1, 0, 10, 11};
  const std::vector<std::string> g{"a", "a", "b", "b"};
  EXPECT_NEAR(ccc_per_group(x, y, g), 0.0, 1e-15);
}

// ---------------------------------------------------------------------------
// VA loss

TEST(VaLoss, PerfectPredictionIsZero) {
  const auto t = as_float(uniform(10, 9));
  const auto l = va_loss(Tensor({5, 2}, t), t, Mask(5, 1));
  EXPECT_NEAR(l.value.item(), 0.0, 1e-6);
}

TEST(VaLoss, AntiConcordantValence) {
  const std::vector<float> pred{1, 1, 2, 2, 3, 3}, target{3, 1, 2, 2, 1, 3};
  EXPECT_NEAR(va_loss(Tensor({3, 2}, pred), target, Mask(3, 1)).value.item(), 1.0, 1e-6);
}

TEST(VaLoss, ConstantPredictionIsOne) {
  const std::vector<float> pred(6, 0.2f), target{0.1f, -0.5f, 0.7f, 0.2f, -0.3f, 0.9f};
  EXPECT_NEAR(va_loss(Tensor({3, 2}, pred), target, Mask(3, 1)).value.item(), 1.0, 1e-6);
}

TEST(VaLoss, FewerThanTwoSamplesIsDegenerate) {
  bool degenerate = false;
  const std::vector<float> t{0.1f, 0.2f, 0.3f, 0.4f};
  const auto l = va_loss(Tensor({2, 2}, t), t, Mask{1, 0}, &degenerate);
  EXPECT_TRUE(degenerate);
  EXPECT_FALSE(l.present());
  EXPECT_EQ(l.value.item(), 0.0f);
}

TEST(VaLoss, GradCheck64) {
  const auto target = as_float(uniform(16, 10));
  const Mask m{1, 1, 0, 1, 1, 1, 0, 1};
  const auto r = grad_check([&](const Tensor64& p) { return va_loss(p, target, m).value; },
                            Tensor64({8, 2}, uniform(16, 11, -0.8, 0.8)), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-7);
}

// ---------------------------------------------------------------------------
// Combined losses

TaskLosses<double> fixed_losses(double va, double au, double expr) {
  TaskLosses<double> l;
  l.va = {Tensor64::scalar(va), 4};
  l.au = {Tensor64::scalar(au), 4};
  l.expr = {Tensor64::scalar(expr), 4};
  return l;
}

TEST(TotalSum, Examples) {
  EXPECT_DOUBLE_EQ(total_sum_loss(fixed_losses(0.5, 1.0, 2.0)).item(), 3.5);
  auto l = fixed_losses(0.5, 1.0, 2.0);
  l.au = {Tensor64::scalar(0), 0};
  EXPECT_DOUBLE_EQ(total_sum_loss(l).item(), 2.5);
}

TEST(Weighted, UnitVariancesIdentity) {
  LossWeights<double> w;
  EXPECT_NEAR(weighted_loss(fixed_losses(0.7, 1.3, 2.1), w).item(), 0.5 * 0.7 + 1.3 + 2.1, 1e-7);
}

TEST(Weighted, PureRegularizer) {
  LossWeights<double> w;
  w.set(2, 2, 2);  // sigma = e
  EXPECT_NEAR(weighted_loss(fixed_losses(0, 0, 0), w).item(), 3.0, 1e-12);
}

TEST(Weighted, SumConsistencyIdentity) {
  LossWeights<double> w;
  w.set(-std::log(2.0), 0, 0);
  const auto l = fixed_losses(0.4, 1.1, 0.9);
  const double regularizer = 0.5 * (-std::log(2.0));
  EXPECT_NEAR(weighted_loss(l, w).item() - regularizer, total_sum_loss(l).item(), 1e-12);
}

TEST(Weighted, ExprStationaryPoint) {
  const double lexpr = 1.7;
  const auto l = fixed_losses(0.3, 0.8, lexpr);
  LossWeights<double> w;
  w.set(0.1, -0.3, 0.4);
  const auto r = grad_check(
      [&](const Tensor64& s) {
        LossWeights<double> ww;
        ww.set(0.1, -0.3, 0.0);
        ww.s_expr() = s;
        return weighted_loss(l, ww);
      },
      Tensor64::scalar(0.4), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_NEAR(r.analytic, -std::exp(-0.4) * lexpr + 0.5, 1e-12);
  const auto at_opt = grad_check(
      [&](const Tensor64& s) {
        LossWeights<double> ww;
        ww.s_expr() = s;
        return weighted_loss(l, ww);
      },
      Tensor64::scalar(std::log(2 * lexpr)), 1e-5);
  EXPECT_NEAR(at_opt.analytic, 0.0, 1e-12);
}

TEST(Weighted, AbsentTaskDropsWholeTerm) {
  auto l = fixed_losses(0.5, 1.0, 2.0);
  l.va = {Tensor64::scalar(0), 0};
  LossWeights<double> w;
  w.set(3.0, 0.5, -0.5);
  EXPECT_NEAR(weighted_loss(l, w).item(), std::exp(-0.5) * 1.0 + std::exp(0.5) * 2.0 + 0.5 * (0.5 - 0.5), 1e-12);
}

TEST(Masking, MaskedSampleContributesNoGradient) {
  BatchLabels full;
  full.resize(4);
  const auto tv = as_float(uniform(8, 12));
  std::copy(tv.begin(), tv.end(), full.va.begin());
  for (std::size_t i = 0; i < 32; ++i) full.au[i] = static_cast<std::uint8_t>(i % 3 == 0);
  full.expr = {1, 4, 6, 2};
  full.va_mask = {1, 1, 0, 1};
  full.au_mask = {1, 0, 1, 1};
  full.expr_mask = {0, 1, 1, 1};

  auto outputs = [](std::size_t n, std::uint64_t seed) {
    ModelOutput<double> o{Tensor64({n, 2}, uniform(2 * n, seed)), Tensor64({n, 8}, uniform(8 * n, seed + 1)),
                          Tensor64({n, 7}, uniform(7 * n, seed + 2))};
    o.va.set_requires_grad(true);
    o.au_logits.set_requires_grad(true);
    o.expr_logits.set_requires_grad(true);
    return o;
  };
  auto o = outputs(4, 20);
  LossWeights<double> w;
  w.set(0.2, -0.1, 0.3);
  {
    Tape<double> tape;
    tape.backward(weighted_loss(task_losses(o, full), w));
  }
  // Masked-out rows get zero gradient from their task.
  EXPECT_EQ(o.va.grad()[4], 0.0);
  EXPECT_EQ(o.va.grad()[5], 0.0);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(o.au_logits.grad()[8 + k], 0.0);
  for (std::size_t k = 0; k < 7; ++k) EXPECT_EQ(o.expr_logits.grad()[k], 0.0);

  // Per-task gradient equals the gradient with the masked rows removed.
  const std::vector<std::size_t> va_rows{0, 1, 3};
  BatchLabels va_only;
  va_only.resize(3);
  for (std::size_t r = 0; r < 3; ++r) {
    va_only.va[2 * r] = full.va[2 * va_rows[r]];
    va_only.va[2 * r + 1] = full.va[2 * va_rows[r] + 1];
  }
  std::vector<double> pv;
  for (std::size_t r : va_rows) {
    pv.push_back(o.va.data()[2 * r]);
    pv.push_back(o.va.data()[2 * r + 1]);
  }
  Tensor64 p3({3, 2}, pv);
  p3.set_requires_grad(true);
  LossWeights<double> w3;
  w3.set(0.2, -0.1, 0.3);
  w3.s_va().zero_grad();
  {
    Tape<double> tape;
    tape.backward(weighted_loss(TaskLosses<double>{va_loss(p3, va_only.va, Mask(3, 1)), {}, {}, false}, w3));
  }
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_NEAR(o.va.grad()[2 * va_rows[r]], p3.grad()[2 * r], 1e-12);
    EXPECT_NEAR(o.va.grad()[2 * va_rows[r] + 1], p3.grad()[2 * r + 1], 1e-12);
  }
  EXPECT_NEAR(w.s_va().grad()[0], w3.s_va().grad()[0], 1e-12);
}

// ---------------------------------------------------------------------------
// Decision rules and metrics

TEST(DecisionRules, TiesAndBoundary) {
  ModelOutput<float> o{Tensor::zeros({1, 2}), Tensor::zeros({1, 8}), Tensor::zeros({1, 7})};
  const auto d = decision_rules(o);
  EXPECT_EQ(d.expr[0], 0u);
  for (auto a : d.au) EXPECT_EQ(a, 1);
}

TEST(DecisionRules, MatchesOracle) {
  const auto au = uniform(40, 13, -3, 3), ex = uniform(35, 14, -3, 3);
  ModelOutput<double> o{Tensor64::zeros({5, 2}), Tensor64({5, 8}, au), Tensor64({5, 7}, ex)};
  const auto d = decision_rules(o);
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(d.au[i], 1.0 / (1.0 + std::exp(-au[i])) >= 0.5 ? 1 : 0);
  for (std::size_t n = 0; n < 5; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 7; ++k)
      if (ex[n * 7 + k] > ex[n * 7 + best]) best = k;
    EXPECT_EQ(d.expr[n], best);
  }
}

TEST(F1, PerfectIsOne) {
  const std::vector<int> t{0, 1, 2, 3, 4, 5, 6};
  EXPECT_DOUBLE_EQ(metric_f1(t, t, F1Scheme::kMacro7).mean, 1.0);
}

TEST(F1, AllClassZeroOnBalancedTruth) {
  std::vector<int> truth, pred;
  for (int rep = 0; rep < 3; ++rep)
    for (int c = 0; c < 7; ++c) {
      truth.push_back(c);
      pred.push_back(0);
    }
  EXPECT_NEAR(metric_f1(pred, truth, F1Scheme::kMacro7).mean, (2.0 * (1.0 / 7) / (1 + 1.0 / 7)) / 7, 1e-15);
}

TEST(F1, AllInactiveAuIsZero) {
  std::vector<int> truth(80), pred(80, 0);
  for (std::size_t i = 0; i < 80; ++i) truth[i] = static_cast<int>((i / 8) % 2);
  const auto r = metric_f1(pred, truth, F1Scheme::kAU8);
  EXPECT_EQ(r.mean, 0.0);
  for (double v : r.per_label) EXPECT_EQ(v, 0.0);
}

TEST(F1, ZeroDivisionClassCountsAsZero) {
  const std::vector<int> t{0, 1, 2, 3, 4, 5};
  EXPECT_NEAR(metric_f1(t, t, F1Scheme::kMacro7).mean, 6.0 / 7.0, 1e-15);
}

TEST(F1, Binary) {
  const std::vector<int> p{1, 1, 0, 0}, t{1, 0, 1, 0};
  EXPECT_DOUBLE_EQ(metric_f1(p, t, F1Scheme::kBinary).mean, 0.5);
}

TEST(Metrics, PermutationInvariant) {
  std::mt19937_64 rng(15);
  std::vector<int> p(50), t(50);
  for (auto& v : p) v = static_cast<int>(rng() % 7);
  for (auto& v : t) v = static_cast<int>(rng() % 7);
  const auto x = uniform(50, 16), y = uniform(50, 17);
  std::vector<std::size_t> perm(50);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> pp, tp;
  std::vector<double> xp, yp;
  for (auto i : perm) {
    pp.push_back(p[i]);
    tp.push_back(t[i]);
    xp.push_back(x[i]);
    yp.push_back(y[i]);
  }
  EXPECT_DOUBLE_EQ(metric_f1(p, t, F1Scheme::kMacro7).mean, metric_f1(pp, tp, F1Scheme::kMacro7).mean);
  EXPECT_DOUBLE_EQ(accuracy(p, t), accuracy(pp, tp));
  EXPECT_NEAR(ccc(x, y), ccc(xp, yp), 1e-14);
}

TEST(Metrics, LengthMismatchRejected) {
  const std::vector<int> a{1, 2}, b{1};
  EXPECT_THROW((void)metric_f1(a, b, F1Scheme::kMacro7), ValidationError);
  EXPECT_THROW((void)accuracy(a, b), ValidationError);
}

TEST(Labels, ValidateRejectsSampleWithNoTask) {
  BatchLabels l;
  l.resize(2);
  l.va_mask[1] = l.au_mask[1] = l.expr_mask[1] = 0;
  EXPECT_THROW(l.validate(), ValidationError);
}

}  // namespace
