#pragma once

// Task losses, uncertainty weighting, evaluation metrics and decision rules.
//
// Losses are tape operations over a batch with per-task presence masks.
// Metrics are plain double-precision functions over whole evaluation sets.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "affectnet/error.hpp"
#include "affectnet/nn.hpp"
#include "affectnet/tensor.hpp"

namespace affectnet {

inline constexpr std::size_t kNumAUs = 8;
inline constexpr std::size_t kNumExpressions = 7;

using Mask = std::vector<std::uint8_t>;

// Ground truth for a batch. Each task has its own presence mask; values under
// a cleared mask are ignored.
struct BatchLabels {
  std::vector<float> va;          // N x 2, (valence, arousal)
  std::vector<std::uint8_t> au;   // N x 8, {0,1}
  std::vector<std::size_t> expr;  // N, class in [0,6]
  Mask va_mask, au_mask, expr_mask;

  std::size_t size() const { return expr.size(); }

  void resize(std::size_t n) {
    va.assign(n * 2, 0.0f);
    au.assign(n * kNumAUs, 0);
    expr.assign(n, 0);
    va_mask.assign(n, 1);
    au_mask.assign(n, 1);
    expr_mask.assign(n, 1);
  }

  void validate() const {
    const std::size_t n = size();
    if (va.size() != 2 * n || au.size() != kNumAUs * n || va_mask.size() != n || au_mask.size() != n ||
        expr_mask.size() != n) {
      throw ShapeError("labels: inconsistent field lengths");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!va_mask[i] && !au_mask[i] && !expr_mask[i]) {
        throw ValidationError("labels: sample " + std::to_string(i) + " has no task annotated");
      }
      if (va_mask[i] && (std::abs(va[2 * i]) > 1.0f || std::abs(va[2 * i + 1]) > 1.0f)) {
        throw ValidationError("labels: sample " + std::to_string(i) + " valence/arousal outside [-1,1]");
      }
      if (au_mask[i]) {
        for (std::size_t k = 0; k < kNumAUs; ++k)
          if (au[i * kNumAUs + k] > 1) throw ValidationError("labels: sample " + std::to_string(i) + " AU target not binary");
      }
      if (expr_mask[i] && expr[i] >= kNumExpressions) {
        throw ValidationError("labels: sample " + std::to_string(i) + " expression " + std::to_string(expr[i]) +
                              " outside [0,6]");
      }
    }
  }
};

template <class T>
struct ModelOutput {
  BasicTensor<T> va;           // (N,2) in [-1,1]
  BasicTensor<T> au_logits;    // (N,8)
  BasicTensor<T> expr_logits;  // (N,7)
};

template <class T>
struct TaskLoss {
  BasicTensor<T> value;   // scalar; constant 0 when the task is absent
  std::size_t count = 0;  // samples that contributed
  bool present() const { return count > 0; }
};

template <class T>
struct TaskLosses {
  TaskLoss<T> va, au, expr;
  bool va_degenerate = false;  // fewer than two VA samples in the batch
};

// ---------------------------------------------------------------------------
// Losses

// Softmax cross-entropy: -x[class] + log sum_i exp(x_i), averaged over
// annotated samples.
template <class T>
TaskLoss<T> expr_loss(const BasicTensor<T>& logits, std::span<const std::size_t> target, std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2 || logits.dim(1) != kNumExpressions || target.size() != logits.dim(0) ||
      mask.size() != logits.dim(0)) {
    throw ShapeError("expr_loss: expected (N,7) logits with N targets, got " + shape_str(logits.shape()));
  }
  std::vector<std::size_t> idx(target.size(), 0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!mask[i]) continue;
    if (target[i] >= kNumExpressions) {
      throw ValidationError("expr_loss: target " + std::to_string(target[i]) + " outside [0,6]");
    }
    idx[i] = target[i];
    ++count;
  }
  if (count == 0) return {BasicTensor<T>::scalar(T(0)), 0};
  return {masked_mean(sub(log_sum_exp(logits), pick(logits, std::span<const std::size_t>(idx))), mask), count};
}

// Row sums of stable binary cross-entropy with logits:
// max(x,0) - x*y + log(1 + exp(-|x|)).
template <class T>
BasicTensor<T> bce_with_logits_rowsum(const BasicTensor<T>& logits, std::span<const std::uint8_t> target) {
  detail::require_rank("bce_with_logits", logits, 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (target.size() != n * k) throw ShapeError("bce_with_logits: target size mismatch");
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    detail::Acc<T> s = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const detail::Acc<T> x = logits.data()[i * k + j];
      const detail::Acc<T> y = target[i * k + j];
      s += std::max<detail::Acc<T>>(x, 0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    out[i] = static_cast<T>(s);
  }
  auto y = std::make_shared<std::vector<std::uint8_t>>(target.begin(), target.end());
  auto rule = [logits, y](std::span<const T> g) {
    if (!logits.requires_grad()) return;
    auto gx = logits.grad_buffer();
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < gx.size(); ++i)
      gx[i] += g[i / k] * (detail::stable_sigmoid(logits.data()[i]) - static_cast<T>((*y)[i]));
  };
  return make_result<T>("bce_with_logits", Shape{n}, std::move(out), std::move(rule), logits);
}

// Binary cross-entropy summed over the 8 AUs, averaged over annotated samples.
template <class T>
TaskLoss<T> au_loss(const BasicTensor<T>& logits, std::span<const std::uint8_t> target, std::span<const std::uint8_t> mask) {
  if (logits.rank() != 2 || logits.dim(1) != kNumAUs || target.size() != logits.dim(0) * kNumAUs ||
      mask.size() != logits.dim(0)) {
    throw ShapeError("au_loss: expected (N,8) logits with N x 8 targets, got " + shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    ++count;
    for (std::size_t k = 0; k < kNumAUs; ++k)
      if (target[i * kNumAUs + k] > 1) throw ValidationError("au_loss: non-binary target in sample " + std::to_string(i));
  }
  if (count == 0) return {BasicTensor<T>::scalar(T(0)), 0};
  return {masked_mean(bce_with_logits_rowsum(logits, target), mask), count};
}

inline constexpr double kCccEpsilon = 1e-8;

namespace detail {

struct CccMoments {
  double mean_x = 0, mean_y = 0, var_x = 0, var_y = 0, cov = 0, n = 0;
  double denominator() const { return var_x + var_y + (mean_x - mean_y) * (mean_x - mean_y); }
};

// Population (1/N) moments over the entries selected by `take`.
template <class GetX, class GetY, class Take>
CccMoments ccc_moments(std::size_t len, GetX x, GetY y, Take take) {
  CccMoments m;
  for (std::size_t i = 0; i < len; ++i) {
    if (!take(i)) continue;
    m.mean_x += x(i);
    m.mean_y += y(i);
    m.n += 1;
  }
  m.mean_x /= m.n;
  m.mean_y /= m.n;
  for (std::size_t i = 0; i < len; ++i) {
    if (!take(i)) continue;
    const double dx = x(i) - m.mean_x, dy = y(i) - m.mean_y;
    m.var_x += dx * dx;
    m.var_y += dy * dy;
    m.cov += dx * dy;
  }
  m.var_x /= m.n;
  m.var_y /= m.n;
  m.cov /= m.n;
  return m;
}

// Degenerate policy: a vanishing denominator means both series are constant;
// identical constants score 1, anything else 0.
template <class GetX, class GetY, class Take>
double ccc_value(const CccMoments& m, std::size_t len, GetX x, GetY y, Take take) {
  const double d = m.denominator();
  if (d < kCccEpsilon) {
    double mad = 0;
    for (std::size_t i = 0; i < len; ++i)
      if (take(i)) mad += std::abs(x(i) - y(i));
    return mad / m.n < kCccEpsilon ? 1.0 : 0.0;
  }
  return 2.0 * m.cov / d;
}

}  // namespace detail

// Concordance correlation coefficient 2 S_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2).
inline double ccc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("ccc: length mismatch");
  if (x.size() < 2) throw ValidationError("ccc: need at least two samples");
  auto gx = [&](std::size_t i) { return x[i]; };
  auto gy = [&](std::size_t i) { return y[i]; };
  auto all = [](std::size_t) { return true; };
  return detail::ccc_value(detail::ccc_moments(x.size(), gx, gy, all), x.size(), gx, gy, all);
}

// 1 - (ccc_valence + ccc_arousal) / 2 over the annotated rows of the batch.
template <class T>
TaskLoss<T> va_loss(const BasicTensor<T>& pred, std::span<const float> target, std::span<const std::uint8_t> mask,
                    bool* degenerate = nullptr) {
  if (pred.rank() != 2 || pred.dim(1) != 2 || target.size() != pred.dim(0) * 2 || mask.size() != pred.dim(0)) {
    throw ShapeError("va_loss: expected (N,2) predictions with N x 2 targets, got " + shape_str(pred.shape()));
  }
  const auto count = static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  if (degenerate) *degenerate = count < 2;
  if (count < 2) return {BasicTensor<T>::scalar(T(0)), 0};

  const std::size_t n = pred.dim(0);
  auto tgt = std::make_shared<std::vector<float>>(target.begin(), target.end());
  auto msk = std::make_shared<Mask>(mask.begin(), mask.end());
  auto take = [msk](std::size_t i) { return (*msk)[i] != 0; };

  std::array<detail::CccMoments, 2> moments;
  double rho_sum = 0;
  for (std::size_t col = 0; col < 2; ++col) {
    auto gx = [&pred, col](std::size_t i) { return static_cast<double>(pred.data()[2 * i + col]); };
    auto gy = [&tgt, col](std::size_t i) { return static_cast<double>((*tgt)[2 * i + col]); };
    moments[col] = detail::ccc_moments(n, gx, gy, take);
    rho_sum += detail::ccc_value(moments[col], n, gx, gy, take);
  }
  const T value = static_cast<T>(1.0 - 0.5 * rho_sum);

  auto rule = [pred, tgt, msk, moments, n](std::span<const T> g) {
    if (!pred.requires_grad()) return;
    auto gp = pred.grad_buffer();
    for (std::size_t col = 0; col < 2; ++col) {
      const auto& m = moments[col];
      const double d = m.denominator();
      if (d < kCccEpsilon) continue;
      const double diff = m.mean_x - m.mean_y;
      for (std::size_t i = 0; i < n; ++i) {
        if (!(*msk)[i]) continue;
        const double x = pred.data()[2 * i + col];
        const double y = (*tgt)[2 * i + col];
        const double drho = 2.0 / d * (y - m.mean_y) / m.n -
                            2.0 * m.cov / (d * d) * (2.0 * (x - m.mean_x) / m.n + 2.0 * diff / m.n);
        gp[2 * i + col] += static_cast<T>(static_cast<double>(g[0]) * -0.5 * drho);
      }
    }
  };
  return {make_result<T>("va_loss", Shape{}, std::vector<T>{value}, std::move(rule), pred), count};
}

template <class T>
TaskLosses<T> task_losses(const ModelOutput<T>& out, const BatchLabels& labels) {
  TaskLosses<T> l;
  l.va = va_loss(out.va, labels.va, labels.va_mask, &l.va_degenerate);
  l.au = au_loss(out.au_logits, labels.au, labels.au_mask);
  l.expr = expr_loss(out.expr_logits, labels.expr, labels.expr_mask);
  return l;
}

// L_va + L_au + L_expr; absent tasks contribute zero.
template <class T>
BasicTensor<T> total_sum_loss(const TaskLosses<T>& l) {
  return add(add(l.va.value, l.au.value), l.expr.value);
}

// Learnable log-variances s = log sigma^2, one per task. Never weight-decayed.
template <class T>
class LossWeights {
 public:
  LossWeights()
      : s_va_(BasicTensor<T>::scalar(T(0))), s_au_(BasicTensor<T>::scalar(T(0))), s_expr_(BasicTensor<T>::scalar(T(0))) {
    s_va_.set_requires_grad(true);
    s_au_.set_requires_grad(true);
    s_expr_.set_requires_grad(true);
  }

  BasicTensor<T>& s_va() { return s_va_; }
  BasicTensor<T>& s_au() { return s_au_; }
  BasicTensor<T>& s_expr() { return s_expr_; }
  const BasicTensor<T>& s_va() const { return s_va_; }
  const BasicTensor<T>& s_au() const { return s_au_; }
  const BasicTensor<T>& s_expr() const { return s_expr_; }

  void set(T va, T au, T expr) {
    s_va_.mutable_data()[0] = va;
    s_au_.mutable_data()[0] = au;
    s_expr_.mutable_data()[0] = expr;
  }
  void reset() { set(T(0), T(0), T(0)); }

  // sigma = exp(s / 2), in (va, au, expr) order.
  std::array<double, 3> sigmas() const {
    return {std::exp(0.5 * s_va_.item()), std::exp(0.5 * s_au_.item()), std::exp(0.5 * s_expr_.item())};
  }

  bool finite() const {
    return std::isfinite(s_va_.item()) && std::isfinite(s_au_.item()) && std::isfinite(s_expr_.item());
  }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".s_va", s_va_, false});
    out.push_back({prefix + ".s_au", s_au_, false});
    out.push_back({prefix + ".s_expr", s_expr_, false});
  }

 private:
  BasicTensor<T> s_va_, s_au_, s_expr_;
};

// Homoscedastic uncertainty weighting with s = log sigma^2:
//   1/2 e^{-s_va} L_va + e^{-s_au} L_au + e^{-s_expr} L_expr + 1/2 (s_va + s_au + s_expr)
// A task absent from the batch drops its whole term, regularizer included.
template <class T>
BasicTensor<T> weighted_loss(const TaskLosses<T>& l, const LossWeights<T>& w) {
  auto term = [](const TaskLoss<T>& loss, const BasicTensor<T>& s, T coeff) {
    return add(mul(scale(exp(-s), coeff), loss.value), scale(s, T(0.5)));
  };
  BasicTensor<T> total = BasicTensor<T>::scalar(T(0));
  if (l.va.present()) total = add(total, term(l.va, w.s_va(), T(0.5)));
  if (l.au.present()) total = add(total, term(l.au, w.s_au(), T(1)));
  if (l.expr.present()) total = add(total, term(l.expr, w.s_expr(), T(1)));
  return total;
}

// ---------------------------------------------------------------------------
// Decision rules

struct DiscretePredictions {
  std::vector<double> va;         // N x 2
  std::vector<std::uint8_t> au;   // N x 8
  std::vector<std::size_t> expr;  // N
};

// Expression: argmax, lowest index on ties. AU i active iff sigmoid(logit) >= 0.5.
template <class T>
DiscretePredictions decision_rules(const ModelOutput<T>& out) {
  DiscretePredictions p;
  const std::size_t n = out.va.dim(0);
  p.va.assign(out.va.data().begin(), out.va.data().end());
  p.au.resize(n * kNumAUs);
  for (std::size_t i = 0; i < p.au.size(); ++i)
    p.au[i] = detail::stable_sigmoid(out.au_logits.data()[i]) >= T(0.5) ? 1 : 0;
  p.expr.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = out.expr_logits.data().subspan(i * kNumExpressions, kNumExpressions);
    p.expr[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Metrics

struct CccPair {
  double valence = 0;
  double arousal = 0;
};

inline CccPair metric_ccc(std::span<const double> pred_valence, std::span<const double> label_valence,
                          std::span<const double> pred_arousal, std::span<const double> label_arousal) {
  return {ccc(pred_valence, label_valence), ccc(pred_arousal, label_arousal)};
}

// Mean of per-group CCC; groups with fewer than two samples are skipped.
inline double ccc_per_group(std::span<const double> x, std::span<const double> y, std::span<const std::string> groups) {
  if (x.size() != y.size() || x.size() != groups.size()) throw ValidationError("ccc_per_group: length mismatch");
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_group;
  for (std::size_t i = 0; i < x.size(); ++i) {
    by_group[groups[i]].first.push_back(x[i]);
    by_group[groups[i]].second.push_back(y[i]);
  }
  double total = 0;
  std::size_t used = 0;
  for (const auto& [name, series] : by_group) {
    if (series.first.size() < 2) continue;
    total += ccc(series.first, series.second);
    ++used;
  }
  if (used == 0) throw ValidationError("ccc_per_group: no group has two or more samples");
  return total / static_cast<double>(used);
}

// 2TP / (2TP + FP + FN); zero when there are no predicted and no actual positives.
inline double binary_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
  const std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

enum class F1Scheme { kMacro7, kAU8, kBinary };

struct F1Result {
  double mean = 0;
  std::vector<double> per_label;  // per class (macro7), per AU (au8), single (binary)
};

// macro7: labels are class ids, one-vs-rest F1 averaged over all 7 classes.
// au8: row-major N x 8 {0,1} arrays, binary F1 per AU averaged over the 8.
// binary: {0,1} arrays, positive class 1.
inline F1Result metric_f1(std::span<const int> pred, std::span<const int> truth, F1Scheme scheme) {
  if (pred.size() != truth.size()) throw ValidationError("metric_f1: length mismatch");
  F1Result r;
  switch (scheme) {
    case F1Scheme::kMacro7: {
      for (int c = 0; c < static_cast<int>(kNumExpressions); ++c) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
          tp += pred[i] == c && truth[i] == c;
          fp += pred[i] == c && truth[i] != c;
          fn += pred[i] != c && truth[i] == c;
        }
        r.per_label.push_back(binary_f1(tp, fp, fn));
      }
      break;
    }
    case F1Scheme::kAU8: {
      if (pred.size() % kNumAUs != 0) throw ValidationError("metric_f1: AU arrays must be N x 8");
      for (std::size_t k = 0; k < kNumAUs; ++k) {
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = k; i < pred.size(); i += kNumAUs) {
          tp += pred[i] == 1 && truth[i] == 1;
          fp += pred[i] == 1 && truth[i] != 1;
          fn += pred[i] != 1 && truth[i] == 1;
        }
        r.per_label.push_back(binary_f1(tp, fp, fn));
      }
      break;
    }
    case F1Scheme::kBinary: {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        tp += pred[i] == 1 && truth[i] == 1;
        fp += pred[i] == 1 && truth[i] != 1;
        fn += pred[i] != 1 && truth[i] == 1;
      }
      r.per_label.push_back(binary_f1(tp, fp, fn));
      break;
    }
  }
  double s = 0;
  for (double v : r.per_label) s += v;
  r.mean = r.per_label.empty() ? 0.0 : s / static_cast<double>(r.per_label.size());
  return r;
}

inline double accuracy(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) throw ValidationError("accuracy: length mismatch");
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

struct EvalReport {
  double ccc_valence = 0, ccc_arousal = 0;
  double f1_au = 0, f1_expr = 0, accuracy_expr = 0;
  std::vector<double> f1_per_au, f1_per_class;
  std::size_t n_va = 0, n_au = 0, n_expr = 0;
  std::size_t unmatched_predictions = 0, unmatched_labels = 0;
};

}  // namespace affectnet
