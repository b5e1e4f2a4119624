#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "affectnet/tensor.hpp"

namespace affectnet {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
};

// Compares the tape gradient of scalar f at x against central differences.
// The error per coordinate is |a - n| / max(1, |a|, |n|). The difference
// quotient divides by the step actually taken after rounding x +/- h to T.
//
// `coords` restricts the check to a subset of flat indices (all if empty).
// x is restored bitwise afterwards; its gradient buffer is cleared.
template <class T, class F>
GradCheckResult grad_check(F&& f, BasicTensor<T> x, double h, const std::vector<std::size_t>& coords = {}) {
  const bool had_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<T> analytic(x.numel(), T(0));
  {
    Tape<T> tape;
    BasicTensor<T> loss = f(x);
    tape.backward(loss);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  }
  x.zero_grad();

  std::vector<std::size_t> indices = coords;
  if (indices.empty()) {
    indices.resize(x.numel());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  }

  GradCheckResult result;
  auto values = x.mutable_data();
  for (std::size_t i : indices) {
    const T original = values[i];
    const T up = static_cast<T>(original + h);
    const T down = static_cast<T>(original - h);
    values[i] = up;
    const double f_up = static_cast<double>(f(x).item());
    values[i] = down;
    const double f_down = static_cast<double>(f(x).item());
    values[i] = original;
    const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
    const double a = static_cast<double>(analytic[i]);
    const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.analytic = a;
      result.numeric = numeric;
    }
  }
  x.set_requires_grad(had_flag);
  return result;
}

template <class T>
struct GradProbe {
  std::string label;
  BasicTensor<T> tensor;
  std::size_t index = 0;
};

struct ProbeResult {
  std::string label;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_error = 0;
  bool skipped = false;  // difference quotients at h and h/2 disagree: a kink lies within h
};

// Checks d loss / d tensor[index] for every probe against a central
// difference. The analytic side comes from one backward pass. With
// `screen_kinks`, a probe whose quotients at h and h/2 differ by more than
// `kink_tol` (relative) is reported as skipped instead of compared.
template <class T, class F>
std::vector<ProbeResult> grad_check_probes(F&& loss_fn, const std::vector<GradProbe<T>>& probes, double h,
                                           bool screen_kinks = false, double kink_tol = 1e-6) {
  std::vector<bool> had_flag;
  for (const auto& p : probes) {
    had_flag.push_back(p.tensor.requires_grad());
    BasicTensor<T> t = p.tensor;
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<double> analytic(probes.size(), 0.0);
  {
    Tape<T> tape;
    BasicTensor<T> loss = loss_fn();
    tape.backward(loss);
    for (std::size_t k = 0; k < probes.size(); ++k)
      if (probes[k].tensor.has_grad()) analytic[k] = static_cast<double>(probes[k].tensor.grad()[probes[k].index]);
  }
  for (const auto& p : probes) BasicTensor<T>(p.tensor).zero_grad();

  auto quotient = [&](BasicTensor<T> t, std::size_t i, double step) {
    auto values = t.mutable_data();
    const T original = values[i];
    const T up = static_cast<T>(original + step);
    const T down = static_cast<T>(original - step);
    values[i] = up;
    const double f_up = static_cast<double>(loss_fn().item());
    values[i] = down;
    const double f_down = static_cast<double>(loss_fn().item());
    values[i] = original;
    return (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
  };

  std::vector<ProbeResult> out;
  for (std::size_t k = 0; k < probes.size(); ++k) {
    const auto& p = probes[k];
    ProbeResult r{p.label, p.index, analytic[k], quotient(p.tensor, p.index, h), 0.0, false};
    if (screen_kinks) {
      const double half = quotient(p.tensor, p.index, h / 2);
      r.skipped = std::abs(half - r.numeric) / std::max({1.0, std::abs(half), std::abs(r.numeric)}) > kink_tol;
    }
    r.rel_error = std::abs(r.analytic - r.numeric) / std::max({1.0, std::abs(r.analytic), std::abs(r.numeric)});
    out.push_back(r);
  }
  for (std::size_t k = 0; k < probes.size(); ++k) BasicTensor<T>(probes[k].tensor).set_requires_grad(had_flag[k]);
  return out;
}

}  // namespace affectnet
