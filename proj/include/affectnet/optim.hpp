#pragma once

// Adam and plain SGD with coupled L2 weight decay (g <- g + wd * theta).
// Parameters flagged decay = false (the loss log-variances) are never decayed.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "affectnet/error.hpp"
#include "affectnet/nn.hpp"

namespace affectnet {

struct AdamOptions {
  double lr = 0.001;
  double weight_decay = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct SgdOptions {
  double lr = 0.0001;
  double weight_decay = 0.005;
};

namespace detail {

// Gradient with decay folded in, after rejecting non-finite entries.
template <class T>
std::vector<double> effective_grad(const Parameter<T>& p, double weight_decay) {
  const auto value = p.value.data();
  std::vector<double> g(value.size(), 0.0);
  if (p.value.has_grad()) {
    const auto grad = p.value.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(grad[i])) {
        throw NumericalError("non-finite gradient in parameter '" + p.name + "' at element " + std::to_string(i));
      }
      g[i] = grad[i];
    }
  }
  if (p.decay && weight_decay != 0)
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += weight_decay * value[i];
  return g;
}

// All gradients are checked before any parameter moves, so a rejected step
// leaves the model untouched.
template <class T>
std::vector<std::vector<double>> effective_grads(const ParameterList<T>& params, double weight_decay) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(effective_grad(p, weight_decay));
  return out;
}

}  // namespace detail

template <class T>
class Sgd {
 public:
  Sgd(ParameterList<T> params, SgdOptions opt) : params_(std::move(params)), opt_(opt) {}

  void step() {
    const auto grads = detail::effective_grads(params_, opt_.weight_decay);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto value = params_[k].value.mutable_data();
      for (std::size_t i = 0; i < value.size(); ++i)
        value[i] = static_cast<T>(value[i] - opt_.lr * grads[k][i]);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  const ParameterList<T>& parameters() const { return params_; }
  const SgdOptions& options() const { return opt_; }

 private:
  ParameterList<T> params_;
  SgdOptions opt_;
};

template <class T>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamOptions opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value.numel(), 0.0);
      v_.emplace_back(p.value.numel(), 0.0);
    }
  }

  void step() {
    const auto grads = detail::effective_grads(params_, opt_.weight_decay);
    ++t_;
    const double c1 = 1 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto value = params_[k].value.mutable_data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grads[k][i];
        m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * g * g;
        const double mhat = m[i] / c1, vhat = v[i] / c2;
        value[i] = static_cast<T>(value[i] - opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  std::size_t steps() const { return t_; }
  const std::vector<double>& first_moment(std::size_t k) const { return m_[k]; }
  const std::vector<double>& second_moment(std::size_t k) const { return v_[k]; }
  const ParameterList<T>& parameters() const { return params_; }
  const AdamOptions& options() const { return opt_; }

 private:
  ParameterList<T> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace affectnet
