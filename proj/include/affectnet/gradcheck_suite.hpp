#pragma once

// Gradient-check suite at three scopes:
//   ops    every differentiable op, float32, h = 1e-2, tolerance 1e-3,
//          10 random smooth points per case
//   blocks SE, CBAM and residual blocks, 64-bit, h = 1e-5, tolerance 1e-5
//   model  MTANet total loss (sum and weighted), 64-bit, one coordinate in
//          every parameter tensor, dropout off
// Each op output y is reduced through a fixed random probe sum(r * y) that is
// recorded under its own name, so a broken rule in a checked op cannot hide
// behind the reduction.

#include <chrono>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "affectnet/grad_check.hpp"
#include "affectnet/model.hpp"
#include "affectnet/nn.hpp"
#include "affectnet/objectives.hpp"
#include "affectnet/tensor.hpp"

namespace affectnet {

enum class GradScope { kOps, kBlocks, kModel };

inline GradScope parse_grad_scope(const std::string& s) {
  if (s == "ops") return GradScope::kOps;
  if (s == "blocks") return GradScope::kBlocks;
  if (s == "model") return GradScope::kModel;
  throw ValidationError("gradcheck scope must be ops, blocks or model, got '" + s + "'");
}

struct GradCaseResult {
  std::string name;
  double max_rel_error = 0;
  double tolerance = 0;
  std::size_t checked = 0;  // coordinates compared
  std::size_t skipped = 0;  // coordinates within h of a kink
  bool pass() const { return checked > 0 && max_rel_error < tolerance; }
};

struct GradSuiteReport {
  std::vector<GradCaseResult> cases;
  double seconds = 0;
  bool passed() const {
    for (const auto& c : cases)
      if (!c.pass()) return false;
    return !cases.empty();
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& c : cases)
      if (!c.pass()) out.push_back(c.name);
    return out;
  }
};

inline constexpr double kOpsStep = 1e-2, kOpsTolerance = 1e-3;
inline constexpr double kWideStep = 1e-5, kWideTolerance = 1e-5;

namespace detail {

template <class T>
BasicTensor<T> probe_sum(const BasicTensor<T>& y, const std::vector<T>& r) {
  double s = 0;
  for (std::size_t i = 0; i < r.size(); ++i) s += static_cast<double>(r[i]) * static_cast<double>(y.data()[i]);
  auto rule = [y, r](std::span<const T> g) {
    auto gy = y.grad_buffer();
    for (std::size_t i = 0; i < r.size(); ++i) gy[i] += g[0] * r[i];
  };
  return make_result<T>("probe", Shape{}, std::vector<T>{static_cast<T>(s)}, std::move(rule), y);
}

template <class T>
std::vector<T> uniform_values(std::size_t n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

// Values bounded away from zero: |v| in [lo, hi] with random sign.
template <class T>
std::vector<T> off_zero(std::size_t n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(sign(rng) ? d(rng) : -d(rng));
  return v;
}

// A shuffled grid spaced `gap` apart, so no max is within h of a tie.
template <class T>
std::vector<T> distinct(std::size_t n, double gap, std::mt19937_64& rng) {
  std::vector<T> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<T>((static_cast<double>(i) - n / 2.0) * gap);
  std::shuffle(v.begin(), v.end(), rng);
  return v;
}

using Tensor32 = BasicTensor<float>;

// One op case: builds inputs from an rng, returns (input to perturb, scalar fn).
struct OpCase {
  std::string name;
  std::function<std::pair<Tensor32, std::function<Tensor32(const Tensor32&)>>(std::mt19937_64&)> make;
};

inline Tensor32 t32(Shape s, std::vector<float> v) { return Tensor32(std::move(s), std::move(v)); }

// Wraps an op f(x) -> y with a fresh random probe over y's shape.
template <class Op>
std::function<Tensor32(const Tensor32&)> probed(Op op, const Tensor32& sample, std::mt19937_64& rng) {
  const auto y = op(sample);
  auto r = uniform_values<float>(y.numel(), -1, 1, rng);
  return [op, r](const Tensor32& x) { return probe_sum(op(x), r); };
}

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  auto add_case = [&](std::string name, auto make) { cases.push_back({std::move(name), make}); };
  using R = std::mt19937_64;

  auto binary_cases = [&](const std::string& op, auto fn, bool positive_b) {
    const auto bvals = [positive_b](std::size_t n, R& rng) {
      return positive_b ? off_zero<float>(n, 0.5, 1.5, rng) : uniform_values<float>(n, -1, 1, rng);
    };
    add_case(op + "[a]", [fn, bvals](R& rng) {
      auto a = t32({2, 3}, uniform_values<float>(6, -1, 1, rng));
      auto b = t32({2, 3}, bvals(6, rng));
      return std::pair{a, probed([b, fn](const Tensor32& x) { return fn(x, b); }, a, rng)};
    });
    add_case(op + "[b]", [fn, bvals](R& rng) {
      auto a = t32({2, 3}, uniform_values<float>(6, -1, 1, rng));
      auto b = t32({2, 3}, bvals(6, rng));
      return std::pair{b, probed([a, fn](const Tensor32& x) { return fn(a, x); }, b, rng)};
    });
    add_case(op + "[b broadcast]", [fn, bvals](R& rng) {
      auto a = t32({2, 3, 2, 2}, uniform_values<float>(24, -1, 1, rng));
      auto b = t32({1, 3, 1, 1}, bvals(3, rng));
      return std::pair{b, probed([a, fn](const Tensor32& x) { return fn(a, x); }, b, rng)};
    });
    add_case(op + "[b scalar]", [fn, bvals](R& rng) {
      auto a = t32({2, 3}, uniform_values<float>(6, -1, 1, rng));
      auto b = t32({}, bvals(1, rng));
      return std::pair{b, probed([a, fn](const Tensor32& x) { return fn(a, x); }, b, rng)};
    });
  };
  binary_cases("add", [](const Tensor32& a, const Tensor32& b) { return add(a, b); }, false);
  binary_cases("sub", [](const Tensor32& a, const Tensor32& b) { return sub(a, b); }, false);
  binary_cases("mul", [](const Tensor32& a, const Tensor32& b) { return mul(a, b); }, false);
  binary_cases("div", [](const Tensor32& a, const Tensor32& b) { return div(a, b); }, true);

  auto unary_case = [&](const std::string& name, auto fn, double lo, double hi, bool avoid_zero) {
    add_case(name, [fn, lo, hi, avoid_zero](R& rng) {
      auto x = t32({2, 5}, avoid_zero ? off_zero<float>(10, lo, hi, rng) : uniform_values<float>(10, lo, hi, rng));
      return std::pair{x, probed(fn, x, rng)};
    });
  };
  unary_case("scale", [](const Tensor32& x) { return scale(x, 2.5f); }, -1, 1, false);
  unary_case("relu", [](const Tensor32& x) { return relu(x); }, 0.1, 1, true);
  unary_case("sigmoid", [](const Tensor32& x) { return sigmoid(x); }, -3, 3, false);
  unary_case("tanh", [](const Tensor32& x) { return tanh(x); }, -2, 2, false);
  unary_case("exp", [](const Tensor32& x) { return exp(x); }, -1, 1, false);
  unary_case("reshape", [](const Tensor32& x) { return reshape(x, {5, 2}); }, -1, 1, false);
  unary_case("transpose", [](const Tensor32& x) { return transpose(x); }, -1, 1, false);
  unary_case("sum", [](const Tensor32& x) { return sum(x); }, -1, 1, false);
  unary_case("mean", [](const Tensor32& x) { return mean(x); }, -1, 1, false);
  unary_case("log_sum_exp", [](const Tensor32& x) { return log_sum_exp(x); }, -2, 2, false);
  add_case("pick", [](R& rng) {
    auto x = t32({3, 4}, uniform_values<float>(12, -1, 1, rng));
    std::vector<std::size_t> idx{2, 0, 3};
    return std::pair{x, probed([idx](const Tensor32& v) { return pick(v, idx); }, x, rng)};
  });
  add_case("masked_mean", [](R& rng) {
    auto x = t32({5}, uniform_values<float>(5, -1, 1, rng));
    Mask m{1, 0, 1, 1, 0};
    return std::pair{x, probed([m](const Tensor32& v) { return masked_mean(v, m); }, x, rng)};
  });
  add_case("concat[a]", [](R& rng) {
    auto a = t32({2, 3}, uniform_values<float>(6, -1, 1, rng));
    auto b = t32({2, 2}, uniform_values<float>(4, -1, 1, rng));
    return std::pair{a, probed([b](const Tensor32& x) { return concat(x, b); }, a, rng)};
  });
  add_case("concat[b]", [](R& rng) {
    auto a = t32({2, 3}, uniform_values<float>(6, -1, 1, rng));
    auto b = t32({2, 2}, uniform_values<float>(4, -1, 1, rng));
    return std::pair{b, probed([a](const Tensor32& x) { return concat(a, x); }, b, rng)};
  });
  add_case("matmul[a]", [](R& rng) {
    auto a = t32({3, 4}, uniform_values<float>(12, -1, 1, rng));
    auto b = t32({4, 2}, uniform_values<float>(8, -1, 1, rng));
    return std::pair{a, probed([b](const Tensor32& x) { return matmul(x, b); }, a, rng)};
  });
  add_case("matmul[b]", [](R& rng) {
    auto a = t32({3, 4}, uniform_values<float>(12, -1, 1, rng));
    auto b = t32({4, 2}, uniform_values<float>(8, -1, 1, rng));
    return std::pair{b, probed([a](const Tensor32& x) { return matmul(a, x); }, b, rng)};
  });
  for (std::size_t stride : {1, 2}) {
    const std::string tag = "conv2d/s" + std::to_string(stride);
    auto inputs = [](R& rng) {
      return std::tuple{t32({2, 3, 8, 8}, uniform_values<float>(384, -1, 1, rng)),
                        t32({4, 3, 3, 3}, uniform_values<float>(108, -0.5, 0.5, rng)),
                        t32({4}, uniform_values<float>(4, -0.5, 0.5, rng))};
    };
    add_case(tag + "[x]", [inputs, stride](R& rng) {
      auto [x, w, b] = inputs(rng);
      return std::pair{x, probed([w, b, stride](const Tensor32& v) { return conv2d(v, w, b, stride, 1); }, x, rng)};
    });
    add_case(tag + "[w]", [inputs, stride](R& rng) {
      auto [x, w, b] = inputs(rng);
      return std::pair{w, probed([x, b, stride](const Tensor32& v) { return conv2d(x, v, b, stride, 1); }, w, rng)};
    });
    add_case(tag + "[bias]", [inputs, stride](R& rng) {
      auto [x, w, b] = inputs(rng);
      return std::pair{b, probed([x, w, stride](const Tensor32& v) { return conv2d(x, w, v, stride, 1); }, b, rng)};
    });
  }
  add_case("global_avg_pool", [](R& rng) {
    auto x = t32({2, 3, 4, 4}, uniform_values<float>(96, -1, 1, rng));
    return std::pair{x, probed([](const Tensor32& v) { return global_avg_pool(v); }, x, rng)};
  });
  add_case("global_max_pool", [](R& rng) {
    auto x = t32({2, 3, 4, 4}, distinct<float>(96, 0.05, rng));
    return std::pair{x, probed([](const Tensor32& v) { return global_max_pool(v); }, x, rng)};
  });
  add_case("channel_pool", [](R& rng) {
    auto x = t32({2, 3, 4, 4}, distinct<float>(96, 0.05, rng));
    return std::pair{x, probed([](const Tensor32& v) { return channel_pool(v); }, x, rng)};
  });
  add_case("dropout", [](R& rng) {
    auto x = t32({4, 6}, uniform_values<float>(24, -1, 1, rng));
    const std::uint64_t seed = rng();
    return std::pair{x, probed(
                            [seed](const Tensor32& v) {
                              std::mt19937_64 mask_rng(seed);
                              return dropout(v, 0.5, true, mask_rng);
                            },
                            x, rng)};
  });
  add_case("bce_with_logits", [](R& rng) {
    auto x = t32({3, kNumAUs}, uniform_values<float>(3 * kNumAUs, -3, 3, rng));
    std::vector<std::uint8_t> y(3 * kNumAUs);
    for (auto& v : y) v = static_cast<std::uint8_t>(rng() & 1);
    return std::pair{x, probed([y](const Tensor32& v) { return bce_with_logits_rowsum(v, y); }, x, rng)};
  });
  add_case("va_loss", [](R& rng) {
    auto x = t32({8, 2}, uniform_values<float>(16, -0.8, 0.8, rng));
    auto target = uniform_values<float>(16, -1, 1, rng);
    Mask m{1, 1, 0, 1, 1, 1, 1, 0};
    return std::pair{x, probed([target, m](const Tensor32& v) { return va_loss(v, target, m).value; }, x, rng)};
  });
  return cases;
}

}  // namespace detail

inline std::vector<GradCaseResult> run_op_checks(std::size_t points = 10, std::uint64_t seed = 7) {
  std::vector<GradCaseResult> out;
  for (const auto& c : detail::op_cases()) {
    GradCaseResult r{"op " + c.name, 0.0, kOpsTolerance, 0, 0};
    for (std::size_t k = 0; k < points; ++k) {
      std::mt19937_64 rng(seed * 1000 + k);
      auto [x, f] = c.make(rng);
      const auto g = grad_check(f, x, kOpsStep);
      r.max_rel_error = std::max(r.max_rel_error, g.max_rel_error);
      r.checked += x.numel();
    }
    out.push_back(r);
  }
  return out;
}

namespace detail {

// Every coordinate of `x` plus up to `per_param` coordinates of each parameter.
inline std::vector<GradProbe<double>> block_probes(const Tensor64& x, const ParameterList<double>& params,
                                                   std::size_t per_param, std::mt19937_64& rng) {
  std::vector<GradProbe<double>> probes;
  for (std::size_t i = 0; i < x.numel(); i += 7) probes.push_back({"input", x, i});
  for (const auto& p : params) {
    std::uniform_int_distribution<std::size_t> pick_index(0, p.value.numel() - 1);
    for (std::size_t k = 0; k < std::min(per_param, p.value.numel()); ++k) probes.push_back({p.name, p.value, pick_index(rng)});
  }
  return probes;
}

inline GradCaseResult summarize(const std::string& name, const std::vector<ProbeResult>& results, double tolerance) {
  GradCaseResult r{name, 0.0, tolerance, 0, 0};
  for (const auto& p : results) {
    if (p.skipped) {
      ++r.skipped;
      continue;
    }
    ++r.checked;
    r.max_rel_error = std::max(r.max_rel_error, p.rel_error);
  }
  return r;
}

template <class Block>
GradCaseResult check_block(const std::string& name, const Block& block, const Shape& in_shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x = Tensor64(in_shape, uniform_values<double>(shape_numel(in_shape), -1, 1, rng));
  ParameterList<double> params;
  block.collect(name, params);
  const auto y = block.forward(x);
  const auto r = uniform_values<double>(y.numel(), -1, 1, rng);
  const auto probes = block_probes(x, params, 3, rng);
  const auto results = grad_check_probes([&] { return probe_sum(block.forward(x), r); }, probes, kWideStep, true);
  return summarize("block " + name, results, kWideTolerance);
}

}  // namespace detail

inline std::vector<GradCaseResult> run_block_checks(std::uint64_t seed = 11) {
  std::vector<GradCaseResult> out;
  std::mt19937_64 init(seed);
  out.push_back(detail::check_block("se", SEBlock<double>(16, 4, init), {2, 16, 4, 4}, seed + 1));
  out.push_back(detail::check_block("cbam", CBAMBlock<double>(16, 4, 3, init), {2, 16, 5, 5}, seed + 2));
  for (AttentionMode mode : {AttentionMode::kNone, AttentionMode::kSE, AttentionMode::kCBAM}) {
    for (std::size_t stride : {1, 2}) {
      ResidualBlockOptions o;
      o.in_channels = 8;
      o.out_channels = stride == 1 ? 8 : 16;
      o.stride = stride;
      o.attention = mode;
      o.ratio = 4;
      o.cbam_kernel = 3;
      const std::string name = "residual/" + std::string(to_string(mode)) + "/s" + std::to_string(stride);
      out.push_back(detail::check_block(name, SEResidualBlock<double>(o, init), {2, 8, 6, 6}, seed + 3 + stride));
    }
  }
  return out;
}

inline std::vector<GradCaseResult> run_model_checks(const ModelConfig& config = {}, std::size_t batch = 4,
                                                    std::uint64_t seed = 13) {
  MTANet<double> model(config, seed);
  std::mt19937_64 rng(seed + 1);
  auto images = Tensor64({batch, config.in_channels, config.height, config.width},
                         detail::uniform_values<double>(batch * config.in_channels * config.height * config.width, 0, 1, rng));
  BatchLabels labels;
  labels.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    labels.va[2 * i] = static_cast<float>(std::uniform_real_distribution<double>(-1, 1)(rng));
    labels.va[2 * i + 1] = static_cast<float>(std::uniform_real_distribution<double>(-1, 1)(rng));
    for (std::size_t k = 0; k < kNumAUs; ++k) labels.au[i * kNumAUs + k] = static_cast<std::uint8_t>(rng() & 1);
    labels.expr[i] = rng() % kNumExpressions;
  }
  model.loss_weights().set(0.3, -0.2, 0.1);

  std::vector<GradProbe<double>> probes;
  for (const auto& p : model.parameters()) {
    std::uniform_int_distribution<std::size_t> pick_index(0, p.value.numel() - 1);
    probes.push_back({p.name, p.value, pick_index(rng)});
  }
  std::vector<GradCaseResult> out;
  for (bool weighted : {false, true}) {
    auto loss = [&] {
      const auto l = task_losses(model.predict(images), labels);
      return weighted ? weighted_loss(l, model.loss_weights()) : total_sum_loss(l);
    };
    out.push_back(detail::summarize(std::string("model ") + (weighted ? "weighted" : "sum") + " loss",
                                    grad_check_probes(loss, probes, kWideStep, true), kWideTolerance));
  }
  return out;
}

inline GradSuiteReport run_gradcheck(GradScope scope) {
  const auto start = std::chrono::steady_clock::now();
  GradSuiteReport report;
  switch (scope) {
    case GradScope::kOps:
      report.cases = run_op_checks();
      break;
    case GradScope::kBlocks:
      report.cases = run_block_checks();
      break;
    case GradScope::kModel:
      report.cases = run_model_checks();
      break;
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace affectnet
