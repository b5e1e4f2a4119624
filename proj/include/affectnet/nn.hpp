#pragma once

// Layers and attention blocks: dense, conv, squeeze-and-excitation, CBAM and
// the SE-residual block. Blocks own their parameters as tensor handles and
// expose them by hierarchical name through collect().

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "affectnet/error.hpp"
#include "affectnet/tensor.hpp"

namespace affectnet {

template <class T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  bool decay = true;  // false for parameters excluded from weight decay
};

template <class T>
using ParameterList = std::vector<Parameter<T>>;

// kRelu: layer feeds a ReLU (or a residual sum that does), He-uniform bound
// sqrt(6/fan_in). kGate: layer feeds a sigmoid/tanh/softmax, Glorot-uniform
// bound sqrt(6/(fan_in+fan_out)).
enum class InitKind { kRelu, kGate };

inline double init_bound(InitKind kind, std::size_t fan_in, std::size_t fan_out) {
  return kind == InitKind::kRelu ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                 : std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <class T, class Rng>
BasicTensor<T> init_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, InitKind kind, Rng& rng) {
  const double bound = init_bound(kind, fan_in, fan_out);
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(dist(rng));
  BasicTensor<T> w(std::move(shape), std::move(data));
  w.set_requires_grad(true);
  return w;
}

template <class T>
BasicTensor<T> zero_bias(std::size_t n) {
  auto b = BasicTensor<T>::zeros({n});
  b.set_requires_grad(true);
  return b;
}

template <class T>
class DenseLayer {
 public:
  DenseLayer() = default;

  template <class Rng>
  DenseLayer(std::size_t in, std::size_t out, InitKind kind, Rng& rng)
      : weight_(init_uniform<T>({out, in}, in, out, kind, rng)), bias_(zero_bias<T>(out)) {}

  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }

  BasicTensor<T> forward(const BasicTensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != in_features()) {
      throw ShapeError("dense: expected (N," + std::to_string(in_features()) + "), got " + shape_str(x.shape()));
    }
    return add(matmul(x, transpose(weight_)), reshape(bias_, {1, out_features()}));
  }

  BasicTensor<T>& weight() { return weight_; }
  BasicTensor<T>& bias() { return bias_; }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
  }

  static std::size_t parameter_count(std::size_t in, std::size_t out) { return in * out + out; }

 private:
  BasicTensor<T> weight_;
  BasicTensor<T> bias_;
};

template <class T>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;

  // Square odd kernel, "same" padding.
  template <class Rng>
  Conv2dLayer(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, InitKind kind, Rng& rng)
      : weight_(init_uniform<T>({out, in, kernel, kernel}, in * kernel * kernel, out * kernel * kernel, kind, rng)),
        bias_(zero_bias<T>(out)),
        stride_(stride),
        padding_(kernel / 2) {
    if (kernel % 2 == 0) throw ValidationError("conv layer: kernel size must be odd");
  }

  BasicTensor<T> forward(const BasicTensor<T>& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

  std::size_t in_channels() const { return weight_.dim(1); }
  std::size_t out_channels() const { return weight_.dim(0); }
  std::size_t kernel() const { return weight_.dim(2); }
  BasicTensor<T>& weight() { return weight_; }
  BasicTensor<T>& bias() { return bias_; }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
  }

  static std::size_t parameter_count(std::size_t in, std::size_t out, std::size_t kernel) {
    return in * out * kernel * kernel + out;
  }

 private:
  BasicTensor<T> weight_;
  BasicTensor<T> bias_;
  std::size_t stride_ = 1;
  std::size_t padding_ = 0;
};

namespace detail {

inline std::size_t reduced_channels(std::size_t channels, std::size_t ratio) {
  if (ratio == 0 || channels % ratio != 0 || channels / ratio == 0) {
    throw ValidationError("attention: reduction ratio " + std::to_string(ratio) + " must divide " +
                          std::to_string(channels) + " channels");
  }
  return channels / ratio;
}

template <class T>
void saturate_dense(DenseLayer<T>& layer, T bias) {
  for (auto& v : layer.weight().mutable_data()) v = T(0);
  for (auto& v : layer.bias().mutable_data()) v = bias;
}

template <class T>
void require_channels(const char* block, const BasicTensor<T>& x, std::size_t channels) {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw ShapeError(std::string(block) + ": expected (N," + std::to_string(channels) + ",H,W), got " +
                     shape_str(x.shape()));
  }
}

}  // namespace detail

// Squeeze-and-excitation: sigmoid(fc2(relu(fc1(avgpool(x))))) scales channels.
template <class T>
class SEBlock {
 public:
  SEBlock() = default;

  template <class Rng>
  SEBlock(std::size_t channels, std::size_t ratio, Rng& rng)
      : channels_(channels),
        fc1_(channels, detail::reduced_channels(channels, ratio), InitKind::kRelu, rng),
        fc2_(channels / ratio, channels, InitKind::kGate, rng) {}

  // (N,C) gates in (0,1).
  BasicTensor<T> gate(const BasicTensor<T>& x) const {
    detail::require_channels("se", x, channels_);
    return sigmoid(fc2_.forward(relu(fc1_.forward(global_avg_pool(x)))));
  }

  BasicTensor<T> forward(const BasicTensor<T>& x) const {
    auto g = gate(x);
    return mul(x, reshape(g, {x.dim(0), channels_, 1, 1}));
  }

  // Zero gate weights, large gate bias: the block becomes the identity.
  void saturate(T bias = T(40)) { detail::saturate_dense(fc2_, bias); }

  DenseLayer<T>& fc1() { return fc1_; }
  DenseLayer<T>& fc2() { return fc2_; }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    fc1_.collect(prefix + ".fc1", out);
    fc2_.collect(prefix + ".fc2", out);
  }

  static std::size_t parameter_count(std::size_t c, std::size_t r) {
    const std::size_t h = detail::reduced_channels(c, r);
    return DenseLayer<T>::parameter_count(c, h) + DenseLayer<T>::parameter_count(h, c);
  }

 private:
  std::size_t channels_ = 0;
  DenseLayer<T> fc1_;
  DenseLayer<T> fc2_;
};

// Channel attention (shared MLP over avg- and max-pooled descriptors) followed
// by spatial attention (k x k conv over channel-pooled maps).
template <class T>
class CBAMBlock {
 public:
  CBAMBlock() = default;

  template <class Rng>
  CBAMBlock(std::size_t channels, std::size_t ratio, std::size_t kernel, Rng& rng)
      : channels_(channels),
        fc1_(channels, detail::reduced_channels(channels, ratio), InitKind::kRelu, rng),
        fc2_(channels / ratio, channels, InitKind::kGate, rng),
        spatial_(2, 1, kernel, 1, InitKind::kGate, rng) {}

  BasicTensor<T> channel_gate(const BasicTensor<T>& x) const {
    detail::require_channels("cbam", x, channels_);
    auto mlp = [this](const BasicTensor<T>& d) { return fc2_.forward(relu(fc1_.forward(d))); };
    auto g = sigmoid(add(mlp(global_avg_pool(x)), mlp(global_max_pool(x))));
    return reshape(g, {x.dim(0), channels_, 1, 1});
  }

  BasicTensor<T> spatial_gate(const BasicTensor<T>& x) const { return sigmoid(spatial_.forward(channel_pool(x))); }

  BasicTensor<T> forward(const BasicTensor<T>& x) const {
    auto refined = mul(x, channel_gate(x));
    return mul(refined, spatial_gate(refined));
  }

  void saturate(T bias = T(40)) {
    detail::saturate_dense(fc2_, bias);
    for (auto& v : spatial_.weight().mutable_data()) v = T(0);
    for (auto& v : spatial_.bias().mutable_data()) v = bias;
  }

  DenseLayer<T>& fc2() { return fc2_; }
  Conv2dLayer<T>& spatial() { return spatial_; }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    fc1_.collect(prefix + ".mlp.fc1", out);
    fc2_.collect(prefix + ".mlp.fc2", out);
    spatial_.collect(prefix + ".spatial", out);
  }

  static std::size_t parameter_count(std::size_t c, std::size_t r, std::size_t k) {
    return SEBlock<T>::parameter_count(c, r) + Conv2dLayer<T>::parameter_count(2, 1, k);
  }

 private:
  std::size_t channels_ = 0;
  DenseLayer<T> fc1_;
  DenseLayer<T> fc2_;
  Conv2dLayer<T> spatial_;
};

enum class AttentionMode { kNone, kSE, kCBAM };

inline std::string_view to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kNone: return "none";
    case AttentionMode::kSE: return "se";
    case AttentionMode::kCBAM: return "cbam";
  }
  return "?";
}

inline AttentionMode parse_attention_mode(std::string_view s) {
  if (s == "none") return AttentionMode::kNone;
  if (s == "se") return AttentionMode::kSE;
  if (s == "cbam") return AttentionMode::kCBAM;
  throw ValidationError("unknown attention mode '" + std::string(s) + "' (expected none|se|cbam)");
}

struct ResidualBlockOptions {
  std::size_t in_channels = 16;
  std::size_t out_channels = 16;
  std::size_t stride = 1;
  AttentionMode attention = AttentionMode::kSE;
  std::size_t ratio = 16;
  std::size_t cbam_kernel = 7;
};

// relu(shortcut(x) + attend(conv2(relu(conv1(x))))), with a strided 1x1
// projection shortcut when stride or width changes.
template <class T>
class SEResidualBlock {
 public:
  SEResidualBlock() = default;

  template <class Rng>
  SEResidualBlock(const ResidualBlockOptions& opt, Rng& rng)
      : opt_(opt),
        conv1_(opt.in_channels, opt.out_channels, 3, opt.stride, InitKind::kRelu, rng),
        conv2_(opt.out_channels, opt.out_channels, 3, 1, InitKind::kRelu, rng) {
    if (opt.stride != 1 || opt.in_channels != opt.out_channels) {
      shortcut_.emplace(opt.in_channels, opt.out_channels, 1, opt.stride, InitKind::kRelu, rng);
    }
    if (opt.attention == AttentionMode::kSE) se_.emplace(opt.out_channels, opt.ratio, rng);
    if (opt.attention == AttentionMode::kCBAM) cbam_.emplace(opt.out_channels, opt.ratio, opt.cbam_kernel, rng);
  }

  BasicTensor<T> branch(const BasicTensor<T>& x) const {
    auto y = conv2_.forward(relu(conv1_.forward(x)));
    if (se_) return se_->forward(y);
    if (cbam_) return cbam_->forward(y);
    return y;
  }

  BasicTensor<T> forward(const BasicTensor<T>& x) const {
    detail::require_channels("residual block", x, opt_.in_channels);
    auto skip = shortcut_ ? shortcut_->forward(x) : x;
    auto res = branch(x);
    if (skip.shape() != res.shape()) {
      throw ShapeError("residual block: shortcut " + shape_str(skip.shape()) + " vs branch " + shape_str(res.shape()));
    }
    return relu(add(skip, res));
  }

  void saturate_attention(T bias = T(40)) {
    if (se_) se_->saturate(bias);
    if (cbam_) cbam_->saturate(bias);
  }

  const ResidualBlockOptions& options() const { return opt_; }
  Conv2dLayer<T>& conv1() { return conv1_; }
  Conv2dLayer<T>& conv2() { return conv2_; }
  std::optional<SEBlock<T>>& se() { return se_; }
  std::optional<CBAMBlock<T>>& cbam() { return cbam_; }

  void collect(const std::string& prefix, ParameterList<T>& out) const {
    conv1_.collect(prefix + ".conv1", out);
    conv2_.collect(prefix + ".conv2", out);
    if (shortcut_) shortcut_->collect(prefix + ".shortcut", out);
    if (se_) se_->collect(prefix + ".se", out);
    if (cbam_) cbam_->collect(prefix + ".cbam", out);
  }

  static std::size_t parameter_count(const ResidualBlockOptions& o) {
    std::size_t n = Conv2dLayer<T>::parameter_count(o.in_channels, o.out_channels, 3) +
                    Conv2dLayer<T>::parameter_count(o.out_channels, o.out_channels, 3);
    if (o.stride != 1 || o.in_channels != o.out_channels) n += Conv2dLayer<T>::parameter_count(o.in_channels, o.out_channels, 1);
    if (o.attention == AttentionMode::kSE) n += SEBlock<T>::parameter_count(o.out_channels, o.ratio);
    if (o.attention == AttentionMode::kCBAM) n += CBAMBlock<T>::parameter_count(o.out_channels, o.ratio, o.cbam_kernel);
    return n;
  }

 private:
  ResidualBlockOptions opt_;
  Conv2dLayer<T> conv1_;
  Conv2dLayer<T> conv2_;
  std::optional<Conv2dLayer<T>> shortcut_;
  std::optional<SEBlock<T>> se_;
  std::optional<CBAMBlock<T>> cbam_;
};

}  // namespace affectnet
