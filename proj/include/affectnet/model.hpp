#pragma once

// Multi-task affect network: SE-residual backbone, dual global-pool encoder
// (avg and max branches, each ReLU then dropout, concatenated), and three
// single-layer task heads: valence/arousal (tanh, 2), AU logits (8),
// expression logits (7).

#include <cmath>
#include <concepts>
#include <cstdio>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "affectnet/config.hpp"
#include "affectnet/container.hpp"
#include "affectnet/error.hpp"
#include "affectnet/nn.hpp"
#include "affectnet/objectives.hpp"
#include "affectnet/tensor.hpp"

namespace affectnet {

inline constexpr const char* kCheckpointFormat = "mtanet-ckpt/1";

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t blocks_per_stage = 2;
  std::size_t stem_stride = 2;
  double dropout = 0.5;
  std::size_t se_ratio = 16;
  AttentionMode attention = AttentionMode::kSE;
  std::size_t cbam_kernel = 7;
  std::size_t encoder_proj_dim = 0;  // 0: heads read the 2*D concatenation directly
  std::size_t head_depth = 1;        // dense layers per head

  std::size_t feature_dim() const { return stage_channels.back(); }
  std::size_t concat_width() const { return 2 * feature_dim(); }
  std::size_t encoder_width() const { return encoder_proj_dim ? encoder_proj_dim : concat_width(); }

  void validate() const {
    if (in_channels == 0 || height == 0 || width == 0) throw ValidationError("model: input size must be positive");
    if (stage_channels.empty()) throw ValidationError("model: stage_channels must not be empty");
    if (blocks_per_stage == 0) throw ValidationError("model: blocks_per_stage must be >= 1");
    if (stem_stride == 0) throw ValidationError("model: stem_stride must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model: dropout must lie in [0,1)");
    if (head_depth == 0) throw ValidationError("model: head_depth must be >= 1");
    if (cbam_kernel % 2 == 0) throw ValidationError("model: cbam_kernel must be odd");
    if (attention != AttentionMode::kNone) {
      for (std::size_t c : stage_channels) detail::reduced_channels(c, se_ratio);
    }
  }

  static ModelConfig from(const KeyValues& kv, const std::string& prefix = "model.") {
    ModelConfig c;
    c.in_channels = kv.get_size(prefix + "in_channels", c.in_channels);
    c.height = kv.get_size(prefix + "height", c.height);
    c.width = kv.get_size(prefix + "width", c.width);
    c.stage_channels = kv.get_list<std::size_t>(prefix + "stage_channels", c.stage_channels);
    c.blocks_per_stage = kv.get_size(prefix + "blocks_per_stage", c.blocks_per_stage);
    c.stem_stride = kv.get_size(prefix + "stem_stride", c.stem_stride);
    c.dropout = kv.get_double(prefix + "dropout", c.dropout);
    c.se_ratio = kv.get_size(prefix + "se_ratio", c.se_ratio);
    c.attention = parse_attention_mode(kv.get_string(prefix + "attention", std::string(to_string(c.attention))));
    c.cbam_kernel = kv.get_size(prefix + "cbam_kernel", c.cbam_kernel);
    c.encoder_proj_dim = kv.get_size(prefix + "encoder_proj_dim", c.encoder_proj_dim);
    c.head_depth = kv.get_size(prefix + "head_depth", c.head_depth);
    c.validate();
    return c;
  }

  std::vector<std::pair<std::string, std::string>> to_pairs(const std::string& prefix = "model.") const {
    std::string stages;
    for (std::size_t i = 0; i < stage_channels.size(); ++i) stages += (i ? "," : "") + std::to_string(stage_channels[i]);
    char drop[32];
    std::snprintf(drop, sizeof drop, "%.17g", dropout);
    return {{prefix + "in_channels", std::to_string(in_channels)},
            {prefix + "height", std::to_string(height)},
            {prefix + "width", std::to_string(width)},
            {prefix + "stage_channels", stages},
            {prefix + "blocks_per_stage", std::to_string(blocks_per_stage)},
            {prefix + "stem_stride", std::to_string(stem_stride)},
            {prefix + "dropout", drop},
            {prefix + "se_ratio", std::to_string(se_ratio)},
            {prefix + "attention", std::string(to_string(attention))},
            {prefix + "cbam_kernel", std::to_string(cbam_kernel)},
            {prefix + "encoder_proj_dim", std::to_string(encoder_proj_dim)},
            {prefix + "head_depth", std::to_string(head_depth)}};
  }

  // Options for every residual block in definition order.
  std::vector<ResidualBlockOptions> block_layout() const {
    std::vector<ResidualBlockOptions> out;
    std::size_t in = stage_channels.front();
    for (std::size_t s = 0; s < stage_channels.size(); ++s)
      for (std::size_t b = 0; b < blocks_per_stage; ++b) {
        ResidualBlockOptions o;
        o.in_channels = in;
        o.out_channels = stage_channels[s];
        o.stride = (b == 0 && s > 0) ? 2 : 1;
        o.attention = attention;
        o.ratio = se_ratio;
        o.cbam_kernel = cbam_kernel;
        out.push_back(o);
        in = stage_channels[s];
      }
    return out;
  }
};

struct ParameterInfo {
  std::string name;
  Shape shape;
  std::size_t count;
};

template <class T>
class MTANet {
 public:
  template <class Rng>
    requires std::uniform_random_bit_generator<std::remove_reference_t<Rng>>
  MTANet(const ModelConfig& config, Rng&& rng) : config_(config) {
    config_.validate();
    stem_ = Conv2dLayer<T>(config_.in_channels, config_.stage_channels.front(), 3, config_.stem_stride, InitKind::kRelu, rng);
    for (const auto& opt : config_.block_layout()) blocks_.emplace_back(opt, rng);
    std::size_t width = config_.concat_width();
    if (config_.encoder_proj_dim) {
      proj_.emplace(width, config_.encoder_proj_dim, InitKind::kRelu, rng);
      width = config_.encoder_proj_dim;
    }
    va_head_ = make_head(width, 2, rng);
    au_head_ = make_head(width, kNumAUs, rng);
    expr_head_ = make_head(width, kNumExpressions, rng);
  }

  explicit MTANet(const ModelConfig& config, std::uint64_t seed = 0) : MTANet(config, std::mt19937_64(seed)) {}

  const ModelConfig& config() const { return config_; }

  BasicTensor<T> backbone(const BasicTensor<T>& images) const {
    auto f = relu(stem_.forward(images));
    for (const auto& block : blocks_) f = block.forward(f);
    return f;
  }

  // (N, encoder_width) shared representation.
  template <class Rng>
  BasicTensor<T> encode(const BasicTensor<T>& images, bool training, Rng& rng) const {
    check_input(images);
    const auto f = backbone(images);
    const auto avg = dropout(relu(global_avg_pool(f)), config_.dropout, training, rng);
    const auto max = dropout(relu(global_max_pool(f)), config_.dropout, training, rng);
    auto e = concat(avg, max);
    if (proj_) e = relu(proj_->forward(e));
    return e;
  }

  template <class Rng>
  ModelOutput<T> forward(const BasicTensor<T>& images, bool training, Rng& rng) const {
    const auto e = encode(images, training, rng);
    return {tanh(run_head(va_head_, e)), run_head(au_head_, e), run_head(expr_head_, e)};
  }

  // Inference: dropout off, no randomness consumed.
  ModelOutput<T> predict(const BasicTensor<T>& images) const {
    std::mt19937_64 unused(0);
    return forward(images, false, unused);
  }

  LossWeights<T>& loss_weights() { return loss_weights_; }
  const LossWeights<T>& loss_weights() const { return loss_weights_; }

  // Definition order: backbone, encoder, heads, then (optionally) loss weights.
  ParameterList<T> parameters(bool include_loss_weights = true) const {
    ParameterList<T> out;
    stem_.collect("backbone.stem", out);
    const std::size_t per_stage = config_.blocks_per_stage;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i].collect("backbone.stage" + std::to_string(i / per_stage) + ".block" + std::to_string(i % per_stage), out);
    }
    if (proj_) proj_->collect("encoder.proj", out);
    collect_head(va_head_, "heads.va", out);
    collect_head(au_head_, "heads.au", out);
    collect_head(expr_head_, "heads.expr", out);
    if (include_loss_weights) loss_weights_.collect("loss", out);
    return out;
  }

  std::vector<ParameterInfo> parameter_summary() const {
    std::vector<ParameterInfo> out;
    for (const auto& p : parameters()) out.push_back({p.name, p.value.shape(), p.value.numel()});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : parameters()) p.value.zero_grad();
  }

  void saturate_attention(T bias = T(40)) {
    for (auto& b : blocks_) b.saturate_attention(bias);
  }

  std::vector<SEResidualBlock<T>>& blocks() { return blocks_; }

  // Copies values of same-named, same-shaped parameters from `other`.
  template <class U>
  std::size_t copy_matching(const MTANet<U>& other) {
    std::size_t copied = 0;
    auto mine = parameters();
    for (const auto& theirs : other.parameters()) {
      for (auto& p : mine) {
        if (p.name != theirs.name || p.value.shape() != theirs.value.shape()) continue;
        auto dst = p.value.mutable_data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(theirs.value.data()[i]);
        ++copied;
      }
    }
    return copied;
  }

 private:
  template <class Rng>
  std::vector<DenseLayer<T>> make_head(std::size_t width, std::size_t out, Rng& rng) {
    std::vector<DenseLayer<T>> layers;
    for (std::size_t d = 1; d < config_.head_depth; ++d) layers.emplace_back(width, width, InitKind::kRelu, rng);
    layers.emplace_back(width, out, InitKind::kGate, rng);
    return layers;
  }

  static BasicTensor<T> run_head(const std::vector<DenseLayer<T>>& head, BasicTensor<T> x) {
    for (std::size_t i = 0; i + 1 < head.size(); ++i) x = relu(head[i].forward(x));
    return head.back().forward(x);
  }

  static void collect_head(const std::vector<DenseLayer<T>>& head, const std::string& prefix, ParameterList<T>& out) {
    if (head.size() == 1) {
      head.front().collect(prefix, out);
      return;
    }
    for (std::size_t i = 0; i < head.size(); ++i) head[i].collect(prefix + ".layer" + std::to_string(i), out);
  }

  void check_input(const BasicTensor<T>& images) const {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.height || s[3] != config_.width) {
      throw ShapeError("model: expected images (N," + std::to_string(config_.in_channels) + "," +
                       std::to_string(config_.height) + "," + std::to_string(config_.width) + "), got " + shape_str(s));
    }
    for (T v : images.data())
      if (!std::isfinite(v)) throw ValidationError("model: non-finite input pixel");
  }

  ModelConfig config_;
  Conv2dLayer<T> stem_;
  std::vector<SEResidualBlock<T>> blocks_;
  std::optional<DenseLayer<T>> proj_;
  std::vector<DenseLayer<T>> va_head_, au_head_, expr_head_;
  LossWeights<T> loss_weights_;
};

// Closed-form parameter count for a config, independent of any instance.
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  std::size_t n = Conv2dLayer<float>::parameter_count(c.in_channels, c.stage_channels.front(), 3);
  for (const auto& o : c.block_layout()) n += SEResidualBlock<float>::parameter_count(o);
  std::size_t width = c.concat_width();
  if (c.encoder_proj_dim) {
    n += DenseLayer<float>::parameter_count(width, c.encoder_proj_dim);
    width = c.encoder_proj_dim;
  }
  for (std::size_t out : {std::size_t{2}, kNumAUs, kNumExpressions}) {
    n += (c.head_depth - 1) * DenseLayer<float>::parameter_count(width, width) +
         DenseLayer<float>::parameter_count(width, out);
  }
  return n + 3;  // loss weights
}

template <class T>
void save_checkpoint(const MTANet<T>& model, const std::string& path) {
  Container c;
  c.format = kCheckpointFormat;
  c.meta = model.config().to_pairs();
  for (const auto& p : model.parameters()) {
    c.tensors.push_back({p.name, p.value.shape(), std::vector<float>(p.value.data().begin(), p.value.data().end())});
  }
  write_container(path, c);
}

// Restores into a model built from `config`; any name or shape disagreement is
// reported against the first offending parameter.
template <class T = float>
MTANet<T> load_checkpoint(const std::string& path, const ModelConfig& config) {
  const Container c = read_container(path, kCheckpointFormat);
  MTANet<T> model(config);
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (i >= c.tensors.size()) throw ValidationError(path + ": parameter '" + p.name + "' missing from checkpoint");
    const auto& t = c.tensors[i];
    if (t.name != p.name) {
      throw ValidationError(path + ": parameter '" + p.name + "' expected at position " + std::to_string(i) +
                            ", checkpoint has '" + t.name + "'");
    }
    if (t.shape != p.value.shape()) {
      throw ValidationError(path + ": parameter '" + p.name + "' has shape " + shape_str(t.shape) +
                            " in checkpoint but " + shape_str(p.value.shape()) + " in config");
    }
    auto dst = p.value.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(t.values[k]);
  }
  if (c.tensors.size() > params.size()) {
    throw ValidationError(path + ": unexpected extra parameter '" + c.tensors[params.size()].name + "'");
  }
  return model;
}

// Rebuilds the model config echoed in the checkpoint manifest.
inline ModelConfig checkpoint_config(const std::string& path) {
  const Container c = read_container(path, kCheckpointFormat);
  KeyValues kv;
  for (const auto& [k, v] : c.meta) kv.set(k, v);
  return ModelConfig::from(kv);
}

}  // namespace affectnet
