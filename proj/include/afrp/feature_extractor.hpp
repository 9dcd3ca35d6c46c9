#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "afrp/archive.hpp"
#include "afrp/nn.hpp"

namespace afrp {

/// A fixed mapping from image batches [N,3,S,S] to feature tensors. Its
/// parameters are never updated by recovery training, but gradients flow
/// through it to the input images.
template <class T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual std::string id() const = 0;
  /// Identity-bearing features used by the identity-preserving loss.
  virtual Var<T> features(const Var<T>& images) const = 0;
  /// Feature maps [N,C,H,W] used for Gram-matrix style statistics.
  virtual std::vector<Var<T>> style_layers(const Var<T>& images) const { return {features(images)}; }
  virtual Shape output_shape(int image_size) const = 0;
  virtual bool accepts(int image_size) const = 0;
};

/// psi(x) = x. Reduces the identity loss to the pixel loss.
template <class T>
class IdentityExtractor final : public FeatureExtractor<T> {
 public:
  std::string id() const override { return "identity"; }
  Var<T> features(const Var<T>& images) const override { return images; }
  Shape output_shape(int s) const override { return {3, s, s}; }
  bool accepts(int s) const override { return s > 0; }
};

/// Stack of 4x4 stride-2 convolutions with leaky ReLU. Optionally ends in a
/// flattened linear embedding. All layers are exposed for style statistics;
/// `feature_layer` (1-based) selects the map returned by features().
struct ConvExtractorConfig {
  int input_size = 64;
  std::vector<int> channels{16, 32, 64, 64};
  int feature_layer = 3;
  int embedding_dim = 128;  // 0 disables the embedding head
  int style_layer_count = 3;  // leading layers exposed to the style metric

  void validate() const {
    if (channels.empty()) throw ConfigError("extractor needs at least one layer");
    if (input_size % (1 << channels.size()) != 0) throw ConfigError("extractor input size not divisible by 2^layers");
    if (feature_layer < 1 || feature_layer > static_cast<int>(channels.size()))
      throw ConfigError("extractor feature_layer out of range");
    if (embedding_dim < 0) throw ConfigError("embedding_dim must be >= 0");
    if (style_layer_count < 1 || style_layer_count > static_cast<int>(channels.size()))
      throw ConfigError("extractor style_layer_count out of range");
  }
  friend bool operator==(const ConvExtractorConfig&, const ConvExtractorConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ConvExtractorConfig& c) {
  j = {{"input_size", c.input_size}, {"channels", c.channels}, {"feature_layer", c.feature_layer},
       {"embedding_dim", c.embedding_dim}, {"style_layer_count", c.style_layer_count}};
}
inline void from_json(const nlohmann::json& j, ConvExtractorConfig& c) {
  c.input_size = j.at("input_size").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.feature_layer = j.at("feature_layer").get<int>();
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.style_layer_count = j.value("style_layer_count", std::min<int>(3, static_cast<int>(c.channels.size())));
}

template <class T>
class ConvExtractor final : public FeatureExtractor<T> {
 public:
  ConvExtractor(ConvExtractorConfig cfg, std::uint64_t seed, std::string id)
      : cfg_(std::move(cfg)), id_(std::move(id)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, hash_string("conv-extractor")));
    int in = 3;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
      convs_.emplace_back(params_, "conv" + std::to_string(i + 1), in, cfg_.channels[i], 4, 2, 1, rng);
      in = cfg_.channels[i];
    }
    const int s = cfg_.input_size >> cfg_.channels.size();
    if (cfg_.embedding_dim > 0) embed_ = nn::Linear<T>(params_, "embed", in * s * s, cfg_.embedding_dim, rng);
  }

  ConvExtractor(const ConvExtractor&) = delete;
  ConvExtractor& operator=(const ConvExtractor&) = delete;
  ConvExtractor(ConvExtractor&&) = default;

  std::string id() const override { return id_; }
  const ConvExtractorConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  std::vector<Var<T>> style_layers(const Var<T>& images) const override {
    check(images);
    std::vector<Var<T>> out;
    Var<T> h = images;
    for (int i = 0; i < cfg_.style_layer_count; ++i) {
      h = ops::leaky_relu(convs_[i](h), T(0.2));
      out.push_back(h);
    }
    return out;
  }

  Var<T> features(const Var<T>& images) const override {
    check(images);
    Var<T> h = images;
    for (int i = 0; i < cfg_.feature_layer; ++i) h = ops::leaky_relu(convs_[i](h), T(0.2));
    return h;
  }

  /// Flattened embedding of the deepest layer. Requires embedding_dim > 0.
  Var<T> embed(const Var<T>& images) const {
    detail::require(cfg_.embedding_dim > 0, "extractor has no embedding head");
    check(images);
    Var<T> h = images;
    for (const auto& c : convs_) h = ops::leaky_relu(c(h), T(0.2));
    return ops::leaky_relu(embed_(ops::flatten(h)), T(0.2));
  }

  Shape output_shape(int s) const override {
    return {cfg_.channels[cfg_.feature_layer - 1], s >> cfg_.feature_layer, s >> cfg_.feature_layer};
  }
  bool accepts(int s) const override { return s == cfg_.input_size; }

  void freeze() { params_.set_trainable(false); }

 private:
  void check(const Var<T>& images) const {
    detail::require(images.shape().size() == 4 && images.dim(1) == 3 && accepts(images.dim(2)) &&
                        images.dim(2) == images.dim(3),
                    "extractor '" + id_ + "' expects [N,3," + std::to_string(cfg_.input_size) + "," +
                        std::to_string(cfg_.input_size) + "] images, got " + shape_str(images.shape()));
  }

  ConvExtractorConfig cfg_;
  std::string id_;
  nn::ParamStore<T> params_;
  std::vector<nn::Conv2d<T>> convs_;
  nn::Linear<T> embed_;
};

}  // namespace afrp
