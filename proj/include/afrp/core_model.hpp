#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "afrp/archive.hpp"
#include "afrp/attributes.hpp"
#include "afrp/image.hpp"
#include "afrp/nn.hpp"
#include "json.hpp"

namespace afrp {

/// Face recovery network architecture. Encoder and decoder use 4x4 kernels
/// with stride 2.
struct FrnConfig {
  int input_size = 64;
  std::vector<int> encoder_channels{16, 32, 64, 128};
  int residual_blocks_per_skip = 3;
  int attribute_dim = static_cast<int>(kAttributeCount);
  /// Encoder depths (1-based) whose output is aligned by an STN. A value equal
  /// to the encoder depth places the STN at the bottleneck.
  std::vector<int> stn_stages{1, 4};
  int stn_hidden = 32;
  /// Std-dev of the STN's final layer weights; its bias starts at identity.
  double stn_init_scale = 1e-3;

  static constexpr int kKernel = 4;
  static constexpr int kStride = 2;

  int depth() const { return static_cast<int>(encoder_channels.size()); }
  int stage_spatial(int stage) const { return input_size >> stage; }
  int bottleneck_spatial() const { return stage_spatial(depth()); }

  void validate() const {
    if (encoder_channels.empty()) throw ConfigError("FRN needs at least one encoder stage");
    for (int c : encoder_channels)
      if (c <= 0) throw ConfigError("FRN encoder channel counts must be positive");
    if (input_size <= 0 || depth() >= 30 || input_size % (1 << depth()) != 0)
      throw ConfigError("FRN input size " + std::to_string(input_size) + " is not divisible by 2^" +
                        std::to_string(depth()));
    if (residual_blocks_per_skip < 1) throw ConfigError("residual_blocks_per_skip must be >= 1");
    if (attribute_dim != static_cast<int>(kAttributeCount)) throw ConfigError("attribute_dim must be 20");
    for (std::size_t i = 0; i < stn_stages.size(); ++i) {
      const int s = stn_stages[i];
      if (s < 1 || s > depth()) throw ConfigError("STN stage " + std::to_string(s) + " outside encoder depth");
      if (stage_spatial(s) < 4) throw ConfigError("STN stage " + std::to_string(s) + " has spatial size below 4x4");
      if (std::count(stn_stages.begin(), stn_stages.end(), s) > 1) throw ConfigError("duplicate STN stage");
    }
    if (stn_hidden < 1) throw ConfigError("stn_hidden must be positive");
  }

  friend bool operator==(const FrnConfig&, const FrnConfig&) = default;
};

/// Conditional discriminator. Convolutions halve the resolution (4x4,
/// stride 2) until 4x4 and then use 3x3 stride 1. The attribute vector is
/// tiled over the feature maps produced by conv layer
/// `attribute_injection_layer` (1-based) and concatenated along channels.
struct DnConfig {
  int input_size = 64;
  std::vector<int> conv_channels{16, 32, 64, 128, 128};
  int attribute_injection_layer = 4;
  std::vector<int> fc_sizes{64, 1};
  int attribute_dim = static_cast<int>(kAttributeCount);
  double output_margin = 1e-6;

  int conv_layers() const { return static_cast<int>(conv_channels.size()); }

  void validate() const {
    if (conv_channels.empty()) throw ConfigError("DN needs at least one conv layer");
    if (attribute_injection_layer < 1 || attribute_injection_layer > conv_layers())
      throw ConfigError("attribute_injection_layer must lie in [1, " + std::to_string(conv_layers()) + "]");
    if (fc_sizes.empty() || fc_sizes.back() != 1) throw ConfigError("DN fc_sizes must end in 1");
    if (input_size < 4 || (input_size & (input_size - 1)) != 0) throw ConfigError("DN input size must be a power of two >= 4");
    if (attribute_dim != static_cast<int>(kAttributeCount)) throw ConfigError("attribute_dim must be 20");
    if (!(output_margin > 0 && output_margin < 0.5)) throw ConfigError("output_margin must lie in (0, 0.5)");
  }

  friend bool operator==(const DnConfig&, const DnConfig&) = default;
};

inline void to_json(nlohmann::json& j, const FrnConfig& c) {
  j = {{"input_size", c.input_size},           {"encoder_channels", c.encoder_channels},
       {"residual_blocks_per_skip", c.residual_blocks_per_skip}, {"attribute_dim", c.attribute_dim},
       {"stn_stages", c.stn_stages},           {"stn_hidden", c.stn_hidden},
       {"stn_init_scale", c.stn_init_scale}};
}
inline void from_json(const nlohmann::json& j, FrnConfig& c) {
  FrnConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.encoder_channels = j.value("encoder_channels", d.encoder_channels);
  c.residual_blocks_per_skip = j.value("residual_blocks_per_skip", d.residual_blocks_per_skip);
  c.attribute_dim = j.value("attribute_dim", d.attribute_dim);
  c.stn_stages = j.value("stn_stages", d.stn_stages);
  c.stn_hidden = j.value("stn_hidden", d.stn_hidden);
  c.stn_init_scale = j.value("stn_init_scale", d.stn_init_scale);
}
inline void to_json(nlohmann::json& j, const DnConfig& c) {
  j = {{"input_size", c.input_size},       {"conv_channels", c.conv_channels},
       {"attribute_injection_layer", c.attribute_injection_layer}, {"fc_sizes", c.fc_sizes},
       {"attribute_dim", c.attribute_dim}, {"output_margin", c.output_margin}};
}
inline void from_json(const nlohmann::json& j, DnConfig& c) {
  DnConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.conv_channels = j.value("conv_channels", d.conv_channels);
  c.attribute_injection_layer = j.value("attribute_injection_layer", d.attribute_injection_layer);
  c.fc_sizes = j.value("fc_sizes", d.fc_sizes);
  c.attribute_dim = j.value("attribute_dim", d.attribute_dim);
  c.output_margin = j.value("output_margin", d.output_margin);
}

/// Spatial transformer: a localization network predicts a 2x3 affine map
/// from the features, which are then bilinearly resampled on the same grid.
template <class T>
class Stn {
 public:
  Stn() = default;
  Stn(nn::ParamStore<T>& store, const std::string& name, int channels, int spatial, int hidden, double init_scale,
      Rng& rng)
      : conv_(store, name + ".loc_conv", channels, kLocChannels, 3, 1, 1, rng),
        fc1_(store, name + ".loc_fc1", kLocChannels * 16, hidden, rng),
        fc2_(store, name + ".loc_fc2", hidden, 6, rng, init_scale),
        pool_(spatial / 4) {
    detail::require<ConfigError>(spatial >= 4 && spatial % 4 == 0, "STN needs spatial size >= 4 divisible by 4");
    set_identity_bias();
  }

  Var<T> theta(const Var<T>& x) const {
    auto h = ops::relu(conv_(x));
    h = ops::flatten(ops::avg_pool(h, pool_));
    return fc2_(ops::relu(fc1_(h)));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::affine_sample(x, theta(x)); }

  /// Forces the predicted transform to identity for every input.
  void set_identity() {
    fc2_.weight.mutable_value().fill(T(0));
    set_identity_bias();
  }

  const Var<T>& output_weight() const { return fc2_.weight; }
  const Var<T>& output_bias() const { return fc2_.bias; }

 private:
  static constexpr int kLocChannels = 8;

  void set_identity_bias() {
    auto& b = fc2_.bias.mutable_value();
    const T id[6] = {1, 0, 0, 0, 1, 0};
    for (int i = 0; i < 6; ++i) b[i] = id[i];
  }

  nn::Conv2d<T> conv_;
  nn::Linear<T> fc1_, fc2_;
  int pool_ = 1;
};

namespace detail {
template <class T>
void check_finite(const Var<T>& v, const std::string& where) {
  if (!v.value().all_finite())
    throw NumericError("non-finite activations at " + where + " (shape " + shape_str(v.shape()) +
                       ", max |x| before failure unknown)");
}

template <class T>
void check_batch(const Var<T>& images, const Var<T>& attrs, int size, const char* who) {
  require(images.shape().size() == 4 && images.dim(1) == 3,
          std::string(who) + ": images must be [N,3,H,W], got " + shape_str(images.shape()));
  require(attrs.shape().size() == 2 && attrs.dim(1) == static_cast<int>(kAttributeCount),
          std::string(who) + ": attributes must be [N,20], got " + shape_str(attrs.shape()));
  require(images.dim(0) == attrs.dim(0), std::string(who) + ": batch size mismatch (" + std::to_string(images.dim(0)) +
                                             " images, " + std::to_string(attrs.dim(0)) + " attribute vectors)");
  require(images.dim(2) == size && images.dim(3) == size,
          std::string(who) + ": expected " + std::to_string(size) + "x" + std::to_string(size) + " images, got " +
              std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)));
}
}  // namespace detail

/// Generator: encoder of stride-2 convolutions with STN alignment, skip
/// connections through residual blocks, attribute concatenation at the
/// bottleneck and a transposed-convolution decoder with sigmoid output.
template <class T>
class Frn {
 public:
  Frn(FrnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, hash_string("frn")));
    const int D = cfg_.depth();
    const auto& ch = cfg_.encoder_channels;
    int in_ch = 3;
    for (int s = 1; s <= D; ++s) {
      const std::string name = "enc" + std::to_string(s);
      enc_conv_.emplace_back(params_, name + ".conv", in_ch, ch[s - 1], FrnConfig::kKernel, FrnConfig::kStride, 1, rng);
      enc_norm_.emplace_back(params_, name + ".norm", ch[s - 1]);
      in_ch = ch[s - 1];
    }
    for (int s : cfg_.stn_stages)
      stns_.emplace_back(s, Stn<T>(params_, "stn" + std::to_string(s), ch[s - 1], cfg_.stage_spatial(s), cfg_.stn_hidden,
                                   cfg_.stn_init_scale, rng));
    std::sort(stns_.begin(), stns_.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    // Residual paths for every encoder level; level D is the bottleneck.
    skips_.resize(D);
    for (int s = 1; s <= D; ++s)
      for (int b = 0; b < cfg_.residual_blocks_per_skip; ++b)
        skips_[s - 1].emplace_back(params_, "skip" + std::to_string(s) + ".res" + std::to_string(b), ch[s - 1], rng);
    for (int s = D; s >= 1; --s) {
      const int din = s == D ? ch[D - 1] + cfg_.attribute_dim : 2 * ch[s - 1];
      const int dout = s == 1 ? 3 : ch[s - 2];
      dec_.emplace_back(params_, "dec" + std::to_string(s), din, dout, FrnConfig::kKernel, FrnConfig::kStride, 1, rng);
    }
  }

  Frn(const Frn&) = delete;
  Frn& operator=(const Frn&) = delete;
  Frn(Frn&&) = default;
  Frn& operator=(Frn&&) = default;

  const FrnConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  /// portraits: [N,3,S,S] in [0,1]; attrs: [N,20]. Returns [N,3,S,S] in [0,1].
  Var<T> forward(const Var<T>& portraits, const Var<T>& attrs) const {
    detail::check_batch(portraits, attrs, cfg_.input_size, "frn_forward");
    const int D = cfg_.depth();
    std::vector<Var<T>> levels;
    Var<T> h = portraits;
    for (int s = 1; s <= D; ++s) {
      h = ops::leaky_relu(enc_norm_[s - 1](enc_conv_[s - 1](h)), T(0.2));
      for (const auto& [stage, stn] : stns_)
        if (stage == s) h = stn(h);
      levels.push_back(h);
    }
    auto residual = [&](int s) {
      Var<T> r = levels[s - 1];
      for (const auto& block : skips_[s - 1]) r = block(r);
      return r;
    };
    Var<T> bottleneck = residual(D);
    detail::check_finite(bottleneck, "bottleneck");
    const int bs = cfg_.bottleneck_spatial();
    Var<T> x = ops::concat_channels(bottleneck, ops::tile_spatial(attrs, bs, bs));
    for (int i = 0; i < D; ++i) {
      const int s = D - i;
      x = dec_[i](x);
      if (s > 1) {
        x = ops::relu(x);
        x = ops::concat_channels(x, residual(s - 1));
      }
    }
    x = ops::sigmoid(x);
    detail::check_finite(x, "frn output");
    return x;
  }

  std::vector<Stn<T>*> stns() {
    std::vector<Stn<T>*> out;
    for (auto& [_, s] : stns_) out.push_back(&s);
    return out;
  }

 private:
  FrnConfig cfg_;
  nn::ParamStore<T> params_;
  std::vector<nn::Conv2d<T>> enc_conv_;
  std::vector<nn::InstanceNorm<T>> enc_norm_;
  std::vector<std::pair<int, Stn<T>>> stns_;
  std::vector<std::vector<nn::ResidualBlock<T>>> skips_;
  std::vector<nn::ConvTranspose2d<T>> dec_;
};

template <class T>
class Dn {
 public:
  Dn(DnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, hash_string("dn")));
    int in_ch = 3, spatial = cfg_.input_size;
    for (int l = 1; l <= cfg_.conv_layers(); ++l) {
      const bool down = spatial > 4;
      convs_.emplace_back(params_, "conv" + std::to_string(l), in_ch, cfg_.conv_channels[l - 1], down ? 4 : 3,
                          down ? 2 : 1, 1, rng);
      if (down) spatial /= 2;
      in_ch = cfg_.conv_channels[l - 1];
      if (l == cfg_.attribute_injection_layer) {
        inject_spatial_ = spatial;
        in_ch += cfg_.attribute_dim;
      }
    }
    int width = in_ch * spatial * spatial;
    for (std::size_t i = 0; i < cfg_.fc_sizes.size(); ++i) {
      fcs_.emplace_back(params_, "fc" + std::to_string(i + 1), width, cfg_.fc_sizes[i], rng);
      width = cfg_.fc_sizes[i];
    }
  }

  Dn(const Dn&) = delete;
  Dn& operator=(const Dn&) = delete;
  Dn(Dn&&) = default;
  Dn& operator=(Dn&&) = default;

  const DnConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  int injection_spatial() const { return inject_spatial_; }

  /// Returns [N,1] probabilities strictly inside (0,1).
  Var<T> forward(const Var<T>& images, const Var<T>& attrs) const {
    detail::check_batch(images, attrs, cfg_.input_size, "dn_forward");
    Var<T> h = images;
    for (int l = 1; l <= cfg_.conv_layers(); ++l) {
      h = ops::leaky_relu(convs_[l - 1](h), T(0.2));
      if (l == cfg_.attribute_injection_layer)
        h = ops::concat_channels(h, ops::tile_spatial(attrs, inject_spatial_, inject_spatial_));
    }
    h = ops::flatten(h);
    for (std::size_t i = 0; i < fcs_.size(); ++i) {
      h = fcs_[i](h);
      if (i + 1 < fcs_.size()) h = ops::leaky_relu(h, T(0.2));
    }
    auto p = ops::squash_probability(h, static_cast<T>(cfg_.output_margin));
    detail::check_finite(p, "dn output");
    return p;
  }

 private:
  DnConfig cfg_;
  nn::ParamStore<T> params_;
  std::vector<nn::Conv2d<T>> convs_;
  std::vector<nn::Linear<T>> fcs_;
  int inject_spatial_ = 0;
};

template <class T>
Frn<T> build_frn(const FrnConfig& cfg, std::uint64_t seed) {
  return Frn<T>(cfg, seed);
}

template <class T>
Dn<T> build_dn(const DnConfig& cfg, std::uint64_t seed) {
  return Dn<T>(cfg, seed);
}

template <class T>
Var<T> frn_forward(const Frn<T>& frn, const Var<T>& portraits, const Var<T>& attrs) {
  return frn.forward(portraits, attrs);
}

template <class T>
Var<T> dn_forward(const Dn<T>& dn, const Var<T>& images, const Var<T>& attrs) {
  return dn.forward(images, attrs);
}

/// Runs the generator without recording a graph on image/attribute lists.
template <class T>
std::vector<FaceImage> recover_images(const Frn<T>& frn, std::span<const FaceImage> portraits,
                                      std::span<const AttributeVector> attrs) {
  NoGradGuard guard;
  auto x = Var<T>::leaf(images_to_tensor<T>(portraits));
  auto a = Var<T>::leaf(attributes_to_tensor<T>(attrs));
  return tensor_to_images(frn.forward(x, a).value());
}

struct ScheduleState {
  double lambda = 1e-2;
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const ScheduleState&, const ScheduleState&) = default;
};

inline void to_json(nlohmann::json& j, const ScheduleState& s) {
  j = {{"lambda", s.lambda}, {"step", s.step}, {"epoch", s.epoch}, {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, ScheduleState& s) {
  s.lambda = j.at("lambda").get<double>();
  s.step = j.at("step").get<std::int64_t>();
  s.epoch = j.at("epoch").get<std::int64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
}

/// Generator and discriminator parameters with their configs and schedule.
template <class T>
struct ModelBundle {
  Frn<T> frn;
  Dn<T> dn;
  ScheduleState schedule;

  ModelBundle(const FrnConfig& frn_cfg, const DnConfig& dn_cfg, std::uint64_t seed)
      : frn(frn_cfg, seed), dn(dn_cfg, seed) {
    schedule.seed = seed;
  }

  bool all_finite() const { return frn.params().all_finite() && dn.params().all_finite(); }

  /// FNV-1a over configs and parameter bytes; identifies a model state.
  std::string hash() const {
    std::uint64_t h = hash_string(nlohmann::json(frn.config()).dump() + nlohmann::json(dn.config()).dump());
    auto mix = [&h](const nn::ParamStore<T>& ps) {
      for (const auto& [name, p] : ps.items()) {
        h = (h ^ hash_string(name)) * 0x100000001b3ULL;
        for (std::size_t i = 0; i < p.numel(); ++i) {
          float f = static_cast<float>(p.value()[i]);
          std::uint32_t bits;
          std::memcpy(&bits, &f, 4);
          h = (h ^ bits) * 0x100000001b3ULL;
        }
      }
    };
    mix(frn.params());
    mix(dn.params());
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
  }
};

inline constexpr const char* kBundleKind = "afrp-model-bundle";

template <class T>
void append_params(Archive& ar, const std::string& prefix, const nn::ParamStore<T>& ps) {
  for (const auto& [name, p] : ps.items()) ar.tensors.emplace_back(prefix + name, p.value().template cast<float>());
}

template <class T>
void restore_params(const Archive& ar, const std::string& prefix, nn::ParamStore<T>& ps) {
  for (auto& [name, p] : ps.items()) {
    const auto& t = ar.tensor(prefix + name);
    if (t.shape() != p.shape())
      throw LoadError("parameter " + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                      shape_str(p.shape()));
    Var<T> handle = p;
    handle.mutable_value() = t.template cast<T>();
  }
}

template <class T>
Archive bundle_to_archive(const ModelBundle<T>& b) {
  Archive ar;
  ar.header = {{"kind", kBundleKind},
               {"frn_config", b.frn.config()},
               {"dn_config", b.dn.config()},
               {"schedule_state", b.schedule},
               {"seed", b.schedule.seed}};
  append_params(ar, "frn/", b.frn.params());
  append_params(ar, "dn/", b.dn.params());
  return ar;
}

template <class T>
ModelBundle<T> bundle_from_archive(const Archive& ar) {
  if (ar.header.value("kind", std::string()) != kBundleKind)
    throw LoadError("archive is not a model bundle (kind '" + ar.header.value("kind", std::string()) + "')");
  try {
    auto frn_cfg = ar.header.at("frn_config").get<FrnConfig>();
    auto dn_cfg = ar.header.at("dn_config").get<DnConfig>();
    auto sched = ar.header.at("schedule_state").get<ScheduleState>();
    ModelBundle<T> b(frn_cfg, dn_cfg, sched.seed);
    b.schedule = sched;
    restore_params(ar, "frn/", b.frn.params());
    restore_params(ar, "dn/", b.dn.params());
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed bundle header: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("bundle holds an invalid config: ") + e.what());
  }
}

template <class T>
void save_bundle(const std::filesystem::path& path, const ModelBundle<T>& b) {
  write_archive(path, bundle_to_archive(b));
}

template <class T>
ModelBundle<T> load_bundle(const std::filesystem::path& path) {
  return bundle_from_archive<T>(read_archive(path));
}

}  // namespace afrp
