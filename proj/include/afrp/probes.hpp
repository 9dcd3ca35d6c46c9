#pragma once

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "afrp/archive.hpp"
#include "afrp/faces.hpp"
#include "afrp/feature_extractor.hpp"
#include "afrp/metrics.hpp"
#include "afrp/stylize.hpp"

namespace afrp {

/// Training settings for the identity and attribute probes.
struct ProbeConfig {
  ConvExtractorConfig identity_net{64, {16, 32, 64, 64}, 3, 128, 3};
  ConvExtractorConfig attribute_net{64, {16, 32, 64, 64}, 3, 64, 3};
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 3e-4;
  double augment_rotation_deg = 0.0;
  double augment_translation_frac = 0.0;
  std::vector<std::string> attributes;  // empty: all twenty
  std::uint64_t seed = 0;

  void validate() const {
    identity_net.validate();
    attribute_net.validate();
    if (identity_net.embedding_dim <= 0 || attribute_net.embedding_dim <= 0)
      throw ConfigError("probe networks need an embedding head");
    if (identity_net.input_size != attribute_net.input_size)
      throw ConfigError("probe networks must share an input size");
    if (epochs < 1 || batch_size < 1 || !(learning_rate > 0)) throw ConfigError("probe epochs, batch_size, learning_rate must be positive");
    if (augment_rotation_deg < 0 || augment_translation_frac < 0) throw ConfigError("probe augmentation bounds must be >= 0");
    for (const auto& a : attributes)
      if (!attribute_index(a)) throw ConfigError("unknown probe attribute '" + a + "'");
  }

  std::vector<std::size_t> attribute_indices() const {
    std::vector<std::size_t> out;
    if (attributes.empty())
      for (std::size_t i = 0; i < kAttributeCount; ++i) out.push_back(i);
    else
      for (const auto& a : attributes) out.push_back(require_attribute(a));
    return out;
  }

  friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"identity_net", c.identity_net},
       {"attribute_net", c.attribute_net},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"augment_rotation_deg", c.augment_rotation_deg},
       {"augment_translation_frac", c.augment_translation_frac},
       {"attributes", c.attributes},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, ProbeConfig& c) {
  const ProbeConfig d;
  c.identity_net = j.value("identity_net", d.identity_net);
  c.attribute_net = j.value("attribute_net", d.attribute_net);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.augment_rotation_deg = j.value("augment_rotation_deg", d.augment_rotation_deg);
  c.augment_translation_frac = j.value("augment_translation_frac", d.augment_translation_frac);
  c.attributes = j.value("attributes", d.attributes);
  c.seed = j.value("seed", d.seed);
}

/// A conv trunk with a linear read-out over its embedding.
template <class T>
class ProbeNet {
 public:
  ProbeNet(const ConvExtractorConfig& cfg, int outputs, std::uint64_t seed, std::string id)
      : trunk_(cfg, seed, std::move(id)), outputs_(outputs) {
    detail::require(outputs >= 1, "probe needs at least one output");
    Rng rng(derive_seed(seed, hash_string("probe-head")));
    head_ = nn::Linear<T>(head_params_, "head", cfg.embedding_dim, outputs, rng);
  }
  ProbeNet(ProbeNet&&) = default;

  Var<T> logits(const Var<T>& images) const { return head_(trunk_.embed(images)); }
  Var<T> embed(const Var<T>& images) const { return trunk_.embed(images); }

  ConvExtractor<T>& trunk() { return trunk_; }
  const ConvExtractor<T>& trunk() const { return trunk_; }
  nn::ParamStore<T>& head_params() { return head_params_; }
  const nn::ParamStore<T>& head_params() const { return head_params_; }
  int outputs() const { return outputs_; }

  void freeze() {
    trunk_.freeze();
    head_params_.set_trainable(false);
  }

  /// Forward pass over an image list in fixed-size chunks without a graph.
  template <class F>
  std::vector<std::vector<double>> rows(std::span<const FaceImage> images, F&& f, std::size_t chunk = 64) const {
    NoGradGuard guard;
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    for (std::size_t s = 0; s < images.size(); s += chunk) {
      auto part = images.subspan(s, std::min(chunk, images.size() - s));
      const Tensor<T> y = f(Var<T>::leaf(images_to_tensor<T>(part))).value();
      const std::size_t d = y.numel() / part.size();
      for (std::size_t n = 0; n < part.size(); ++n)
        out.emplace_back(y.data() + n * d, y.data() + (n + 1) * d);
    }
    return out;
  }

 private:
  ConvExtractor<T> trunk_;
  nn::ParamStore<T> head_params_;
  nn::Linear<T> head_;
  int outputs_;
};

struct ProbeAccuracy {
  std::optional<double> identity;                // held-out top-1 accuracy
  std::map<std::string, double> attributes;      // held-out per-attribute accuracy
  std::size_t train_count = 0;
  std::size_t heldout_count = 0;
};

inline void to_json(nlohmann::json& j, const ProbeAccuracy& a) {
  j = {{"identity", a.identity ? nlohmann::json(*a.identity) : nlohmann::json(nullptr)},
       {"attributes", a.attributes},
       {"train_count", a.train_count},
       {"heldout_count", a.heldout_count}};
}
inline void from_json(const nlohmann::json& j, ProbeAccuracy& a) {
  a.identity = j.at("identity").is_null() ? std::nullopt : std::optional<double>(j.at("identity").get<double>());
  a.attributes = j.at("attributes").get<std::map<std::string, double>>();
  a.train_count = j.at("train_count").get<std::size_t>();
  a.heldout_count = j.at("heldout_count").get<std::size_t>();
}

/// Frozen identity classifier (whose trunk doubles as the identity-loss
/// extractor and the retrieval embedder) and multi-label attribute
/// classifier.
struct ProbeSet {
  ProbeConfig config;
  std::vector<std::string> identities;
  ProbeNet<float> identity;
  ProbeNet<float> attribute;
  ProbeAccuracy accuracy;

  ProbeSet(ProbeConfig cfg, std::vector<std::string> ids)
      : config(std::move(cfg)),
        identities(std::move(ids)),
        identity(config.identity_net, static_cast<int>(identities.size()), derive_seed(config.seed, hash_string("identity-probe")), "identity-probe"),
        attribute(config.attribute_net, static_cast<int>(kAttributeCount), derive_seed(config.seed, hash_string("attribute-probe")), "attribute-probe") {}

  void freeze() {
    identity.freeze();
    attribute.freeze();
  }

  const FeatureExtractor<float>& identity_extractor() const { return identity.trunk(); }

  Embedder embedder() const {
    return {"identity-probe", [this](std::span<const FaceImage> imgs) {
              return identity.rows(imgs, [this](const Var<float>& x) { return identity.embed(x); });
            }};
  }

  /// Per-image sigmoid probabilities for all twenty attributes.
  std::vector<std::vector<double>> attribute_probabilities(std::span<const FaceImage> imgs) const {
    auto out = attribute.rows(imgs, [this](const Var<float>& x) { return attribute.logits(x); });
    for (auto& r : out)
      for (double& v : r) v = 1.0 / (1.0 + std::exp(-v));
    return out;
  }

  ClassifyFn classifier() const {
    return [this](std::span<const FaceImage> imgs, std::size_t index) {
      detail::require(index < kAttributeCount, "attribute index out of range");
      std::vector<bool> out;
      for (const auto& p : attribute_probabilities(imgs)) out.push_back(p[index] >= 0.5);
      return out;
    };
  }

  std::vector<std::string> predict_identity(std::span<const FaceImage> imgs) const {
    std::vector<std::string> out;
    for (const auto& r : identity.rows(imgs, [this](const Var<float>& x) { return identity.logits(x); }))
      out.push_back(identities[std::max_element(r.begin(), r.end()) - r.begin()]);
    return out;
  }

  std::string hash() const {
    std::uint64_t h = hash_string(nlohmann::json(config).dump());
    auto mix = [&h](const nn::ParamStore<float>& ps) {
      for (const auto& [name, p] : ps.items()) {
        h = (h ^ hash_string(name)) * 0x100000001b3ULL;
        for (std::size_t i = 0; i < p.numel(); ++i) {
          std::uint32_t bits;
          std::memcpy(&bits, &p.value()[i], 4);
          h = (h ^ bits) * 0x100000001b3ULL;
        }
      }
    };
    for (const auto* net : {&identity, &attribute}) {
      mix(net->trunk().params());
      mix(net->head_params());
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
  }
};

namespace detail {

inline FaceImage augment(const FaceImage& img, const ProbeConfig& c, std::uint64_t seed) {
  if (c.augment_rotation_deg == 0 && c.augment_translation_frac == 0) return img;
  return misalign(img, c.augment_rotation_deg, c.augment_translation_frac * img.width, seed).first;
}

template <class F>
void fit_probe(ProbeNet<float>& net, const std::vector<const RealFace*>& train, const ProbeConfig& c,
               std::uint64_t seed, F&& loss_of) {
  nn::RmsPropConfig oc;
  oc.learning_rate = c.learning_rate;
  nn::RmsProp<float> opt_trunk(net.trunk().params(), oc), opt_head(net.head_params(), oc);
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < c.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng(derive_seed(seed, hash_string("shuffle"), static_cast<std::uint64_t>(epoch))).shuffle(order.begin(), order.end());
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(c.batch_size)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(c.batch_size));
      std::vector<FaceImage> imgs;
      std::vector<const RealFace*> faces;
      for (std::size_t k = s; k < e; ++k) {
        const std::size_t i = order[k];
        imgs.push_back(augment(train[i]->image, c, derive_seed(seed, static_cast<std::uint64_t>(epoch) * 1000003u + i)));
        faces.push_back(train[i]);
      }
      auto loss = loss_of(net.logits(Var<float>::leaf(images_to_tensor<float>(imgs))), faces);
      backward(loss);
      opt_trunk.step(net.trunk().params());
      opt_head.step(net.head_params());
      net.trunk().params().zero_grad();
      net.head_params().zero_grad();
    }
  }
}

}  // namespace detail

/// Trains both probes on real faces. For every identity with at least two
/// images the last fifth (at least one) is held out for the accuracy report.
inline ProbeSet train_probes(std::span<const RealFace> faces, const ProbeConfig& cfg) {
  cfg.validate();
  detail::require(!faces.empty(), "train_probes: no faces");
  std::vector<std::string> ids;
  std::map<std::string, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < faces.size(); ++i) {
    detail::require(faces[i].image.height == cfg.identity_net.input_size &&
                        faces[i].image.width == cfg.identity_net.input_size,
                    "train_probes: face " + std::to_string(i) + " is not " +
                        std::to_string(cfg.identity_net.input_size) + "px square");
    if (!by_id.count(faces[i].identity_id)) ids.push_back(faces[i].identity_id);
    by_id[faces[i].identity_id].push_back(i);
  }
  detail::require(ids.size() >= 2, "train_probes: need at least two identities");
  std::sort(ids.begin(), ids.end());

  std::vector<const RealFace*> train, held;
  for (const auto& id : ids) {
    const auto& v = by_id[id];
    const std::size_t hold = v.size() >= 2 ? std::max<std::size_t>(1, v.size() / 5) : 0;
    for (std::size_t k = 0; k < v.size(); ++k) (k + hold >= v.size() ? held : train).push_back(&faces[v[k]]);
  }

  const auto probed = cfg.attribute_indices();
  std::string degenerate;
  for (std::size_t a : probed) {
    bool pos = false, neg = false;
    for (const auto* f : train) (f->attributes[a] >= 0.5 ? pos : neg) = true;
    if (!(pos && neg)) degenerate += (degenerate.empty() ? "" : ", ") + std::string(kAttributeNames[a]);
  }
  if (!degenerate.empty())
    throw ContractError("train_probes: attribute labels are constant over the training faces: " + degenerate);

  ProbeSet set(cfg, ids);
  std::map<std::string, int> label;
  for (std::size_t i = 0; i < ids.size(); ++i) label[ids[i]] = static_cast<int>(i);

  detail::fit_probe(set.identity, train, cfg, derive_seed(cfg.seed, hash_string("identity-fit")),
                    [&](const Var<float>& logits, const std::vector<const RealFace*>& batch) {
                      std::vector<int> y;
                      for (const auto* f : batch) y.push_back(label[f->identity_id]);
                      return ops::cross_entropy(logits, y);
                    });
  // Only probed attributes contribute; the other heads stay untrained.
  detail::fit_probe(set.attribute, train, cfg, derive_seed(cfg.seed, hash_string("attribute-fit")),
                    [&](const Var<float>& logits, const std::vector<const RealFace*>& batch) {
                      const int n = static_cast<int>(batch.size());
                      Tensor<float> targets({n, static_cast<int>(kAttributeCount)});
                      Tensor<float> mask({n, static_cast<int>(kAttributeCount)});
                      for (int i = 0; i < n; ++i)
                        for (std::size_t a : probed) {
                          targets[i * kAttributeCount + a] = batch[i]->attributes[a] >= 0.5 ? 1.f : 0.f;
                          mask[i * kAttributeCount + a] = 1.f;
                        }
                      // Masked-out logits are pinned to their own value so they add no gradient.
                      Tensor<float> lv = logits.value();
                      for (std::size_t k = 0; k < lv.numel(); ++k)
                        if (mask[k] == 0) targets[k] = 1.f / (1.f + std::exp(-lv[k]));
                      return ops::bce_with_logits(logits, targets);
                    });
  set.freeze();

  set.accuracy.train_count = train.size();
  set.accuracy.heldout_count = held.size();
  if (!held.empty()) {
    std::vector<FaceImage> imgs;
    for (const auto* f : held) imgs.push_back(f->image);
    const auto pred = set.predict_identity(imgs);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < held.size(); ++i) ok += pred[i] == held[i]->identity_id;
    set.accuracy.identity = static_cast<double>(ok) / static_cast<double>(held.size());
    const auto probs = set.attribute_probabilities(imgs);
    for (std::size_t a : probed) {
      std::size_t right = 0;
      for (std::size_t i = 0; i < held.size(); ++i) right += (probs[i][a] >= 0.5) == (held[i]->attributes[a] >= 0.5);
      set.accuracy.attributes[std::string(kAttributeNames[a])] = static_cast<double>(right) / static_cast<double>(held.size());
    }
  }
  return set;
}

inline constexpr const char* kProbeKind = "afrp-probes";

inline void save_probes(const std::filesystem::path& path, const ProbeSet& p) {
  Archive ar;
  ar.header = {{"kind", kProbeKind}, {"config", p.config}, {"identities", p.identities}, {"accuracy", p.accuracy}};
  auto put = [&ar](const std::string& prefix, const nn::ParamStore<float>& ps) {
    for (const auto& [name, v] : ps.items()) ar.tensors.emplace_back(prefix + name, v.value());
  };
  put("identity/trunk/", p.identity.trunk().params());
  put("identity/head/", p.identity.head_params());
  put("attribute/trunk/", p.attribute.trunk().params());
  put("attribute/head/", p.attribute.head_params());
  write_archive(path, ar);
}

inline ProbeSet load_probes(const std::filesystem::path& path) {
  const Archive ar = read_archive(path);
  if (ar.header.value("kind", std::string()) != kProbeKind)
    throw LoadError(path.string() + ": not a probe archive");
  try {
    ProbeSet p(ar.header.at("config").get<ProbeConfig>(), ar.header.at("identities").get<std::vector<std::string>>());
    p.accuracy = ar.header.at("accuracy").get<ProbeAccuracy>();
    auto get = [&ar](const std::string& prefix, nn::ParamStore<float>& ps) {
      for (auto& [name, v] : ps.items()) {
        const auto& t = ar.tensor(prefix + name);
        if (t.shape() != v.shape()) throw LoadError("probe parameter " + prefix + name + " has the wrong shape");
        Var<float> h = v;
        h.mutable_value() = t;
      }
    };
    get("identity/trunk/", p.identity.trunk().params());
    get("identity/head/", p.identity.head_params());
    get("attribute/trunk/", p.attribute.trunk().params());
    get("attribute/head/", p.attribute.head_params());
    p.freeze();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": malformed probe header: " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": invalid probe config: " + e.what());
  }
}

}  // namespace afrp
