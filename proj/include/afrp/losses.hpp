#pragma once

#include <cmath>
#include <string>

#include "afrp/core_model.hpp"
#include "afrp/feature_extractor.hpp"

namespace afrp {

/// Composite-loss weights: lambda scales the adversarial term, eta the
/// identity term; lambda is multiplied by lambda_decay once per epoch.
struct LossWeights {
  double lambda = 1e-2;
  double eta = 1e-3;
  double lambda_decay = 0.995;

  void validate() const {
    if (!(lambda >= 0) || !(eta >= 0)) throw ContractError("loss weights must be nonnegative");
    if (!(lambda_decay > 0 && lambda_decay <= 1)) throw ContractError("lambda_decay must lie in (0,1]");
  }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda", w.lambda}, {"eta", w.eta}, {"lambda_decay", w.lambda_decay}};
}
inline void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.lambda = j.value("lambda", d.lambda);
  w.eta = j.value("eta", d.eta);
  w.lambda_decay = j.value("lambda_decay", d.lambda_decay);
}

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] inside logs.
inline constexpr double kProbClamp = 1e-7;

/// Mean squared pixel difference over all elements of the batch.
template <class T>
Var<T> pixel_loss(const Var<T>& recovered, const Var<T>& target) {
  detail::require(recovered.shape() == target.shape(), "pixel_loss: shape mismatch " + shape_str(recovered.shape()) +
                                                           " vs " + shape_str(target.shape()));
  return ops::mse(recovered, target);
}

/// Mean squared difference of psi features. Target features carry no
/// gradient; psi's parameters are expected to be frozen.
template <class T>
Var<T> identity_loss(const Var<T>& recovered, const Var<T>& target, const FeatureExtractor<T>& psi) {
  detail::require(recovered.shape() == target.shape(), "identity_loss: shape mismatch");
  detail::require(recovered.shape().size() == 4 && psi.accepts(recovered.dim(2)),
                  "identity_loss: extractor '" + psi.id() + "' does not accept images of shape " +
                      shape_str(recovered.shape()));
  Var<T> target_features;
  {
    NoGradGuard guard;
    target_features = psi.features(target.detach());
  }
  return ops::mse(psi.features(recovered), target_features);
}

namespace detail {
template <class T>
void require_open_unit(const Var<T>& p, const char* name) {
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const T v = p.value()[i];
    if (!(v > T(0) && v < T(1)))
      throw ContractError(std::string("discriminator_loss: ") + name + " contains " + std::to_string(v) +
                          ", outside (0,1); is the squashing layer missing?");
  }
}
}  // namespace detail

/// -mean log D(I_r,a) - mean log(1 - D(Î_r,a)) - mean log(1 - D(I_r,ã)).
template <class T>
Var<T> discriminator_loss(const Var<T>& d_real, const Var<T>& d_fake_img, const Var<T>& d_fake_attr) {
  detail::require_open_unit(d_real, "d_real");
  detail::require_open_unit(d_fake_img, "d_fake_img");
  detail::require_open_unit(d_fake_attr, "d_fake_attr");
  const T lo = static_cast<T>(kProbClamp), hi = static_cast<T>(1 - kProbClamp);
  auto sum = ops::add(ops::add(ops::mean_log(d_real, false, lo, hi), ops::mean_log(d_fake_img, true, lo, hi)),
                      ops::mean_log(d_fake_attr, true, lo, hi));
  return ops::scale(sum, T(-1));
}

template <class T>
struct GeneratorLoss {
  Var<T> total;
  Var<T> pixel;
  Var<T> adversarial;  // -mean log D(recovered, a)
  Var<T> identity;
  Var<T> d_fake;       // discriminator outputs on the recovered batch
};

/// pixel + lambda * adversarial + eta * identity, with the non-saturating
/// adversarial term -mean log D(G(I_p,a), a). `discriminator` is any
/// callable (images, attrs) -> [N,1] probabilities; psi may be null when
/// eta is zero.
template <class T, class Discriminator>
GeneratorLoss<T> generator_loss(const Var<T>& recovered, const Var<T>& target, const Var<T>& attrs,
                                const Discriminator& discriminator, const FeatureExtractor<T>* psi,
                                const LossWeights& weights) {
  weights.validate();
  GeneratorLoss<T> out;
  out.pixel = pixel_loss(recovered, target);
  out.d_fake = discriminator(recovered, attrs);
  detail::require_open_unit(out.d_fake, "D(recovered)");
  out.adversarial = ops::scale(
      ops::mean_log(out.d_fake, false, static_cast<T>(kProbClamp), static_cast<T>(1 - kProbClamp)), T(-1));
  if (psi) {
    out.identity = identity_loss(recovered, target, *psi);
  } else {
    detail::require(weights.eta == 0, "generator_loss: eta > 0 needs a feature extractor");
    out.identity = Var<T>::leaf(Tensor<T>({1}));
  }
  out.total = ops::add(ops::add(out.pixel, ops::scale(out.adversarial, static_cast<T>(weights.lambda))),
                       ops::scale(out.identity, static_cast<T>(weights.eta)));
  return out;
}

template <class T>
GeneratorLoss<T> generator_loss(const Var<T>& recovered, const Var<T>& target, const Var<T>& attrs, const Dn<T>& dn,
                                const FeatureExtractor<T>* psi, const LossWeights& weights) {
  auto d = [&dn](const Var<T>& x, const Var<T>& a) { return dn.forward(x, a); };
  return generator_loss(recovered, target, attrs, d, psi, weights);
}

}  // namespace afrp
