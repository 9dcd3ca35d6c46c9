#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "afrp/ops.hpp"
#include "afrp/rng.hpp"

namespace afrp::nn {

/// Ordered collection of named trainable tensors. Layers keep handles into
/// the store, so the store must outlive (or be owned alongside) them.
template <class T>
class ParamStore {
 public:
  Var<T> add(const std::string& path, Tensor<T> init) {
    detail::require(!index_.count(path), "duplicate parameter path " + path);
    index_[path] = params_.size();
    params_.emplace_back(path, Var<T>::leaf(std::move(init), trainable_));
    return params_.back().second;
  }

  const std::vector<std::pair<std::string, Var<T>>>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }

  Var<T> get(const std::string& path) const {
    auto it = index_.find(path);
    detail::require(it != index_.end(), "unknown parameter path " + path);
    return params_[it->second].second;
  }
  bool contains(const std::string& path) const { return index_.count(path) > 0; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  /// Frozen stores still propagate gradients to their inputs.
  void set_trainable(bool on) {
    trainable_ = on;
    for (auto& [_, p] : params_) p.node()->requires_grad = on;
  }
  bool trainable() const { return trainable_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& [_, p] : params_)
      if (!p.value().all_finite()) return false;
    return true;
  }

  /// Copies values from another store with identical layout.
  void assign_from(const ParamStore& other) {
    detail::require(other.size() == size(), "assign_from: parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      detail::require(params_[i].first == other.params_[i].first &&
                          params_[i].second.shape() == other.params_[i].second.shape(),
                      "assign_from: layout mismatch at " + params_[i].first);
      params_[i].second.mutable_value() = other.params_[i].second.value();
    }
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::map<std::string, std::size_t> index_;
  bool trainable_ = true;
};

template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(stddev * rng.normal());
  return t;
}

template <class T>
struct Conv2d {
  Var<T> weight, bias;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride_,
         int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    weight = store.add(name + ".weight",
                       normal_tensor<T>({out_ch, in_ch, kernel, kernel}, 1.0 / std::sqrt(in_ch * kernel * kernel), rng));
    bias = store.add(name + ".bias", Tensor<T>({out_ch}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
};

template <class T>
struct ConvTranspose2d {
  Var<T> weight, bias;
  int stride = 2, pad = 1;

  ConvTranspose2d() = default;
  ConvTranspose2d(ParamStore<T>& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride_,
                  int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    // Each output pixel of a stride-s transposed conv sees in_ch*(k/s)^2 taps.
    const double fan_in = in_ch * double(kernel * kernel) / double(stride_ * stride_);
    weight = store.add(name + ".weight", normal_tensor<T>({in_ch, out_ch, kernel, kernel}, 1.0 / std::sqrt(fan_in), rng));
    bias = store.add(name + ".bias", Tensor<T>({out_ch}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv_transpose2d(x, weight, bias, stride, pad); }
};

template <class T>
struct Linear {
  Var<T> weight, bias;

  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, int in_f, int out_f, Rng& rng, double stddev = -1) {
    if (stddev < 0) stddev = 1.0 / std::sqrt(in_f);
    weight = store.add(name + ".weight", normal_tensor<T>({out_f, in_f}, stddev, rng));
    bias = store.add(name + ".bias", Tensor<T>({out_f}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
};

template <class T>
struct InstanceNorm {
  Var<T> gamma, beta;

  InstanceNorm() = default;
  InstanceNorm(ParamStore<T>& store, const std::string& name, int channels) {
    gamma = store.add(name + ".gamma", Tensor<T>({channels}, T(1)));
    beta = store.add(name + ".beta", Tensor<T>({channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::instance_norm(x, gamma, beta); }
};

/// conv3x3 -> norm -> ReLU -> conv3x3 -> norm, plus identity shortcut.
template <class T>
struct ResidualBlock {
  Conv2d<T> conv1, conv2;
  InstanceNorm<T> norm1, norm2;

  ResidualBlock() = default;
  ResidualBlock(ParamStore<T>& store, const std::string& name, int channels, Rng& rng)
      : conv1(store, name + ".conv1", channels, channels, 3, 1, 1, rng),
        conv2(store, name + ".conv2", channels, channels, 3, 1, 1, rng),
        norm1(store, name + ".norm1", channels),
        norm2(store, name + ".norm2", channels) {}

  Var<T> operator()(const Var<T>& x) const {
    auto h = ops::relu(norm1(conv1(x)));
    return ops::add(x, norm2(conv2(h)));
  }
};

struct RmsPropConfig {
  double learning_rate = 1e-3;
  double alpha = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// RMSprop with decoupled weight decay: w <- w - lr*wd*w alongside the
/// normalized gradient step.
template <class T>
class RmsProp {
 public:
  RmsProp() = default;
  RmsProp(const ParamStore<T>& store, RmsPropConfig cfg) : cfg_(cfg) {
    for (const auto& [name, p] : store.items()) square_avg_.emplace_back(name, Tensor<T>(p.shape()));
  }

  const RmsPropConfig& config() const { return cfg_; }

  void step(ParamStore<T>& store) {
    detail::require(store.size() == square_avg_.size(), "RmsProp: parameter layout changed");
    const T lr = static_cast<T>(cfg_.learning_rate), alpha = static_cast<T>(cfg_.alpha),
            eps = static_cast<T>(cfg_.eps), wd = static_cast<T>(cfg_.weight_decay);
    for (std::size_t i = 0; i < store.size(); ++i) {
      const Var<T>& p = store.items()[i].second;
      if (!p.has_grad()) continue;
      const Tensor<T>& g = p.node()->grad;
      Tensor<T>& v = square_avg_[i].second;
      Tensor<T>& w = p.node()->value;
      for (std::size_t k = 0; k < w.numel(); ++k) {
        v[k] = alpha * v[k] + (T(1) - alpha) * g[k] * g[k];
        w[k] -= lr * (g[k] / (std::sqrt(v[k]) + eps) + wd * w[k]);
      }
    }
  }

  std::vector<std::pair<std::string, Tensor<T>>>& state() { return square_avg_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& state() const { return square_avg_; }

 private:
  RmsPropConfig cfg_;
  std::vector<std::pair<std::string, Tensor<T>>> square_avg_;
};

}  // namespace afrp::nn
