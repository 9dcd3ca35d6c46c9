#pragma once

// Small model configurations and random batches shared by the test suites.

#include <vector>

#include "afrp/core_model.hpp"
#include "afrp/rng.hpp"

namespace afrp::testing {

inline FrnConfig tiny_frn_config() {
  FrnConfig c;
  c.input_size = 16;
  c.encoder_channels = {4, 6};
  c.residual_blocks_per_skip = 1;
  c.stn_stages = {1, 2};
  c.stn_hidden = 6;
  return c;
}

inline DnConfig tiny_dn_config() {
  DnConfig c;
  c.input_size = 16;
  c.conv_channels = {4, 6, 6, 6};
  c.attribute_injection_layer = 4;
  c.fc_sizes = {5, 1};
  return c;
}

/// Scaled-down 64x64 generator used where runtime matters.
inline FrnConfig small_frn_config() {
  FrnConfig c;
  c.encoder_channels = {8, 16, 32, 32};
  c.residual_blocks_per_skip = 1;
  c.stn_hidden = 8;
  return c;
}

template <class T>
Tensor<T> random_images(int n, int size, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t({n, 3, size, size});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform());
  return t;
}

template <class T>
Tensor<T> random_attributes(int n, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t({n, static_cast<int>(kAttributeCount)});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.below(2));
  return t;
}

}  // namespace afrp::testing
