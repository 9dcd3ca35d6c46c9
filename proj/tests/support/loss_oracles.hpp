#pragma once

// Brute-force loss recomputations that share no code with the library ops.

#include <cmath>
#include <vector>

#include "afrp/losses.hpp"

namespace afrp::testing::oracle {

using V = Var<double>;

inline double pixel_oracle(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (int n = 0; n < a.dim(0); ++n)
    for (int c = 0; c < a.dim(1); ++c)
      for (int y = 0; y < a.dim(2); ++y)
        for (int x = 0; x < a.dim(3); ++x) {
          const double d = a.at4(n, c, y, x) - b.at4(n, c, y, x);
          s += d * d;
        }
  return s / static_cast<double>(a.numel());
}

// Direct-loop 4x4 stride-2 pad-1 convolution followed by leaky ReLU.
inline Tensor<double> conv_lrelu_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), O = w.dim(0), Ho = H / 2;
  Tensor<double> y({N, O, Ho, Ho});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o)
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Ho; ++j) {
          double s = b[o];
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < 4; ++ky)
              for (int kx = 0; kx < 4; ++kx) {
                const int yy = 2 * i - 1 + ky, xx = 2 * j - 1 + kx;
                if (yy >= 0 && yy < H && xx >= 0 && xx < H) s += w.at4(o, c, ky, kx) * x.at4(n, c, yy, xx);
              }
          y.at4(n, o, i, j) = s > 0 ? s : 0.2 * s;
        }
  return y;
}

inline double discriminator_oracle(const std::vector<double>& r, const std::vector<double>& f, const std::vector<double>& m) {
  auto mean_log = [](const std::vector<double>& v, bool comp) {
    double s = 0;
    for (double p : v) s += std::log(comp ? 1 - p : p);
    return s / v.size();
  };
  return -mean_log(r, false) - mean_log(f, true) - mean_log(m, true);
}

inline V prob_batch(const std::vector<double>& v) { return V::leaf(Tensor<double>({static_cast<int>(v.size()), 1}, v)); }

/// Frozen two-layer random conv net at 16x16; its features are reproduced by
/// conv_lrelu_oracle applied twice.
inline ConvExtractor<double> two_layer_extractor() {
  ConvExtractorConfig c;
  c.input_size = 16;
  c.channels = {4, 5};
  c.feature_layer = 2;
  c.embedding_dim = 0;
  c.style_layer_count = 2;
  ConvExtractor<double> e(c, 5, "random-2layer");
  e.freeze();
  return e;
}

}  // namespace afrp::testing::oracle
