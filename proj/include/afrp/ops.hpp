#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "afrp/autograd.hpp"

namespace afrp {
namespace ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

using afrp::detail::require;
using afrp::detail::wants_grad;

struct ConvGeom {
  int channels, height, width, kernel, stride, pad, out_h, out_w;
  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h * out_w; }
};

inline ConvGeom conv_geom(int c, int h, int w, int k, int s, int p) {
  ConvGeom g{c, h, w, k, s, p, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1};
  require(g.out_h > 0 && g.out_w > 0, "convolution output would be empty");
  return g;
}

template <class T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const int P = g.cols();
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < g.kernel; ++ky)
      for (int kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * P;
        const T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* img) {
  const int P = g.cols();
  for (int c = 0; c < g.channels; ++c)
    for (int ky = 0; ky < g.kernel; ++ky)
      for (int kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * P;
        T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          const T* src = row + oy * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
}

template <class T>
void check_rank(const Var<T>& v, std::size_t r, const char* op) {
  require(v.shape().size() == r, std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                                     shape_str(v.shape()));
}

}  // namespace detail

/// 2-D convolution. x: [N,C,H,W], weight: [O,C,k,k], bias: [O] or undefined.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  detail::check_rank(x, 4, "conv2d");
  detail::check_rank(weight, 4, "conv2d weight");
  const int N = x.dim(0), C = x.dim(1), O = weight.dim(0), k = weight.dim(2);
  detail::require(weight.dim(1) == C, "conv2d: input has " + std::to_string(C) + " channels, weight expects " +
                                          std::to_string(weight.dim(1)));
  const auto g = detail::conv_geom(C, x.dim(2), x.dim(3), k, stride, pad);
  const int K = g.rows(), P = g.cols();
  const std::size_t in_stride = static_cast<std::size_t>(C) * g.height * g.width;
  const std::size_t out_stride = static_cast<std::size_t>(O) * P;

  Tensor<T> out({N, O, g.out_h, g.out_w});
  AlignedVector<T> cols(static_cast<std::size_t>(K) * P);
  ConstMatMap<T> W(weight.value().data(), O, K);
  for (int n = 0; n < N; ++n) {
    detail::im2col(x.value().data() + n * in_stride, g, cols.data());
    MatMap<T> Y(out.data() + n * out_stride, O, P);
    Y.noalias() = W * ConstMatMap<T>(cols.data(), K, P);
    if (bias.defined())
      for (int o = 0; o < O; ++o) Y.row(o).array() += bias.value()[o];
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return afrp::detail::make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const Tensor<T>& gy = self.grad;
    Node<T>& xn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    const bool gx = detail::wants_grad(self, 0), gw = detail::wants_grad(self, 1),
               gb = detail::wants_grad(self, 2);
    AlignedVector<T> cols(static_cast<std::size_t>(K) * P), dcols;
    if (gx) dcols.resize(cols.size());
    ConstMatMap<T> W(wn.value.data(), O, K);
    for (int n = 0; n < N; ++n) {
      ConstMatMap<T> dY(gy.data() + n * out_stride, O, P);
      if (gw) {
        detail::im2col(xn.value.data() + n * in_stride, g, cols.data());
        MatMap<T> dW(wn.grad_buffer().data(), O, K);
        dW.noalias() += dY * ConstMatMap<T>(cols.data(), K, P).transpose();
      }
      if (gx) {
        MatMap<T>(dcols.data(), K, P).noalias() = W.transpose() * dY;
        detail::col2im_add(dcols.data(), g, xn.grad_buffer().data() + n * in_stride);
      }
      if (gb) {
        auto& db = self.inputs[2]->grad_buffer();
        for (int o = 0; o < O; ++o) db[o] += dY.row(o).sum();
      }
    }
  });
}

/// Transposed convolution. x: [N,C,H,W], weight: [C,O,k,k]; output spatial
/// size (H-1)*stride - 2*pad + k.
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  detail::check_rank(x, 4, "conv_transpose2d");
  detail::check_rank(weight, 4, "conv_transpose2d weight");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  detail::require(weight.dim(0) == C, "conv_transpose2d: channel mismatch");
  const int O = weight.dim(1), k = weight.dim(2);
  const int Ho = (H - 1) * stride - 2 * pad + k, Wo = (Wd - 1) * stride - 2 * pad + k;
  const auto g = detail::conv_geom(O, Ho, Wo, k, stride, pad);
  detail::require(g.out_h == H && g.out_w == Wd, "conv_transpose2d: inconsistent geometry");
  const int K = g.rows(), P = g.cols();
  const std::size_t in_stride = static_cast<std::size_t>(C) * P;
  const std::size_t out_stride = static_cast<std::size_t>(O) * Ho * Wo;

  Tensor<T> out({N, O, Ho, Wo});
  AlignedVector<T> cols(static_cast<std::size_t>(K) * P);
  ConstMatMap<T> Wm(weight.value().data(), C, K);
  for (int n = 0; n < N; ++n) {
    MatMap<T>(cols.data(), K, P).noalias() = Wm.transpose() * ConstMatMap<T>(x.value().data() + n * in_stride, C, P);
    detail::col2im_add(cols.data(), g, out.data() + n * out_stride);
    if (bias.defined())
      for (int o = 0; o < O; ++o) {
        T* plane = out.data() + n * out_stride + static_cast<std::size_t>(o) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) plane[i] += bias.value()[o];
      }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return afrp::detail::make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    const Tensor<T>& gy = self.grad;
    Node<T>& xn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    const bool gx = detail::wants_grad(self, 0), gw = detail::wants_grad(self, 1),
               gb = detail::wants_grad(self, 2);
    AlignedVector<T> dcols(static_cast<std::size_t>(K) * P);
    ConstMatMap<T> Wm(wn.value.data(), C, K);
    for (int n = 0; n < N; ++n) {
      const T* gy_n = gy.data() + n * out_stride;
      detail::im2col(gy_n, g, dcols.data());
      ConstMatMap<T> dC(dcols.data(), K, P);
      if (gx) MatMap<T>(xn.grad_buffer().data() + n * in_stride, C, P).noalias() += Wm * dC;
      if (gw) {
        MatMap<T> dW(wn.grad_buffer().data(), C, K);
        dW.noalias() += ConstMatMap<T>(xn.value.data() + n * in_stride, C, P) * dC.transpose();
      }
      if (gb) {
        auto& db = self.inputs[2]->grad_buffer();
        for (int o = 0; o < O; ++o) {
          const T* plane = gy_n + static_cast<std::size_t>(o) * Ho * Wo;
          T s = 0;
          for (int i = 0; i < Ho * Wo; ++i) s += plane[i];
          db[o] += s;
        }
      }
    }
  });
}

/// Fully connected layer. x: [N,F], weight: [O,F], bias: [O] or undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  detail::check_rank(x, 2, "linear");
  const int N = x.dim(0), F = x.dim(1), O = weight.dim(0);
  detail::require(weight.dim(1) == F, "linear: input width " + std::to_string(F) + " != weight width " +
                                          std::to_string(weight.dim(1)));
  Tensor<T> out({N, O});
  MatMap<T> Y(out.data(), N, O);
  Y.noalias() = ConstMatMap<T>(x.value().data(), N, F) * ConstMatMap<T>(weight.value().data(), O, F).transpose();
  if (bias.defined())
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o) Y(n, o) += bias.value()[o];
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return afrp::detail::make_result<T>(std::move(out), std::move(inputs), [=](Node<T>& self) {
    ConstMatMap<T> dY(self.grad.data(), N, O);
    Node<T>& xn = *self.inputs[0];
    Node<T>& wn = *self.inputs[1];
    if (detail::wants_grad(self, 0))
      MatMap<T>(xn.grad_buffer().data(), N, F).noalias() += dY * ConstMatMap<T>(wn.value.data(), O, F);
    if (detail::wants_grad(self, 1))
      MatMap<T>(wn.grad_buffer().data(), O, F).noalias() += dY.transpose() * ConstMatMap<T>(xn.value.data(), N, F);
    if (detail::wants_grad(self, 2)) {
      auto& db = self.inputs[2]->grad_buffer();
      for (int o = 0; o < O; ++o) db[o] += dY.col(o).sum();
    }
  });
}

/// Per-sample, per-channel normalization with affine gamma/beta of shape [C].
template <class T>
Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::check_rank(x, 4, "instance_norm");
  const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), inv_std(static_cast<std::size_t>(N) * C);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
      const T* src = x.value().data() + off;
      T mean = 0;
      for (int i = 0; i < HW; ++i) mean += src[i];
      mean /= HW;
      T var = 0;
      for (int i = 0; i < HW; ++i) var += (src[i] - mean) * (src[i] - mean);
      var /= HW;
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[n * C + c] = is;
      for (int i = 0; i < HW; ++i) {
        xhat[off + i] = (src[i] - mean) * is;
        out[off + i] = gamma.value()[c] * xhat[off + i] + beta.value()[c];
      }
    }
  return afrp::detail::make_result<T>(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const Tensor<T>& gy = self.grad;
        const bool gx = detail::wants_grad(self, 0), gg = detail::wants_grad(self, 1),
                   gb = detail::wants_grad(self, 2);
        const Tensor<T>& gam = self.inputs[1]->value;
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * HW;
            T sum_dy = 0, sum_dy_xhat = 0;
            for (int i = 0; i < HW; ++i) {
              sum_dy += gy[off + i];
              sum_dy_xhat += gy[off + i] * xhat[off + i];
            }
            if (gg) self.inputs[1]->grad_buffer()[c] += sum_dy_xhat;
            if (gb) self.inputs[2]->grad_buffer()[c] += sum_dy;
            if (gx) {
              auto& dx = self.inputs[0]->grad_buffer();
              const T scale = gam[c] * inv_std[n * C + c];
              const T m1 = sum_dy / HW, m2 = sum_dy_xhat / HW;
              for (int i = 0; i < HW; ++i) dx[off + i] += scale * (gy[off + i] - m1 - xhat[off + i] * m2);
            }
          }
      });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor<T> out(x.shape());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = v[i] > 0 ? v[i] : slope * v[i];
  return afrp::detail::make_result<T>(std::move(out), {x}, [slope](Node<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    const auto& v = self.inputs[0]->value;
    for (std::size_t i = 0; i < v.numel(); ++i) dx[i] += self.grad[i] * (v[i] > 0 ? T(1) : slope);
  });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return leaky_relu(x, T(0));
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out(x.shape());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-v[i]));
  return afrp::detail::make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < self.value.numel(); ++i) {
      const T s = self.value[i];
      dx[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

/// Sigmoid mapped onto the open interval (margin, 1 - margin).
template <class T>
Var<T> squash_probability(const Var<T>& x, T margin) {
  Tensor<T> out(x.shape());
  std::vector<T> s(x.numel());
  const auto& v = x.value();
  for (std::size_t i = 0; i < v.numel(); ++i) {
    s[i] = T(1) / (T(1) + std::exp(-v[i]));
    out[i] = margin + (T(1) - 2 * margin) * s[i];
  }
  return afrp::detail::make_result<T>(std::move(out), {x}, [margin, s = std::move(s)](Node<T>& self) {
    auto& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < s.size(); ++i) dx[i] += self.grad[i] * (T(1) - 2 * margin) * s[i] * (T(1) - s[i]);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return afrp::detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& d = self.inputs[k]->grad_buffer();
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return afrp::detail::make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      const T sign = k == 0 ? T(1) : T(-1);
      auto& d = self.inputs[k]->grad_buffer();
      for (std::size_t i = 0; i < d.numel(); ++i) d[i] += sign * self.grad[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = s * a.value()[i];
  return afrp::detail::make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += s * self.grad[i];
  });
}

/// Channel concatenation of two NCHW tensors with equal N, H, W.
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::check_rank(a, 4, "concat_channels");
  detail::check_rank(b, 4, "concat_channels");
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
  detail::require(b.dim(0) == N && b.dim(2) == a.dim(2) && b.dim(3) == a.dim(3),
                  "concat_channels: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out({N, Ca + Cb, a.dim(2), a.dim(3)});
  const std::size_t sa = static_cast<std::size_t>(Ca) * HW, sb = static_cast<std::size_t>(Cb) * HW;
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * sa, sa, out.data() + n * (sa + sb));
    std::copy_n(b.value().data() + n * sb, sb, out.data() + n * (sa + sb) + sa);
  }
  return afrp::detail::make_result<T>(std::move(out), {a, b}, [=](Node<T>& self) {
    for (int n = 0; n < N; ++n) {
      const T* g = self.grad.data() + n * (sa + sb);
      if (detail::wants_grad(self, 0)) {
        T* d = self.inputs[0]->grad_buffer().data() + n * sa;
        for (std::size_t i = 0; i < sa; ++i) d[i] += g[i];
      }
      if (detail::wants_grad(self, 1)) {
        T* d = self.inputs[1]->grad_buffer().data() + n * sb;
        for (std::size_t i = 0; i < sb; ++i) d[i] += g[sa + i];
      }
    }
  });
}

/// Replicates v: [N,A] to [N,A,H,W].
template <class T>
Var<T> tile_spatial(const Var<T>& v, int H, int W) {
  detail::check_rank(v, 2, "tile_spatial");
  const int N = v.dim(0), A = v.dim(1), HW = H * W;
  Tensor<T> out({N, A, H, W});
  for (int n = 0; n < N; ++n)
    for (int a = 0; a < A; ++a) std::fill_n(out.data() + (static_cast<std::size_t>(n) * A + a) * HW, HW, v.value()[n * A + a]);
  return afrp::detail::make_result<T>(std::move(out), {v}, [=](Node<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (int i = 0; i < N * A; ++i) {
      const T* g = self.grad.data() + static_cast<std::size_t>(i) * HW;
      T s = 0;
      for (int j = 0; j < HW; ++j) s += g[j];
      d[i] += s;
    }
  });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape s) {
  Tensor<T> out = x.value().reshaped(std::move(s));
  return afrp::detail::make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < d.numel(); ++i) d[i] += self.grad[i];
  });
}

template <class T>
Var<T> flatten(const Var<T>& x) {
  const int N = x.dim(0);
  return reshape(x, {N, static_cast<int>(x.numel() / N)});
}

/// Non-overlapping average pooling by an integer factor.
template <class T>
Var<T> avg_pool(const Var<T>& x, int factor) {
  detail::check_rank(x, 4, "avg_pool");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(factor >= 1 && H % factor == 0 && W % factor == 0, "avg_pool: size not divisible by factor");
  const int Ho = H / factor, Wo = W / factor;
  const T inv = T(1) / T(factor * factor);
  Tensor<T> out({N, C, Ho, Wo});
  for (int p = 0; p < N * C; ++p)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        out[(static_cast<std::size_t>(p) * Ho + y / factor) * Wo + xx / factor] +=
            inv * x.value()[(static_cast<std::size_t>(p) * H + y) * W + xx];
  return afrp::detail::make_result<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    for (int p = 0; p < N * C; ++p)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
          d[(static_cast<std::size_t>(p) * H + y) * W + xx] +=
              inv * self.grad[(static_cast<std::size_t>(p) * Ho + y / factor) * Wo + xx / factor];
  });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::check_rank(x, 4, "global_avg_pool");
  detail::require(x.dim(2) == x.dim(3), "global_avg_pool: non-square input");
  return reshape(avg_pool(x, x.dim(2)), {x.dim(0), x.dim(1)});
}

/// Affine resampling with bilinear interpolation and edge clamping.
/// theta: [N,6] row-major 2x3 maps output normalized coords (align-corners
/// convention, [-1,1]) onto input normalized coords.
template <class T>
Var<T> affine_sample(const Var<T>& x, const Var<T>& theta) {
  detail::check_rank(x, 4, "affine_sample");
  detail::check_rank(theta, 2, "affine_sample theta");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::require(theta.dim(0) == N && theta.dim(1) == 6, "affine_sample: theta must be [N,6]");
  const T sx = W > 1 ? T(W - 1) / 2 : T(0), sy = H > 1 ? T(H - 1) / 2 : T(0);
  auto norm_x = [W](int j) { return W > 1 ? T(-1) + T(2) * j / T(W - 1) : T(0); };
  auto norm_y = [H](int i) { return H > 1 ? T(-1) + T(2) * i / T(H - 1) : T(0); };

  // Per output location: source pixel coords and whether each coord was clamped.
  struct Sample {
    T px, py;
    bool cx, cy;
  };
  if (!theta.value().all_finite()) throw NumericError("affine_sample: non-finite transform parameters");
  std::vector<Sample> samples(static_cast<std::size_t>(N) * H * W);
  Tensor<T> out(x.shape());
  for (int n = 0; n < N; ++n) {
    const T* th = theta.value().data() + n * 6;
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const T xs = norm_x(j), ys = norm_y(i);
        T px = (th[0] * xs + th[1] * ys + th[2] + T(1)) * sx;
        T py = (th[3] * xs + th[4] * ys + th[5] + T(1)) * sy;
        Sample s{px, py, false, false};
        if (s.px < 0 || s.px > W - 1) { s.px = std::clamp(s.px, T(0), T(W - 1)); s.cx = true; }
        if (s.py < 0 || s.py > H - 1) { s.py = std::clamp(s.py, T(0), T(H - 1)); s.cy = true; }
        samples[(static_cast<std::size_t>(n) * H + i) * W + j] = s;
        const int x0 = std::min(static_cast<int>(std::floor(s.px)), W - 1), y0 = std::min(static_cast<int>(std::floor(s.py)), H - 1);
        const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        const T wx = s.px - x0, wy = s.py - y0;
        for (int c = 0; c < C; ++c) {
          const T* pl = x.value().data() + (static_cast<std::size_t>(n) * C + c) * H * W;
          out.at4(n, c, i, j) = (1 - wy) * ((1 - wx) * pl[y0 * W + x0] + wx * pl[y0 * W + x1]) +
                                wy * ((1 - wx) * pl[y1 * W + x0] + wx * pl[y1 * W + x1]);
        }
      }
  }
  return afrp::detail::make_result<T>(std::move(out), {x, theta}, [=, samples = std::move(samples)](Node<T>& self) {
    const bool gx = detail::wants_grad(self, 0), gt = detail::wants_grad(self, 1);
    const Tensor<T>& xv = self.inputs[0]->value;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const Sample& s = samples[(static_cast<std::size_t>(n) * H + i) * W + j];
          const int x0 = std::min(static_cast<int>(std::floor(s.px)), W - 1), y0 = std::min(static_cast<int>(std::floor(s.py)), H - 1);
          const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
          const T wx = s.px - x0, wy = s.py - y0;
          T dpx = 0, dpy = 0;
          for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * H * W;
            const T g = self.grad[base + static_cast<std::size_t>(i) * W + j];
            if (g == T(0)) continue;
            if (gx) {
              auto& d = self.inputs[0]->grad_buffer();
              d[base + y0 * W + x0] += g * (1 - wy) * (1 - wx);
              d[base + y0 * W + x1] += g * (1 - wy) * wx;
              d[base + y1 * W + x0] += g * wy * (1 - wx);
              d[base + y1 * W + x1] += g * wy * wx;
            }
            if (gt) {
              const T* pl = xv.data() + base;
              const T v00 = pl[y0 * W + x0], v01 = pl[y0 * W + x1], v10 = pl[y1 * W + x0], v11 = pl[y1 * W + x1];
              dpx += g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10));
              dpy += g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01));
            }
          }
          if (gt) {
            if (s.cx) dpx = 0;
            if (s.cy) dpy = 0;
            const T xs = norm_x(j), ys = norm_y(i);
            auto& dth = self.inputs[1]->grad_buffer();
            T* d = dth.data() + n * 6;
            d[0] += dpx * sx * xs;
            d[1] += dpx * sx * ys;
            d[2] += dpx * sx;
            d[3] += dpy * sy * xs;
            d[4] += dpy * sy * ys;
            d[5] += dpy * sy;
          }
        }
  });
}

/// Mean of squared differences over all elements.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  Tensor<T> out({1}, acc / T(n));
  return afrp::detail::make_result<T>(std::move(out), {a, b}, [n](Node<T>& self) {
    const T g = self.grad[0] * T(2) / T(n);
    const auto& av = self.inputs[0]->value;
    const auto& bv = self.inputs[1]->value;
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& d = self.inputs[k]->grad_buffer();
      const T sign = k == 0 ? T(1) : T(-1);
      for (std::size_t i = 0; i < n; ++i) d[i] += sign * g * (av[i] - bv[i]);
    }
  });
}

/// mean(log(clamp(p))) when complement is false, mean(log(1 - clamp(p)))
/// otherwise. Clamping to [lo, hi] zeroes the gradient outside the range.
template <class T>
Var<T> mean_log(const Var<T>& p, bool complement, T lo, T hi) {
  const std::size_t n = p.numel();
  detail::require(n > 0, "mean_log: empty input");
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T q = std::clamp(p.value()[i], lo, hi);
    acc += std::log(complement ? T(1) - q : q);
  }
  Tensor<T> out({1}, acc / T(n));
  return afrp::detail::make_result<T>(std::move(out), {p}, [=](Node<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    const auto& pv = self.inputs[0]->value;
    const T g = self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T v = pv[i];
      if (v < lo || v > hi) continue;
      d[i] += complement ? -g / (T(1) - v) : g / v;
    }
  });
}

/// Softmax cross-entropy of logits [N,K] against integer labels.
template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  detail::check_rank(logits, 2, "cross_entropy");
  const int N = logits.dim(0), K = logits.dim(1);
  detail::require(static_cast<int>(labels.size()) == N, "cross_entropy: label count mismatch");
  std::vector<T> probs(static_cast<std::size_t>(N) * K);
  T loss = 0;
  for (int n = 0; n < N; ++n) {
    const T* z = logits.value().data() + static_cast<std::size_t>(n) * K;
    const T m = *std::max_element(z, z + K);
    T s = 0;
    for (int k = 0; k < K; ++k) s += std::exp(z[k] - m);
    for (int k = 0; k < K; ++k) probs[n * K + k] = std::exp(z[k] - m) / s;
    detail::require(labels[n] >= 0 && labels[n] < K, "cross_entropy: label out of range");
    loss -= z[labels[n]] - m - std::log(s);
  }
  Tensor<T> out({1}, loss / T(N));
  return afrp::detail::make_result<T>(std::move(out), {logits}, [=, probs = std::move(probs)](Node<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    const T g = self.grad[0] / T(N);
    for (int n = 0; n < N; ++n)
      for (int k = 0; k < K; ++k) d[n * K + k] += g * (probs[n * K + k] - (k == labels[n] ? T(1) : T(0)));
  });
}

/// Mean binary cross-entropy of logits [N,K] against 0/1 targets.
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets) {
  detail::require(logits.shape() == targets.shape(), "bce_with_logits: shape mismatch");
  const std::size_t n = logits.numel();
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits.value()[i], y = targets[i];
    loss += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor<T> out({1}, loss / T(n));
  return afrp::detail::make_result<T>(std::move(out), {logits}, [n, targets](Node<T>& self) {
    auto& d = self.inputs[0]->grad_buffer();
    const T g = self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T z = self.inputs[0]->value[i];
      d[i] += g * (T(1) / (T(1) + std::exp(-z)) - targets[i]);
    }
  });
}

}  // namespace ops
}  // namespace afrp
