#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "afrp/image.hpp"

namespace afrp {

/// 10 log10(peak^2 / MSE); +infinity when the images are identical.
inline double psnr(const FaceImage& a, const FaceImage& b, double peak = 1.0) {
  detail::require(a.same_shape(b), "psnr: image shapes differ");
  detail::require(peak > 0, "psnr: peak must be positive");
  double s = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = double(a.pixels[i]) - double(b.pixels[i]);
    s += d * d;
  }
  const double mse = s / static_cast<double>(a.pixels.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_kernel(int size, double sigma) {
  std::vector<double> k(size);
  const double c = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) k[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
  const double s = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= s;
  return k;
}

// Separable valid-mode filtering of a single-channel plane.
inline std::vector<double> filter_valid(const std::vector<double>& plane, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size()), ho = h - n + 1, wo = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo), out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += k[i] * plane[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * wo + x] = s;
    }
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = s;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM over all valid window positions and channels.
inline double ssim(const FaceImage& a, const FaceImage& b, const SsimParams& p = {}) {
  detail::require(a.same_shape(b), "ssim: image shapes differ");
  detail::require(a.height >= p.window && a.width >= p.window,
                  "ssim: image " + std::to_string(a.height) + "x" + std::to_string(a.width) + " is smaller than the " +
                      std::to_string(p.window) + "x" + std::to_string(p.window) + " window");
  const double c1 = (p.k1 * p.dynamic_range) * (p.k1 * p.dynamic_range);
  const double c2 = (p.k2 * p.dynamic_range) * (p.k2 * p.dynamic_range);
  const auto k = detail::gaussian_kernel(p.window, p.sigma);
  const int h = a.height, w = a.width;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  double total = 0;
  std::size_t count = 0;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> x(hw), y(hw), xx(hw), yy(hw), xy(hw);
    for (std::size_t i = 0; i < hw; ++i) {
      x[i] = a.pixels[i * 3 + c];
      y[i] = b.pixels[i * 3 + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, h, w, k), my = detail::filter_valid(y, h, w, k);
    const auto sxx = detail::filter_valid(xx, h, w, k), syy = detail::filter_valid(yy, h, w, k);
    const auto sxy = detail::filter_valid(xy, h, w, k);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// ---- retrieval -------------------------------------------------------------------

using Embedding = std::vector<double>;

/// Maps images to feature vectors compared by Euclidean distance.
struct Embedder {
  std::string id;
  std::function<std::vector<Embedding>(std::span<const FaceImage>)> embed;
};

/// Indices of the top_k nearest gallery entries, ordered by (distance,
/// gallery index).
inline std::vector<std::size_t> nearest(const Embedding& q, const std::vector<Embedding>& gallery, int top_k) {
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(gallery.size());
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    detail::require(gallery[g].size() == q.size(), "retrieval: embedding dimensions differ");
    double s = 0;
    for (std::size_t i = 0; i < q.size(); ++i) s += (q[i] - gallery[g][i]) * (q[i] - gallery[g][i]);
    d.emplace_back(s, g);
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(top_k), d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<long>(k), d.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

/// Fraction of queries whose label is among the labels of their top_k
/// nearest gallery embeddings.
inline double retrieval_ratio(const std::vector<Embedding>& queries, std::span<const std::string> query_labels,
                              const std::vector<Embedding>& gallery, std::span<const std::string> gallery_labels,
                              int top_k = 5) {
  detail::require(queries.size() == query_labels.size() && gallery.size() == gallery_labels.size(),
                  "retrieval: label counts do not match embeddings");
  detail::require(!queries.empty() && !gallery.empty(), "retrieval: empty queries or gallery");
  detail::require(top_k >= 1, "retrieval: top_k must be >= 1");
  for (const auto& l : query_labels)
    detail::require(std::find(gallery_labels.begin(), gallery_labels.end(), l) != gallery_labels.end(),
                    "retrieval: query identity '" + l + "' has no gallery image");
  std::size_t hits = 0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t g : nearest(queries[q], gallery, top_k))
      if (gallery_labels[g] == query_labels[q]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(queries.size());
}

inline double face_retrieval_ratio(std::span<const FaceImage> queries, std::span<const std::string> query_labels,
                                   std::span<const FaceImage> gallery, std::span<const std::string> gallery_labels,
                                   const Embedder& embedder, int top_k = 5) {
  detail::require(queries.size() == query_labels.size() && gallery.size() == gallery_labels.size(),
                  "face_retrieval_ratio: label counts do not match images");
  return retrieval_ratio(embedder.embed(queries), query_labels, embedder.embed(gallery), gallery_labels, top_k);
}

// ---- attribute probe -------------------------------------------------------------

struct ProbeSettings {
  double increased = 1.5;
  double decreased = -0.5;
  friend bool operator==(const ProbeSettings&, const ProbeSettings&) = default;
};

struct AttributeProbeResult {
  std::string attribute;
  double gt_accuracy = 0;         // classifier agreement with the true label
  double increased_positive = 0;  // fraction classified positive
  double decreased_positive = 0;
  std::size_t count = 0;
  friend bool operator==(const AttributeProbeResult&, const AttributeProbeResult&) = default;
};

/// `recover` maps (portraits, attribute vectors) to recovered faces;
/// `classify` returns, per image, whether attribute `index` is present.
using RecoverFn = std::function<std::vector<FaceImage>(std::span<const FaceImage>, std::span<const AttributeVector>)>;
using ClassifyFn = std::function<std::vector<bool>(std::span<const FaceImage>, std::size_t index)>;

inline AttributeProbeResult attribute_probe(const RecoverFn& recover, const ClassifyFn& classify,
                                            std::span<const FaceImage> portraits,
                                            std::span<const AttributeVector> truth, std::string_view attribute,
                                            const ProbeSettings& settings = {}) {
  const std::size_t idx = require_attribute(attribute);
  detail::require(!portraits.empty() && portraits.size() == truth.size(),
                  "attribute_probe: need one attribute vector per portrait");
  AttributeProbeResult r;
  r.attribute = std::string(attribute);
  r.count = portraits.size();
  auto run = [&](std::optional<double> value) {
    std::vector<AttributeVector> attrs(truth.begin(), truth.end());
    if (value)
      for (auto& a : attrs) a[idx] = *value;
    return classify(recover(portraits, attrs), idx);
  };
  const auto gt = run(std::nullopt), up = run(settings.increased), down = run(settings.decreased);
  for (std::size_t i = 0; i < portraits.size(); ++i) {
    r.gt_accuracy += (gt[i] == (truth[i][idx] >= 0.5));
    r.increased_positive += up[i];
    r.decreased_positive += down[i];
  }
  r.gt_accuracy /= static_cast<double>(r.count);
  r.increased_positive /= static_cast<double>(r.count);
  r.decreased_positive /= static_cast<double>(r.count);
  return r;
}

}  // namespace afrp
