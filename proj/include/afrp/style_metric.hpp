#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "afrp/feature_extractor.hpp"
#include "afrp/image.hpp"

namespace afrp {

/// Channel correlation matrix of one feature map, normalized by 1/(H*W).
struct GramMatrix {
  Eigen::MatrixXd matrix;
  std::string layer_id;
  bool normalized = true;

  int dim() const { return static_cast<int>(matrix.rows()); }
};

/// Gram matrix of features laid out as C x (H*W), row-major.
inline GramMatrix gram_matrix(std::span<const double> features, int channels, int positions, std::string layer_id = {}) {
  detail::require(channels >= 1 && positions >= 1, "gram_matrix: need C >= 1 and H*W >= 1");
  detail::require(features.size() == static_cast<std::size_t>(channels) * positions,
                  "gram_matrix: feature buffer size does not match C*H*W");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(features.data(), channels,
                                                                                             positions);
  GramMatrix g;
  g.matrix = (f * f.transpose()) / static_cast<double>(positions);
  g.matrix = (0.5 * (g.matrix + g.matrix.transpose())).eval();
  g.layer_id = std::move(layer_id);
  return g;
}

/// Gram matrix of a [C,H,W] tensor.
template <class T>
GramMatrix gram_matrix(const Tensor<T>& features, std::string layer_id = {}) {
  detail::require(features.shape().size() == 3, "gram_matrix: expects a [C,H,W] tensor, got " + shape_str(features.shape()));
  std::vector<double> buf(features.vec().begin(), features.vec().end());
  return gram_matrix(buf, features.dim(0), features.dim(1) * features.dim(2), std::move(layer_id));
}

namespace detail {

inline void require_symmetric(const Eigen::MatrixXd& m, const char* what) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  require(asym <= 1e-9 * scale, std::string(what) + " is not symmetric (max asymmetry " + std::to_string(asym) + ")");
}

inline Eigen::MatrixXd spd_log(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition did not converge");
  const Eigen::VectorXd ev = es.eigenvalues();
  if (ev.minCoeff() <= 0) throw NumericError("matrix logarithm of a non-positive spectrum");
  return es.eigenvectors() * ev.array().log().matrix().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

inline constexpr double kDefaultSpdEps = 1e-6;

/// ||logm(A + eps I) - logm(B + eps I)||_F.
inline double log_euclidean_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double eps = kDefaultSpdEps) {
  detail::require(a.rows() == a.cols() && b.rows() == b.cols() && a.rows() == b.rows(),
                  "log_euclidean_distance: matrices must be square and of equal size");
  detail::require(eps > 0, "log_euclidean_distance: eps must be positive");
  detail::require_symmetric(a, "first matrix");
  detail::require_symmetric(b, "second matrix");
  const auto id = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  return (detail::spd_log(a + eps * id) - detail::spd_log(b + eps * id)).norm();
}

inline double log_euclidean_distance(const GramMatrix& a, const GramMatrix& b, double eps = kDefaultSpdEps) {
  return log_euclidean_distance(a.matrix, b.matrix, eps);
}

struct StyleProfile {
  std::string style_id;
  std::string extractor_id;
  std::vector<GramMatrix> mean_grams;
  double distinctiveness = 0.0;
};

inline void to_json(nlohmann::json& j, const StyleProfile& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& g : p.mean_grams) {
    std::vector<double> values(static_cast<std::size_t>(g.dim()) * g.dim());
    for (int r = 0; r < g.dim(); ++r)
      for (int c = 0; c < g.dim(); ++c) values[static_cast<std::size_t>(r) * g.dim() + c] = g.matrix(r, c);
    layers.push_back({{"layer_id", g.layer_id}, {"dim", g.dim()}, {"normalized", g.normalized}, {"values", values}});
  }
  j = {{"style_id", p.style_id}, {"extractor", p.extractor_id}, {"distinctiveness", p.distinctiveness},
       {"layers", layers}};
}

inline void from_json(const nlohmann::json& j, StyleProfile& p) {
  p.style_id = j.at("style_id").get<std::string>();
  p.extractor_id = j.at("extractor").get<std::string>();
  p.distinctiveness = j.at("distinctiveness").get<double>();
  p.mean_grams.clear();
  for (const auto& l : j.at("layers")) {
    GramMatrix g;
    g.layer_id = l.at("layer_id").get<std::string>();
    g.normalized = l.value("normalized", true);
    const int d = l.at("dim").get<int>();
    const auto values = l.at("values").get<std::vector<double>>();
    if (d < 1 || values.size() != static_cast<std::size_t>(d) * d)
      throw FormatError("style profile layer '" + g.layer_id + "' has inconsistent dimensions");
    g.matrix.resize(d, d);
    for (int r = 0; r < d; ++r)
      for (int c = 0; c < d; ++c) g.matrix(r, c) = values[static_cast<std::size_t>(r) * d + c];
    p.mean_grams.push_back(std::move(g));
  }
}

/// Per-layer mean Gram matrices of a set of images under `extractor`.
template <class T>
StyleProfile compute_style_profile(std::string style_id, std::span<const FaceImage> images,
                                   const FeatureExtractor<T>& extractor, int batch_size = 16) {
  detail::require(!images.empty(), "style profile needs at least one image");
  NoGradGuard no_grad;
  StyleProfile p;
  p.style_id = std::move(style_id);
  p.extractor_id = extractor.id();
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t end = std::min(images.size(), start + batch_size);
    auto batch = Var<T>::leaf(images_to_tensor<T>(images.subspan(start, end - start)));
    const auto layers = extractor.style_layers(batch);
    if (p.mean_grams.empty()) p.mean_grams.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& v = layers[l].value();
      const int C = v.dim(1), HW = v.dim(2) * v.dim(3);
      for (int n = 0; n < v.dim(0); ++n) {
        std::vector<double> buf(v.data() + static_cast<std::size_t>(n) * C * HW,
                                v.data() + static_cast<std::size_t>(n + 1) * C * HW);
        auto g = gram_matrix(buf, C, HW);
        auto& acc = p.mean_grams[l];
        if (acc.matrix.size() == 0) {
          acc.matrix = Eigen::MatrixXd::Zero(C, C);
          acc.layer_id = "layer" + std::to_string(l + 1);
        }
        acc.matrix += g.matrix;
      }
    }
  }
  for (auto& g : p.mean_grams) g.matrix /= static_cast<double>(images.size());
  return p;
}

/// Sum over layers of the Log-Euclidean distance between two profiles.
inline double profile_distance(const StyleProfile& a, const StyleProfile& b, double eps = kDefaultSpdEps) {
  detail::require(a.mean_grams.size() == b.mean_grams.size(), "profiles have different layer counts");
  double d = 0;
  for (std::size_t l = 0; l < a.mean_grams.size(); ++l) d += log_euclidean_distance(a.mean_grams[l], b.mean_grams[l], eps);
  return d;
}

template <class T>
double style_distinctiveness(std::span<const FaceImage> style_images, const StyleProfile& real_profile,
                             const FeatureExtractor<T>& extractor, double eps = kDefaultSpdEps) {
  detail::require(!style_images.empty(), "style_distinctiveness: empty image list");
  return profile_distance(compute_style_profile("candidate", style_images, extractor), real_profile, eps);
}

/// The k most distinctive style ids, descending; ties by style id.
inline std::vector<std::string> select_training_styles(std::vector<StyleProfile> profiles, int k) {
  detail::require(k >= 0 && k <= static_cast<int>(profiles.size()),
                  "select_training_styles: k=" + std::to_string(k) + " exceeds " + std::to_string(profiles.size()) +
                      " candidate styles");
  std::sort(profiles.begin(), profiles.end(), [](const StyleProfile& a, const StyleProfile& b) {
    if (a.distinctiveness != b.distinctiveness) return a.distinctiveness > b.distinctiveness;
    return a.style_id < b.style_id;
  });
  std::vector<std::string> out;
  for (int i = 0; i < k; ++i) out.push_back(profiles[i].style_id);
  return out;
}

}  // namespace afrp
