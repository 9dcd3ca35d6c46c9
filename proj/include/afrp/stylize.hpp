#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "afrp/image.hpp"
#include "afrp/rng.hpp"
#include "json.hpp"

namespace afrp {

/// A deterministic image-to-image style mapping. Output has the input's
/// shape and stays in [0,1]; `seed` drives any randomness.
class Stylizer {
 public:
  virtual ~Stylizer() = default;
  virtual std::string style_id() const = 0;
  virtual FaceImage apply(const FaceImage& image, std::uint64_t seed) const = 0;
};

namespace detail {

inline float luminance(const FaceImage& img, int y, int x) {
  return 0.299f * img.clamped(y, x, 0) + 0.587f * img.clamped(y, x, 1) + 0.114f * img.clamped(y, x, 2);
}

}  // namespace detail

/// Inverted grayscale Sobel magnitude: dark strokes on white paper.
class EdgeSketchStylizer final : public Stylizer {
 public:
  explicit EdgeSketchStylizer(double gain = 2.5) : gain_(gain) {}
  std::string style_id() const override { return "edge"; }
  FaceImage apply(const FaceImage& img, std::uint64_t) const override {
    FaceImage out(img.height, img.width);
    auto L = [&](int y, int x) { return detail::luminance(img, y, x); };
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double gx = (L(y - 1, x + 1) + 2 * L(y, x + 1) + L(y + 1, x + 1)) -
                          (L(y - 1, x - 1) + 2 * L(y, x - 1) + L(y + 1, x - 1));
        const double gy = (L(y + 1, x - 1) + 2 * L(y + 1, x) + L(y + 1, x + 1)) -
                          (L(y - 1, x - 1) + 2 * L(y - 1, x) + L(y - 1, x + 1));
        const float v = static_cast<float>(1.0 - std::min(1.0, gain_ * std::hypot(gx, gy) / 4.0));
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = v;
      }
    return out;
  }

 private:
  double gain_;
};

/// Rounds every channel to one of `levels` evenly spaced values.
class PosterizeStylizer final : public Stylizer {
 public:
  explicit PosterizeStylizer(int levels = 4) : levels_(levels) {
    detail::require(levels >= 2, "posterize needs at least 2 levels");
  }
  std::string style_id() const override { return "posterize"; }
  FaceImage apply(const FaceImage& img, std::uint64_t) const override {
    FaceImage out = img;
    const float k = static_cast<float>(levels_ - 1);
    for (float& v : out.pixels) v = std::round(std::clamp(v, 0.0f, 1.0f) * k) / k;
    return out;
  }

 private:
  int levels_;
};

/// Blends seeded value noise (bilinear over a coarse lattice, tinted) over
/// the image at a fixed opacity.
class TextureOverlayStylizer final : public Stylizer {
 public:
  explicit TextureOverlayStylizer(double opacity = 0.4, int cells = 8) : opacity_(opacity), cells_(cells) {}
  std::string style_id() const override { return "texture"; }
  FaceImage apply(const FaceImage& img, std::uint64_t seed) const override {
    Rng rng(derive_seed(seed, hash_string("texture")));
    const int g = cells_ + 1;
    std::vector<double> lattice(static_cast<std::size_t>(g) * g);
    for (double& v : lattice) v = rng.uniform();
    const double tint[3] = {rng.uniform(0.6, 1.0), rng.uniform(0.4, 0.9), rng.uniform(0.2, 0.7)};
    FaceImage out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double fy = double(y) / std::max(1, img.height - 1) * cells_;
        const double fx = double(x) / std::max(1, img.width - 1) * cells_;
        const int y0 = std::min(static_cast<int>(fy), cells_ - 1), x0 = std::min(static_cast<int>(fx), cells_ - 1);
        const double wy = fy - y0, wx = fx - x0;
        auto at = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * g + xx]; };
        const double n = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
                         wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
        // Fine grain on top of the smooth field.
        const double grain = 0.15 * (rng.uniform() - 0.5);
        for (int c = 0; c < 3; ++c) {
          const double tex = std::clamp(n * tint[c] + grain, 0.0, 1.0);
          out.at(y, x, c) = static_cast<float>((1 - opacity_) * img.at(y, x, c) + opacity_ * tex);
        }
      }
    out.clamp01();
    return out;
  }

 private:
  double opacity_;
  int cells_;
};

/// Hue rotation about the gray axis followed by a swirl warp around the
/// image centre.
class ColorSwirlStylizer final : public Stylizer {
 public:
  explicit ColorSwirlStylizer(double hue_degrees = 120.0, double strength = 1.6)
      : hue_(hue_degrees * std::numbers::pi / 180.0), strength_(strength) {}
  std::string style_id() const override { return "swirl"; }
  FaceImage apply(const FaceImage& img, std::uint64_t) const override {
    const double cs = std::cos(hue_), sn = std::sin(hue_), k = 1.0 / 3.0, r3 = std::sqrt(k);
    double m[3][3];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        // Rodrigues rotation about (1,1,1)/sqrt(3).
        const double cross = (i == j) ? 0.0 : (((j - i + 3) % 3 == 1) ? -r3 : r3);
        m[i][j] = (i == j ? cs : 0.0) + (1 - cs) * k + sn * cross;
      }
    const double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
    const double radius = 0.5 * std::min(img.height, img.width);
    FaceImage out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const double dy = y - cy, dx = x - cx, r = std::hypot(dy, dx);
        const double angle = strength_ * std::exp(-r / (0.6 * radius));
        const double sy = cy + dx * std::sin(angle) + dy * std::cos(angle);
        const double sx = cx + dx * std::cos(angle) - dy * std::sin(angle);
        double rgb[3];
        for (int c = 0; c < 3; ++c) rgb[c] = img.bilinear(sy, sx, c);
        for (int i = 0; i < 3; ++i)
          out.at(y, x, i) = static_cast<float>(std::clamp(m[i][0] * rgb[0] + m[i][1] * rgb[1] + m[i][2] * rgb[2], 0.0, 1.0));
      }
    return out;
  }

 private:
  double hue_, strength_;
};

/// Leaves images unchanged. A zero-distance reference for style selection.
class IdentityStylizer final : public Stylizer {
 public:
  std::string style_id() const override { return "identity"; }
  FaceImage apply(const FaceImage& img, std::uint64_t) const override { return img; }
};

using StylizerList = std::vector<std::shared_ptr<const Stylizer>>;

inline StylizerList procedural_stylizers() {
  return {std::make_shared<EdgeSketchStylizer>(), std::make_shared<PosterizeStylizer>(),
          std::make_shared<TextureOverlayStylizer>(), std::make_shared<ColorSwirlStylizer>()};
}

/// Built-ins plus "identity", looked up by id.
inline std::shared_ptr<const Stylizer> stylizer_by_id(const std::string& id) {
  for (auto& s : procedural_stylizers())
    if (s->style_id() == id) return s;
  if (id == "identity") return std::make_shared<IdentityStylizer>();
  throw ContractError("unknown style '" + id + "' (known: edge, posterize, texture, swirl, identity)");
}

// ---- misalignment ------------------------------------------------------------

struct Misalignment {
  double rotation_deg = 0.0;
  double dx_px = 0.0;
  double dy_px = 0.0;
  friend bool operator==(const Misalignment&, const Misalignment&) = default;
};

inline void to_json(nlohmann::json& j, const Misalignment& m) {
  j = {{"rotation_deg", m.rotation_deg}, {"dx_px", m.dx_px}, {"dy_px", m.dy_px}};
}
inline void from_json(const nlohmann::json& j, Misalignment& m) {
  m.rotation_deg = j.at("rotation_deg").get<double>();
  m.dx_px = j.at("dx_px").get<double>();
  m.dy_px = j.at("dy_px").get<double>();
}

struct MisalignBounds {
  double max_rotation_deg = 15.0;
  double max_translation_frac = 0.10;  // of image width
  friend bool operator==(const MisalignBounds&, const MisalignBounds&) = default;
};

/// Rotates about the image centre by `m.rotation_deg` (clockwise in image
/// coordinates) and then shifts by (dx, dy). Bilinear, edge padded.
inline FaceImage apply_misalignment(const FaceImage& img, const Misalignment& m) {
  const double th = m.rotation_deg * std::numbers::pi / 180.0, c = std::cos(th), s = std::sin(th);
  const double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
  FaceImage out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double ox = x - m.dx_px - cx, oy = y - m.dy_px - cy;
      const double sx = cx + c * ox + s * oy, sy = cy - s * ox + c * oy;
      for (int ch = 0; ch < 3; ++ch) out.at(y, x, ch) = img.bilinear(sy, sx, ch);
    }
  return out;
}

inline std::pair<FaceImage, Misalignment> misalign(const FaceImage& img, double max_rotation_deg, double max_translation_px,
                                                   std::uint64_t seed) {
  detail::require(max_rotation_deg >= 0 && max_translation_px >= 0, "misalign: bounds must be nonnegative");
  Rng rng(derive_seed(seed, hash_string("misalign")));
  Misalignment m;
  m.rotation_deg = max_rotation_deg * (2 * rng.uniform() - 1);
  m.dx_px = max_translation_px * (2 * rng.uniform() - 1);
  m.dy_px = max_translation_px * (2 * rng.uniform() - 1);
  return {apply_misalignment(img, m), m};
}

}  // namespace afrp
