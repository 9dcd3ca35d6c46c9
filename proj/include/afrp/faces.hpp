#pragma once

// Procedural cartoon faces. Identity traits are fixed per identity; the
// per-image appearance adds the attributes that vary between photographs
// of one person (expression, accessories, makeup) plus pose and lighting
// jitter. Every attribute is drawn literally so its label is exact.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "afrp/attributes.hpp"
#include "afrp/image.hpp"
#include "afrp/rng.hpp"

namespace afrp {

using Rgb = std::array<double, 3>;

enum class HairColour { Black, Brown, Blond, Gray };

struct IdentityTraits {
  bool male = false, young = true, bald = false, wavy = false;
  bool big_nose = false, narrow_eyes = false, pale_skin = false;
  bool mustache = false, beard = false;
  HairColour hair = HairColour::Brown;
  Rgb skin{}, hair_rgb{}, iris{};
  double face_w = 0.56, face_h = 0.72, jaw_power = 2.0;
  double eye_y = -0.03, eye_sep = 0.21, eye_w = 0.09;
  double brow_gap = 0.11, brow_thick = 0.025, brow_tilt = 0.0;
  double nose_tip = 0.21, nose_w = 0.06;
  double mouth_y = 0.4, mouth_w = 0.16;
  double hairline = -0.47, hair_len = 0.0, wave_phase = 0.0;
};

struct Appearance {
  bool smiling = false, mouth_open = false, eyeglasses = false;
  bool lipstick = false, makeup = false, bangs = false;
  Rgb background{}, frame{};
  double dx = 0, dy = 0, scale = 1, light = 0;
};

struct FaceSpec {
  IdentityTraits identity;
  Appearance appearance;
};

namespace detail {

inline Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}
inline Rgb scaled(const Rgb& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline Rgb jitter(const Rgb& a, Rng& rng, double amount) {
  Rgb o;
  for (int c = 0; c < 3; ++c) o[c] = std::clamp(a[c] + rng.uniform(-amount, amount), 0.0, 1.0);
  return o;
}
inline double sq(double x) { return x * x; }
inline bool in_ellipse(double u, double v, double cu, double cv, double ru, double rv) {
  return sq((u - cu) / ru) + sq((v - cv) / rv) <= 1.0;
}

}  // namespace detail

inline IdentityTraits sample_identity(Rng& rng) {
  using detail::jitter;
  IdentityTraits t;
  t.male = rng.uniform() < 0.5;
  t.young = rng.uniform() < 0.6;
  t.bald = t.male && rng.uniform() < 0.25;
  t.pale_skin = rng.uniform() < 0.3;
  t.big_nose = rng.uniform() < 0.35;
  t.narrow_eyes = rng.uniform() < 0.3;
  t.mustache = t.male && rng.uniform() < 0.4;
  t.beard = t.male && rng.uniform() < 0.4;
  t.wavy = !t.bald && rng.uniform() < 0.45;

  const double g = rng.uniform();
  if (!t.young && g < 0.5)
    t.hair = HairColour::Gray;
  else {
    const double h = rng.uniform();
    t.hair = h < 0.36 ? HairColour::Black : h < 0.72 ? HairColour::Brown : HairColour::Blond;
  }
  static const Rgb kHair[] = {{0.07, 0.06, 0.06}, {0.42, 0.25, 0.12}, {0.94, 0.80, 0.42}, {0.72, 0.72, 0.74}};
  t.hair_rgb = jitter(kHair[static_cast<int>(t.hair)], rng, 0.04);

  if (t.pale_skin)
    t.skin = jitter({0.97, 0.88, 0.83}, rng, 0.02);
  else
    t.skin = jitter(detail::mix({0.90, 0.72, 0.56}, {0.52, 0.35, 0.22}, rng.uniform()), rng, 0.02);
  static const Rgb kIris[] = {{0.35, 0.20, 0.08}, {0.20, 0.45, 0.80}, {0.25, 0.55, 0.30}, {0.45, 0.48, 0.52}};
  t.iris = jitter(kIris[rng.below(4)], rng, 0.05);

  t.face_w = rng.uniform(0.50, 0.62);
  t.face_h = rng.uniform(0.66, 0.78);
  t.jaw_power = t.male ? rng.uniform(2.3, 2.9) : rng.uniform(1.8, 2.2);
  t.eye_y = rng.uniform(-0.08, 0.02);
  t.eye_sep = rng.uniform(0.18, 0.25);
  t.eye_w = rng.uniform(0.075, 0.105);
  t.brow_gap = rng.uniform(0.09, 0.13);
  t.brow_thick = t.male ? rng.uniform(0.025, 0.04) : rng.uniform(0.014, 0.024);
  t.brow_tilt = rng.uniform(-0.35, 0.35);
  t.nose_tip = t.eye_y + rng.uniform(0.19, 0.25);
  t.nose_w = t.big_nose ? rng.uniform(0.095, 0.12) : rng.uniform(0.045, 0.06);
  t.mouth_y = t.nose_tip + rng.uniform(0.13, 0.18);
  t.mouth_w = rng.uniform(0.12, 0.18);
  t.hairline = rng.uniform(-0.52, -0.42);
  t.hair_len = t.male ? rng.uniform(0.0, 0.1) : rng.uniform(0.45, 0.8);
  t.wave_phase = rng.uniform(0, 6.283);
  return t;
}

inline Appearance sample_appearance(const IdentityTraits& id, Rng& rng) {
  Appearance a;
  a.smiling = rng.uniform() < 0.5;
  a.mouth_open = rng.uniform() < 0.4;
  a.eyeglasses = rng.uniform() < 0.35;
  a.lipstick = id.male ? rng.uniform() < 0.05 : rng.uniform() < 0.55;
  a.makeup = id.male ? rng.uniform() < 0.05 : rng.uniform() < 0.45;
  a.bangs = !id.bald && rng.uniform() < 0.35;
  const double grey = rng.uniform(0.3, 0.8);
  a.background = detail::jitter({grey, grey, grey}, rng, 0.12);
  a.frame = detail::jitter({0.12, 0.12, 0.14}, rng, 0.08);
  a.dx = rng.uniform(-0.03, 0.03);
  a.dy = rng.uniform(-0.03, 0.03);
  a.scale = rng.uniform(0.97, 1.03);
  a.light = rng.uniform(-0.08, 0.08);
  return a;
}

inline AttributeVector face_attributes(const FaceSpec& f) {
  const auto& t = f.identity;
  const auto& a = f.appearance;
  AttributeVector v;
  auto set = [&](std::string_view name, bool on) { v[name] = on ? 1.0 : 0.0; };
  set("Bald", t.bald);
  set("Bangs", a.bangs);
  set("Big_Nose", t.big_nose);
  set("Black_Hair", !t.bald && t.hair == HairColour::Black);
  set("Blond_Hair", !t.bald && t.hair == HairColour::Blond);
  set("Brown_Hair", !t.bald && t.hair == HairColour::Brown);
  set("Eyeglasses", a.eyeglasses);
  set("Gray_Hair", !t.bald && t.hair == HairColour::Gray);
  set("Heavy_Makeup", a.makeup);
  set("Male", t.male);
  set("Mouth_Open", a.mouth_open);
  set("Mustache", t.mustache);
  set("Narrow_Eyes", t.narrow_eyes);
  set("No_Beard", !t.beard);
  set("Pale_Skin", t.pale_skin);
  set("Smiling", a.smiling);
  set("Straight_Hair", !t.bald && !t.wavy);
  set("Wavy_Hair", !t.bald && t.wavy);
  set("Wearing_Lipstick", a.lipstick);
  set("Young", t.young);
  return v;
}

namespace detail {

// Colour at face coordinates (u right, v down, both roughly in [-1,1]).
inline Rgb shade_face(const FaceSpec& f, double u, double v) {
  const auto& t = f.identity;
  const auto& a = f.appearance;
  const double cy = 0.05;
  const double hair_r = t.face_w + 0.1;
  const double wave = t.wavy ? 0.035 * std::sin(14.0 * std::atan2(v - cy, u) + t.wave_phase) : 0.0;
  const bool in_hair_shape = sq(u / (hair_r + wave)) + sq((v - cy + 0.06) / (t.face_h + 0.1 + wave)) <= 1.0;
  const double face_p =
      std::pow(std::abs(u) / t.face_w, v > cy ? t.jaw_power : 2.0) + std::pow(std::abs(v - cy) / t.face_h, 2.0);
  const bool in_face = face_p <= 1.0;

  Rgb c = a.background;
  // Long hair behind the head and shoulders.
  if (!t.bald && in_hair_shape && v > cy - 0.2 && v < cy + t.hair_len) c = t.hair_rgb;
  // Neck and shoulders.
  if (std::abs(u) < 0.2 && v > cy && v < 1.0) c = scaled(t.skin, 0.9);
  if (v > 0.82 && std::abs(u) < 0.75 - (1.0 - v) * 0.3) c = {0.25, 0.3, 0.45};
  // Ears.
  for (double side : {-1.0, 1.0})
    if (in_ellipse(u, v, side * t.face_w, t.eye_y + 0.07, 0.06, 0.1)) c = scaled(t.skin, 0.93);
  // Top of the head.
  if (!t.bald && in_hair_shape && v < cy - 0.2) c = t.hair_rgb;
  if (!in_face) return c;

  c = t.skin;
  if (t.bald && v < t.hairline && in_ellipse(u, v, -0.12, cy - t.face_h * 0.75, 0.12, 0.05)) c = mix(c, {1, 1, 1}, 0.35);
  const double fringe = a.bangs ? t.eye_y - t.brow_gap - 0.045 : t.hairline + wave * 0.6;
  if (!t.bald && v < fringe) return t.hair_rgb;

  // Age lines.
  if (!t.young) {
    for (double ly : {t.hairline + 0.1, t.hairline + 0.16})
      if (v > fringe && std::abs(v - ly - 0.02 * std::sin(u * 8)) < 0.007 && std::abs(u) < 0.25)
        c = scaled(c, 0.78);
    for (double side : {-1.0, 1.0}) {
      const double su = side * (t.nose_w + 0.05 + (v - t.nose_tip) * 0.5);
      if (v > t.nose_tip - 0.02 && v < t.mouth_y && std::abs(u - su) < 0.008) c = scaled(c, 0.8);
    }
  }
  // Beard and mustache.
  const Rgb facial_hair = t.bald ? Rgb{0.2, 0.15, 0.1} : scaled(t.hair_rgb, 0.8);
  if (t.beard && v > t.mouth_y - 0.03 && (std::abs(u) > t.mouth_w * 0.4 || v > t.mouth_y + 0.06)) c = mix(c, facial_hair, 0.85);
  if (t.mustache && std::abs(u) < t.mouth_w * 0.95 && v > t.mouth_y - 0.075 && v < t.mouth_y - 0.03)
    c = mix(c, facial_hair, 0.9);
  // Makeup: blush and eye shadow.
  if (a.makeup) {
    for (double side : {-1.0, 1.0}) {
      if (in_ellipse(u, v, side * (t.eye_sep + 0.03), t.mouth_y - 0.13, 0.08, 0.06)) c = mix(c, {0.95, 0.45, 0.55}, 0.4);
      if (in_ellipse(u, v, side * t.eye_sep, t.eye_y - 0.035, t.eye_w * 1.3, 0.05)) c = mix(c, {0.45, 0.3, 0.65}, 0.6);
    }
  }
  // Brows.
  const Rgb brow = t.bald ? Rgb{0.22, 0.16, 0.1} : scaled(t.hair_rgb, 0.75);
  for (double side : {-1.0, 1.0}) {
    const double du = u - side * t.eye_sep;
    const double by = t.eye_y - t.brow_gap + side * du * t.brow_tilt * 0.3;
    if (std::abs(du) < t.eye_w * 1.25 && std::abs(v - by) < t.brow_thick * 0.5) c = brow;
  }
  // Eyes.
  const double eye_h = t.eye_w * (t.narrow_eyes ? 0.32 : 0.68);
  for (double side : {-1.0, 1.0}) {
    const double eu = side * t.eye_sep;
    if (in_ellipse(u, v, eu, t.eye_y, t.eye_w, eye_h)) {
      c = {0.97, 0.97, 0.95};
      const double ir = std::min(eye_h, t.eye_w * 0.5);
      if (in_ellipse(u, v, eu, t.eye_y, ir, ir)) c = t.iris;
      if (in_ellipse(u, v, eu, t.eye_y, ir * 0.45, ir * 0.45)) c = {0.03, 0.03, 0.03};
    } else if (in_ellipse(u, v, eu, t.eye_y, t.eye_w + 0.012, eye_h + 0.012)) {
      c = scaled(t.skin, 0.55);
    }
  }
  // Nose.
  const double nose_top = t.eye_y + 0.04;
  if (v > nose_top && v < t.nose_tip) {
    const double half = t.nose_w * 0.5 * (0.3 + 0.7 * (v - nose_top) / (t.nose_tip - nose_top));
    if (std::abs(std::abs(u) - half) < 0.008) c = scaled(t.skin, t.big_nose ? 0.6 : 0.72);
  }
  if (in_ellipse(u, v, 0, t.nose_tip, t.nose_w, 0.03)) c = scaled(t.skin, t.big_nose ? 0.8 : 0.88);
  for (double side : {-1.0, 1.0})
    if (in_ellipse(u, v, side * t.nose_w * 0.45, t.nose_tip + 0.005, t.nose_w * 0.22, 0.012)) c = scaled(t.skin, 0.45);
  // Mouth.
  const Rgb lip = a.lipstick ? Rgb{0.82, 0.06, 0.16} : mix(t.skin, {0.75, 0.35, 0.35}, 0.55);
  const double mw = a.smiling ? t.mouth_w * 1.3 : t.mouth_w;
  if (std::abs(u) < mw) {
    const double curve = a.smiling ? 0.065 * (1.0 - sq(u / mw)) - 0.03 : 0.0;
    const double line = t.mouth_y + curve;
    if (a.mouth_open) {
      const double depth = (a.smiling ? 0.075 : 0.06) * std::sqrt(std::max(0.0, 1.0 - sq(u / mw)));
      if (v > line - 0.012 && v < line + depth + 0.012) c = lip;
      if (v > line && v < line + depth) c = {0.25, 0.05, 0.08};
      if (v > line && v < line + std::min(depth, 0.018) && std::abs(u) < mw * 0.7) c = {0.96, 0.95, 0.9};
    } else if (a.smiling) {
      // Closed grin: a band of teeth framed by the lips.
      const double half = 0.026 * std::sqrt(std::max(0.0, 1.0 - sq(u / mw)));
      if (std::abs(v - line) < half + (a.lipstick ? 0.016 : 0.01)) c = lip;
      if (std::abs(v - line) < half) c = {0.96, 0.95, 0.9};
    } else if (std::abs(v - line) < (a.lipstick ? 0.02 : 0.012)) {
      c = lip;
    }
  }
  // Glasses drawn last so they sit on top of everything.
  if (a.eyeglasses) {
    const double r = t.eye_w * 1.45;
    for (double side : {-1.0, 1.0}) {
      const double d = std::hypot(u - side * t.eye_sep, (v - t.eye_y) * 1.15);
      if (std::abs(d - r) < 0.02) c = a.frame;
    }
    if (std::abs(u) < t.eye_sep - r && std::abs(v - t.eye_y + 0.01) < 0.014) c = a.frame;
  }
  return c;
}

}  // namespace detail

/// Renders with 3x3 supersampling.
inline FaceImage render_face(const FaceSpec& f, int size) {
  detail::require(size >= 8, "render_face: size must be at least 8");
  FaceImage img(size, size);
  const auto& a = f.appearance;
  constexpr int kSub = 3;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = (x + (sx + 0.5) / kSub) / size * 2.0 - 1.0;
          const double py = (y + (sy + 0.5) / kSub) / size * 2.0 - 1.0;
          const double u = (px - a.dx) / a.scale * 1.08, v = (py - a.dy) / a.scale * 1.08;
          const Rgb c = detail::shade_face(f, u, v);
          const double light = 1.0 + a.light * u;
          for (int ch = 0; ch < 3; ++ch) acc[ch] += c[ch] * light;
        }
      for (int ch = 0; ch < 3; ++ch)
        img.at(y, x, ch) = static_cast<float>(std::clamp(acc[ch] / (kSub * kSub), 0.0, 1.0));
    }
  return img;
}

/// One real face with its exact labels.
struct RealFace {
  FaceImage image;
  AttributeVector attributes;
  std::string identity_id;
};

/// `identities` people with `images_per_identity` photographs each, in
/// identity-major order. Identity ids are "p0000", "p0001", ...
inline std::vector<RealFace> generate_faces(int identities, int images_per_identity, int size, std::uint64_t seed) {
  detail::require(identities >= 1 && images_per_identity >= 1, "generate_faces: counts must be positive");
  std::vector<RealFace> out;
  out.reserve(static_cast<std::size_t>(identities) * images_per_identity);
  for (int p = 0; p < identities; ++p) {
    Rng id_rng(derive_seed(seed, hash_string("identity"), p));
    const IdentityTraits traits = sample_identity(id_rng);
    char name[16];
    std::snprintf(name, sizeof name, "p%04d", p);
    for (int i = 0; i < images_per_identity; ++i) {
      Rng img_rng(derive_seed(seed, hash_string("appearance"), static_cast<std::uint64_t>(p) * 100003 + i));
      FaceSpec spec{traits, sample_appearance(traits, img_rng)};
      out.push_back({render_face(spec, size), face_attributes(spec), name});
    }
  }
  return out;
}

}  // namespace afrp
