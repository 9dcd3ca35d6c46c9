#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "afrp/error.hpp"

namespace afrp {

inline constexpr std::size_t kAttributeCount = 20;

inline constexpr std::array<std::string_view, kAttributeCount> kAttributeNames = {
    "Bald",       "Bangs",        "Big_Nose",  "Black_Hair",  "Blond_Hair",     "Brown_Hair",    "Eyeglasses",
    "Gray_Hair",  "Heavy_Makeup", "Male",      "Mouth_Open",  "Mustache",       "Narrow_Eyes",   "No_Beard",
    "Pale_Skin",  "Smiling",      "Straight_Hair", "Wavy_Hair", "Wearing_Lipstick", "Young"};

/// Value used for attributes whose ground truth is unknown.
inline constexpr double kNeutralAttribute = 0.5;

inline std::optional<std::size_t> attribute_index(std::string_view name) {
  for (std::size_t i = 0; i < kAttributeCount; ++i)
    if (kAttributeNames[i] == name) return i;
  return std::nullopt;
}

inline std::size_t require_attribute(std::string_view name) {
  auto i = attribute_index(name);
  if (!i) throw ContractError("unknown attribute name '" + std::string(name) + "'");
  return *i;
}

/// Twenty named attribute values in the fixed vocabulary order. Labels are
/// 0/1; manipulation values may leave [0,1].
struct AttributeVector {
  std::array<double, kAttributeCount> values{};

  static AttributeVector neutral() {
    AttributeVector a;
    a.values.fill(kNeutralAttribute);
    return a;
  }

  static AttributeVector from(const std::vector<double>& v) {
    if (v.size() != kAttributeCount)
      throw ContractError("attribute vector must have 20 entries, got " + std::to_string(v.size()));
    AttributeVector a;
    for (std::size_t i = 0; i < kAttributeCount; ++i) a.values[i] = v[i];
    return a;
  }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::string_view name) { return values[require_attribute(name)]; }
  double operator[](std::string_view name) const { return values[require_attribute(name)]; }

  bool is_binary() const {
    for (double v : values)
      if (v != 0.0 && v != 1.0) return false;
    return true;
  }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const AttributeVector&, const AttributeVector&) = default;
};

}  // namespace afrp
