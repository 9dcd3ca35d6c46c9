#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "afrp/attributes.hpp"
#include "afrp/tensor.hpp"

namespace afrp {

/// H x W x 3 image with interleaved channels and values in [0,1].
struct FaceImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  FaceImage() = default;
  FaceImage(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {
    detail::require(h > 0 && w > 0, "image dimensions must be positive");
  }

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

  /// Edge-clamped read.
  float clamped(int y, int x, int c) const {
    return at(std::clamp(y, 0, height - 1), std::clamp(x, 0, width - 1), c);
  }

  /// Bilinear read at fractional coordinates, edge-clamped.
  float bilinear(double y, double x, int c) const {
    y = std::clamp(y, 0.0, double(height - 1));
    x = std::clamp(x, 0.0, double(width - 1));
    const int y0 = std::min(static_cast<int>(y), height - 1), x0 = std::min(static_cast<int>(x), width - 1);
    const int y1 = std::min(y0 + 1, height - 1), x1 = std::min(x0 + 1, width - 1);
    const double wy = y - y0, wx = x - x0;
    return static_cast<float>((1 - wy) * ((1 - wx) * at(y0, x0, c) + wx * at(y0, x1, c)) +
                              wy * ((1 - wx) * at(y1, x0, c) + wx * at(y1, x1, c)));
  }

  void clamp01() {
    for (float& v : pixels) v = std::clamp(v, 0.0f, 1.0f);
  }

  bool in_unit_range() const {
    return std::all_of(pixels.begin(), pixels.end(), [](float v) { return std::isfinite(v) && v >= 0.0f && v <= 1.0f; });
  }

  bool same_shape(const FaceImage& o) const { return height == o.height && width == o.width; }

  friend bool operator==(const FaceImage&, const FaceImage&) = default;
};

template <class T>
Tensor<T> images_to_tensor(std::span<const FaceImage> images) {
  detail::require(!images.empty(), "empty image batch");
  const int H = images[0].height, W = images[0].width, N = static_cast<int>(images.size());
  Tensor<T> t({N, 3, H, W});
  for (int n = 0; n < N; ++n) {
    detail::require(images[n].height == H && images[n].width == W, "image batch has mixed sizes");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) t.at4(n, c, y, x) = static_cast<T>(images[n].at(y, x, c));
  }
  return t;
}

template <class T>
FaceImage tensor_to_image(const Tensor<T>& t, int n) {
  detail::require(t.rank() == 4 && t.dim(1) == 3, "tensor_to_image expects [N,3,H,W], got " + shape_str(t.shape()));
  FaceImage img(t.dim(2), t.dim(3));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) img.at(y, x, c) = static_cast<float>(t.at4(n, c, y, x));
  return img;
}

template <class T>
std::vector<FaceImage> tensor_to_images(const Tensor<T>& t) {
  std::vector<FaceImage> out;
  for (int n = 0; n < t.dim(0); ++n) out.push_back(tensor_to_image(t, n));
  return out;
}

template <class T>
Tensor<T> attributes_to_tensor(std::span<const AttributeVector> attrs) {
  detail::require(!attrs.empty(), "empty attribute batch");
  const int N = static_cast<int>(attrs.size()), A = static_cast<int>(kAttributeCount);
  Tensor<T> t({N, A});
  for (int n = 0; n < N; ++n)
    for (int a = 0; a < A; ++a) t[n * A + a] = static_cast<T>(attrs[n][a]);
  return t;
}

inline FaceImage center_crop_square(const FaceImage& img) {
  const int side = std::min(img.height, img.width);
  const int y0 = (img.height - side) / 2, x0 = (img.width - side) / 2;
  FaceImage out(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y0 + y, x0 + x, c);
  return out;
}

namespace detail {

/// Area-weighted 1-D resampling weights: out[i] = sum_j w_ij in[j].
inline std::vector<std::vector<std::pair<int, double>>> area_weights(int in, int out) {
  std::vector<std::vector<std::pair<int, double>>> w(out);
  const double scale = double(in) / out;
  for (int i = 0; i < out; ++i) {
    if (scale <= 1.0) {
      // Upsampling: bilinear on pixel centers.
      const double src = std::clamp((i + 0.5) * scale - 0.5, 0.0, double(in - 1));
      const int j0 = static_cast<int>(src), j1 = std::min(j0 + 1, in - 1);
      const double f = src - j0;
      w[i].emplace_back(j0, 1.0 - f);
      if (j1 != j0) w[i].emplace_back(j1, f);
      else w[i][0].second = 1.0;
      continue;
    }
    const double lo = i * scale, hi = (i + 1) * scale;
    for (int j = static_cast<int>(lo); j < in && j < hi; ++j) {
      const double cover = std::min(hi, double(j + 1)) - std::max(lo, double(j));
      if (cover > 0) w[i].emplace_back(j, cover / scale);
    }
  }
  return w;
}

}  // namespace detail

/// Area-averaging resize (bilinear when upsampling).
inline FaceImage resize(const FaceImage& img, int out_h, int out_w) {
  if (img.height == out_h && img.width == out_w) return img;
  const auto wy = detail::area_weights(img.height, out_h);
  const auto wx = detail::area_weights(img.width, out_w);
  FaceImage tmp(img.height, out_w);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (auto [j, w] : wx[x]) s += w * img.at(y, j, c);
        tmp.at(y, x, c) = static_cast<float>(s);
      }
  FaceImage out(out_h, out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (auto [j, w] : wy[y]) s += w * tmp.at(j, x, c);
        out.at(y, x, c) = static_cast<float>(s);
      }
  out.clamp01();
  return out;
}

// ---- PNG ------------------------------------------------------------------

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline std::vector<std::uint8_t> encode_png(const FaceImage& img) {
  std::vector<std::uint8_t> rgb(img.pixels.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = to_byte(img.pixels[i]);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, rgb.data(), 0, nullptr))
    throw FormatError(std::string("png encode failed: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, rgb.data(), 0, nullptr))
    throw FormatError(std::string("png encode failed: ") + image.message);
  out.resize(size);
  return out;
}

/// Decodes any PNG colour type to RGB in [0,1].
inline FaceImage decode_png(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSig, 8) != 0) throw FormatError("not a PNG image");
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw FormatError(std::string("png decode failed: ") + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(image));
  png_color white{255, 255, 255};
  if (!png_image_finish_read(&image, &white, rgb.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError(std::string("png decode failed: ") + image.message);
  }
  FaceImage img(static_cast<int>(image.height), static_cast<int>(image.width));
  for (std::size_t i = 0; i < rgb.size(); ++i) img.pixels[i] = rgb[i] / 255.0f;
  return img;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline FaceImage read_png(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  try {
    return decode_png(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_png(const std::filesystem::path& path, const FaceImage& img) {
  write_file_bytes(path, encode_png(img));
}

/// Quantizes to 8 bits per channel, as a PNG round trip would.
inline FaceImage quantize8(FaceImage img) {
  for (float& v : img.pixels) v = to_byte(v) / 255.0f;
  return img;
}

}  // namespace afrp
