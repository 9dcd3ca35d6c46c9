#pragma once

#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <iostream>
#include <list>
#include <mutex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "afrp/core_model.hpp"
#include "httplib.h"
#include "json.hpp"

namespace afrp {

// ---- base64 ---------------------------------------------------------------------

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

/// Accepts an optional "data:...;base64," prefix and embedded whitespace.
inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.substr(0, 5) == "data:") {
    const auto comma = text.find(',');
    if (comma == std::string_view::npos) throw FormatError("data URL without payload");
    text.remove_prefix(comma + 1);
  }
  std::string clean;
  clean.reserve(text.size());
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  if (clean.size() % 4 != 0) throw FormatError("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(clean.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw FormatError("invalid base64");
  std::size_t pad = 0;
  for (auto it = clean.rbegin(); it != clean.rend() && *it == '=' && pad < 2; ++it) ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// ---- request parsing ------------------------------------------------------------

/// A client error carrying an HTTP status and the offending field.
class RequestError : public Error {
 public:
  RequestError(int status, std::string field, const std::string& msg)
      : Error(msg), status_(status), field_(std::move(field)) {}
  int status() const { return status_; }
  const std::string& field() const { return field_; }

 private:
  int status_;
  std::string field_;
};

/// Completes a request's attribute field to 20 values. Accepts an object of
/// name -> value, or an array of up to 20 numbers (nulls allowed); anything
/// omitted is 0.5. Values outside [0,1] are passed through.
inline AttributeVector parse_request_attributes(const nlohmann::json& body) {
  AttributeVector a = AttributeVector::neutral();
  if (!body.contains("attributes") || body.at("attributes").is_null()) return a;
  const auto& j = body.at("attributes");
  auto number = [](const nlohmann::json& v, const std::string& field) {
    if (!v.is_number()) throw RequestError(400, field, field + " must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw RequestError(400, field, field + " must be finite");
    return d;
  };
  if (j.is_object()) {
    for (const auto& [name, v] : j.items()) {
      auto idx = attribute_index(name);
      if (!idx) throw RequestError(400, "attributes." + name, "unknown attribute '" + name + "'");
      a[*idx] = number(v, "attributes." + name);
    }
  } else if (j.is_array()) {
    if (j.size() > kAttributeCount)
      throw RequestError(400, "attributes", "attributes array has " + std::to_string(j.size()) + " entries, at most 20 allowed");
    for (std::size_t i = 0; i < j.size(); ++i)
      if (!j[i].is_null()) a[i] = number(j[i], "attributes[" + std::to_string(i) + "]");
  } else {
    throw RequestError(400, "attributes", "attributes must be an object or an array");
  }
  return a;
}

inline std::string attrs_hash(const AttributeVector& a) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : a.values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int b = 0; b < 8; ++b) h = (h ^ ((bits >> (8 * b)) & 0xff)) * 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

/// Decodes an uploaded image and crops/resizes it to the model input size.
inline FaceImage preprocess_portrait(std::span<const std::uint8_t> png, int size) {
  FaceImage img = decode_png(png);
  return resize(center_crop_square(img), size, size);
}

// ---- portrait cache -------------------------------------------------------------

/// Thread-safe LRU map from portrait id to preprocessed image.
class PortraitCache {
 public:
  explicit PortraitCache(std::size_t capacity) : capacity_(capacity) {
    detail::require(capacity >= 1, "portrait cache capacity must be >= 1");
  }

  void put(const std::string& id, FaceImage img) {
    std::lock_guard lock(mu_);
    if (auto it = index_.find(id); it != index_.end()) order_.erase(it->second);
    order_.emplace_front(id, std::move(img));
    index_[id] = order_.begin();
    while (order_.size() > capacity_) {
      index_.erase(order_.back().first);
      order_.pop_back();
    }
  }

  std::optional<FaceImage> get(const std::string& id) {
    std::lock_guard lock(mu_);
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    order_.splice(order_.begin(), order_, it->second);
    return it->second->second;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return order_.size();
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::list<std::pair<std::string, FaceImage>> order_;
  std::unordered_map<std::string, std::list<std::pair<std::string, FaceImage>>::iterator> index_;
};

// ---- service --------------------------------------------------------------------

struct ServiceReply {
  int status = 200;
  nlohmann::json body;
};

/// Request handlers over a read-only model. Handlers take and return JSON so
/// they can be exercised without a socket; install() binds them to routes.
class RecoveryService {
 public:
  RecoveryService(ModelBundle<float> bundle, std::string config_hash, std::size_t cache_capacity = 64)
      : bundle_(std::move(bundle)), model_hash_(bundle_.hash()), config_hash_(std::move(config_hash)), cache_(cache_capacity) {}

  const std::string& model_hash() const { return model_hash_; }
  const ModelBundle<float>& bundle() const { return bundle_; }
  std::size_t cached_portraits() const { return cache_.size(); }

  ServiceReply attributes() const {
    nlohmann::json names = nlohmann::json::array();
    for (auto n : kAttributeNames) names.push_back(std::string(n));
    return {200, {{"attributes", names}}};
  }

  ServiceReply health() const {
    return {200, {{"status", "ok"}, {"model_hash", model_hash_}, {"config_hash", config_hash_}}};
  }

  ServiceReply upload(const std::string& body) {
    return guarded([&] {
      const auto j = parse_body(body);
      if (!j.contains("image") || !j.at("image").is_string())
        throw RequestError(400, "image", "image must be a base64 PNG string");
      FaceImage img = decode_image_field(j.at("image").get<std::string>(), "image");
      const std::string id = portrait_id(img);
      cache_.put(id, img);
      return ServiceReply{200, {{"portrait_id", id}, {"size", img.height}}};
    });
  }

  ServiceReply recover(const std::string& body) {
    return guarded([&] {
      const auto t0 = std::chrono::steady_clock::now();
      const auto j = parse_body(body);
      FaceImage portrait;
      nlohmann::json reply;
      if (j.contains("portrait_id")) {
        if (!j.at("portrait_id").is_string()) throw RequestError(400, "portrait_id", "portrait_id must be a string");
        const auto id = j.at("portrait_id").get<std::string>();
        auto hit = cache_.get(id);
        if (!hit) throw RequestError(404, "portrait_id", "unknown portrait_id '" + id + "'");
        portrait = std::move(*hit);
        reply["portrait_id"] = id;
      } else if (j.contains("portrait")) {
        if (!j.at("portrait").is_string()) throw RequestError(400, "portrait", "portrait must be a base64 PNG string");
        portrait = decode_image_field(j.at("portrait").get<std::string>(), "portrait");
      } else {
        throw RequestError(400, "portrait", "request needs portrait_id or portrait");
      }
      const AttributeVector attrs = parse_request_attributes(j);
      const auto out = recover_images(bundle_.frn, std::span<const FaceImage>(&portrait, 1),
                                      std::span<const AttributeVector>(&attrs, 1));
      for (float v : out.front().pixels)
        if (!std::isfinite(v)) throw std::runtime_error("model produced non-finite pixels");
      reply["image"] = base64_encode(encode_png(out.front()));
      reply["attributes"] = attrs.values;
      reply["attrs_hash"] = attrs_hash(attrs);
      reply["model_hash"] = model_hash_;
      reply["config_hash"] = config_hash_;
      reply["latency_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      if (j.contains("request_id")) reply["request_id"] = j.at("request_id");
      return ServiceReply{200, reply};
    });
  }

  void install(httplib::Server& server) {
    auto send = [](httplib::Response& res, const ServiceReply& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server.Get("/attributes", [this, send](const httplib::Request&, httplib::Response& res) { send(res, attributes()); });
    server.Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.Post("/portraits", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, upload(req.body)); });
    server.Post("/recover", [this, send](const httplib::Request& req, httplib::Response& res) { send(res, recover(req.body)); });
  }

 private:
  static nlohmann::json parse_body(const std::string& body) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw RequestError(400, "body", std::string("body is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw RequestError(400, "body", "body must be a JSON object");
    return j;
  }

  FaceImage decode_image_field(const std::string& text, const std::string& field) const {
    try {
      return preprocess_portrait(base64_decode(text), bundle_.frn.config().input_size);
    } catch (const FormatError& e) {
      throw RequestError(400, field, field + ": " + e.what());
    }
  }

  static std::string portrait_id(const FaceImage& img) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (float f : img.pixels) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << "p" << std::hex << h;
    return os.str();
  }

  template <class F>
  ServiceReply guarded(F&& f) {
    try {
      return f();
    } catch (const RequestError& e) {
      return {e.status(), {{"error", e.what()}, {"field", e.field()}}};
    } catch (const std::exception& e) {
      std::ostringstream id;
      id << "inc-" << std::hex << std::chrono::system_clock::now().time_since_epoch().count() << "-" << ++incidents_;
      std::cerr << "incident " << id.str() << ": " << e.what() << std::endl;
      return {500, {{"error", "inference failed"}, {"incident_id", id.str()}}};
    }
  }

  const ModelBundle<float> bundle_;
  const std::string model_hash_;
  const std::string config_hash_;
  PortraitCache cache_;
  std::atomic<std::uint64_t> incidents_{0};
};

}  // namespace afrp
