#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "afrp/core_model.hpp"
#include "afrp/evaluation.hpp"
#include "afrp/probes.hpp"
#include "afrp/stylize.hpp"
#include "afrp/training.hpp"

namespace afrp {

struct DataSection {
  std::string dataset_dir = "data";
  std::string faces_dir;  // optional external face folder; empty uses procedural faces
  int image_size = 64;
  int faces = 200;
  int images_per_identity = 5;
  double test_fraction = 0.2;
  MisalignBounds misalign;
  std::uint64_t seed = 0;
  friend bool operator==(const DataSection&, const DataSection&) = default;
};

struct StyleSection {
  std::vector<std::string> candidates{"edge", "posterize", "texture", "swirl"};
  std::vector<std::string> selected;  // empty: pick `top_k` by distinctiveness
  int top_k = 3;
  int sample_faces = 64;
  friend bool operator==(const StyleSection&, const StyleSection&) = default;
};

struct ServiceSection {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t cache_capacity = 64;
  std::string model_path;
  friend bool operator==(const ServiceSection&, const ServiceSection&) = default;
};

/// One JSON document with a section per module. Every field has a default;
/// unknown keys at any depth are rejected.
struct ProjectConfig {
  DataSection data;
  FrnConfig frn;
  DnConfig dn;
  TrainConfig train;
  StyleSection styles;
  ProbeConfig probes;
  std::string probes_path;
  EvalOptions evaluation;
  ServiceSection service;
  friend bool operator==(const ProjectConfig&, const ProjectConfig&) = default;

  void validate() const {
    if (data.image_size < 16) throw ConfigError("data.image_size must be >= 16");
    if (data.faces < 1 || data.images_per_identity < 1) throw ConfigError("data.faces and data.images_per_identity must be >= 1");
    if (!(data.test_fraction > 0 && data.test_fraction < 1)) throw ConfigError("data.test_fraction must lie in (0,1)");
    frn.validate();
    dn.validate();
    train.validate();
    probes.validate();
    if (frn.input_size != data.image_size || dn.input_size != data.image_size)
      throw ConfigError("frn.input_size and dn.input_size must equal data.image_size");
    for (const auto& s : styles.candidates) {
      try {
        stylizer_by_id(s);
      } catch (const ContractError& e) {
        throw ConfigError(std::string("styles.candidates: ") + e.what());
      }
    }
    if (styles.top_k < 1) throw ConfigError("styles.top_k must be >= 1");
    if (service.port < 0 || service.port > 65535) throw ConfigError("service.port out of range");
    if (service.cache_capacity < 1) throw ConfigError("service.cache_capacity must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const DataSection& d) {
  j = {{"dataset_dir", d.dataset_dir},
       {"faces_dir", d.faces_dir},
       {"image_size", d.image_size},
       {"faces", d.faces},
       {"images_per_identity", d.images_per_identity},
       {"test_fraction", d.test_fraction},
       {"max_rotation_deg", d.misalign.max_rotation_deg},
       {"max_translation_frac", d.misalign.max_translation_frac},
       {"seed", d.seed}};
}
inline void from_json(const nlohmann::json& j, DataSection& d) {
  d.dataset_dir = j.at("dataset_dir").get<std::string>();
  d.faces_dir = j.at("faces_dir").get<std::string>();
  d.image_size = j.at("image_size").get<int>();
  d.faces = j.at("faces").get<int>();
  d.images_per_identity = j.at("images_per_identity").get<int>();
  d.test_fraction = j.at("test_fraction").get<double>();
  d.misalign.max_rotation_deg = j.at("max_rotation_deg").get<double>();
  d.misalign.max_translation_frac = j.at("max_translation_frac").get<double>();
  d.seed = j.at("seed").get<std::uint64_t>();
}
inline void to_json(nlohmann::json& j, const StyleSection& s) {
  j = {{"candidates", s.candidates}, {"selected", s.selected}, {"top_k", s.top_k}, {"sample_faces", s.sample_faces}};
}
inline void from_json(const nlohmann::json& j, StyleSection& s) {
  s.candidates = j.at("candidates").get<std::vector<std::string>>();
  s.selected = j.at("selected").get<std::vector<std::string>>();
  s.top_k = j.at("top_k").get<int>();
  s.sample_faces = j.at("sample_faces").get<int>();
}
inline void to_json(nlohmann::json& j, const ServiceSection& s) {
  j = {{"host", s.host}, {"port", s.port}, {"cache_capacity", s.cache_capacity}, {"model_path", s.model_path}};
}
inline void from_json(const nlohmann::json& j, ServiceSection& s) {
  s.host = j.at("host").get<std::string>();
  s.port = j.at("port").get<int>();
  s.cache_capacity = j.at("cache_capacity").get<std::size_t>();
  s.model_path = j.at("model_path").get<std::string>();
}
inline void to_json(nlohmann::json& j, const ProjectConfig& c) {
  j = {{"data", c.data},   {"frn", c.frn},       {"dn", c.dn},
       {"train", c.train}, {"styles", c.styles}, {"probes", c.probes},
       {"probes_path", c.probes_path}, {"evaluation", c.evaluation}, {"service", c.service}};
}
inline void from_json(const nlohmann::json& j, ProjectConfig& c) {
  c.data = j.at("data").get<DataSection>();
  c.frn = j.at("frn").get<FrnConfig>();
  c.dn = j.at("dn").get<DnConfig>();
  c.train = j.at("train").get<TrainConfig>();
  c.styles = j.at("styles").get<StyleSection>();
  c.probes = j.at("probes").get<ProbeConfig>();
  c.probes_path = j.at("probes_path").get<std::string>();
  c.evaluation = j.at("evaluation").get<EvalOptions>();
  c.service = j.at("service").get<ServiceSection>();
}

namespace detail {
// Every key of `given` must exist in `reference`; objects are compared
// recursively.
inline void check_known_keys(const nlohmann::json& given, const nlohmann::json& reference, const std::string& path) {
  if (!given.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + " must be a JSON object");
  for (const auto& [key, value] : given.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!reference.contains(key)) throw ConfigError("unknown config key '" + here + "'");
    if (reference.at(key).is_object()) check_known_keys(value, reference.at(key), here);
  }
}
}  // namespace detail

/// Overlays `j` on the defaults.
inline ProjectConfig parse_project_config(const nlohmann::json& j) {
  const nlohmann::json defaults = ProjectConfig{};
  detail::check_known_keys(j, defaults, "");
  nlohmann::json merged = defaults;
  merged.merge_patch(j);
  ProjectConfig c;
  try {
    c = merged.get<ProjectConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config value: ") + e.what());
  }
  c.validate();
  return c;
}

inline ProjectConfig load_project_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_project_config(j);
}

}  // namespace afrp
