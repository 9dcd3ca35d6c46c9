#pragma once

#include <cstdio>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "afrp/core_model.hpp"
#include "afrp/dataset.hpp"
#include "afrp/metrics.hpp"
#include "afrp/probes.hpp"

namespace afrp {

struct EvalOptions {
  int top_k = 5;
  std::vector<std::string> probe_attributes{"Black_Hair", "Eyeglasses", "Smiling"};
  ProbeSettings settings;
  std::size_t batch_size = 32;

  friend bool operator==(const EvalOptions&, const EvalOptions&) = default;
};

inline void to_json(nlohmann::json& j, const EvalOptions& o) {
  j = {{"top_k", o.top_k},
       {"probe_attributes", o.probe_attributes},
       {"increased", o.settings.increased},
       {"decreased", o.settings.decreased},
       {"batch_size", o.batch_size}};
}
inline void from_json(const nlohmann::json& j, EvalOptions& o) {
  const EvalOptions d;
  o.top_k = j.value("top_k", d.top_k);
  o.probe_attributes = j.value("probe_attributes", d.probe_attributes);
  o.settings.increased = j.value("increased", d.settings.increased);
  o.settings.decreased = j.value("decreased", d.settings.decreased);
  o.batch_size = j.value("batch_size", d.batch_size);
}

struct StyleEval {
  std::string style_id;
  std::size_t count = 0;
  double psnr_recovered = 0;
  double psnr_portrait = 0;
  double ssim_recovered = 0;
  double ssim_portrait = 0;
  std::size_t frr_queries = 0;
  double frr = 0;
  friend bool operator==(const StyleEval&, const StyleEval&) = default;
};

struct EvalReport {
  std::vector<StyleEval> styles;
  StyleEval aggregate;
  double frr_random_baseline = 0;  // top_k / gallery size
  std::size_t gallery_size = 0;
  int top_k = 5;
  std::vector<AttributeProbeResult> probes;
  std::string model_hash;
  std::string probe_hash;
  std::string config_hash;
  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

namespace detail {
// JSON has no infinity; an exact recovery is written as the string "inf".
inline nlohmann::json finite_or_tag(double v) { return std::isinf(v) ? nlohmann::json("inf") : nlohmann::json(v); }
inline double read_tagged(const nlohmann::json& j) {
  return j.is_string() && j.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity() : j.get<double>();
}
}  // namespace detail

inline void to_json(nlohmann::json& j, const StyleEval& s) {
  j = {{"style_id", s.style_id},
       {"count", s.count},
       {"psnr_recovered", detail::finite_or_tag(s.psnr_recovered)},
       {"psnr_portrait", detail::finite_or_tag(s.psnr_portrait)},
       {"ssim_recovered", s.ssim_recovered},
       {"ssim_portrait", s.ssim_portrait},
       {"frr_queries", s.frr_queries},
       {"frr", s.frr}};
}
inline void from_json(const nlohmann::json& j, StyleEval& s) {
  s.style_id = j.at("style_id").get<std::string>();
  s.count = j.at("count").get<std::size_t>();
  s.psnr_recovered = detail::read_tagged(j.at("psnr_recovered"));
  s.psnr_portrait = detail::read_tagged(j.at("psnr_portrait"));
  s.ssim_recovered = j.at("ssim_recovered").get<double>();
  s.ssim_portrait = j.at("ssim_portrait").get<double>();
  s.frr_queries = j.at("frr_queries").get<std::size_t>();
  s.frr = j.at("frr").get<double>();
}
inline void to_json(nlohmann::json& j, const AttributeProbeResult& r) {
  j = {{"attribute", r.attribute},
       {"gt_accuracy", r.gt_accuracy},
       {"increased_positive", r.increased_positive},
       {"decreased_positive", r.decreased_positive},
       {"count", r.count}};
}
inline void from_json(const nlohmann::json& j, AttributeProbeResult& r) {
  r.attribute = j.at("attribute").get<std::string>();
  r.gt_accuracy = j.at("gt_accuracy").get<double>();
  r.increased_positive = j.at("increased_positive").get<double>();
  r.decreased_positive = j.at("decreased_positive").get<double>();
  r.count = j.at("count").get<std::size_t>();
}
inline void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"styles", r.styles},
       {"aggregate", r.aggregate},
       {"frr_random_baseline", r.frr_random_baseline},
       {"gallery_size", r.gallery_size},
       {"top_k", r.top_k},
       {"probes", r.probes},
       {"model_hash", r.model_hash},
       {"probe_hash", r.probe_hash},
       {"config_hash", r.config_hash}};
}
inline void from_json(const nlohmann::json& j, EvalReport& r) {
  r.styles = j.at("styles").get<std::vector<StyleEval>>();
  r.aggregate = j.at("aggregate").get<StyleEval>();
  r.frr_random_baseline = j.at("frr_random_baseline").get<double>();
  r.gallery_size = j.at("gallery_size").get<std::size_t>();
  r.top_k = j.at("top_k").get<int>();
  r.probes = j.at("probes").get<std::vector<AttributeProbeResult>>();
  r.model_hash = j.at("model_hash").get<std::string>();
  r.probe_hash = j.at("probe_hash").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
}

/// Count-weighted mean of per-style values; FRR is weighted by its query
/// count.
inline StyleEval aggregate_styles(const std::vector<StyleEval>& styles) {
  StyleEval a;
  a.style_id = "all";
  for (const auto& s : styles) {
    a.count += s.count;
    a.frr_queries += s.frr_queries;
  }
  for (const auto& s : styles) {
    const double w = a.count ? static_cast<double>(s.count) / static_cast<double>(a.count) : 0.0;
    a.psnr_recovered += w * s.psnr_recovered;
    a.psnr_portrait += w * s.psnr_portrait;
    a.ssim_recovered += w * s.ssim_recovered;
    a.ssim_portrait += w * s.ssim_portrait;
    if (a.frr_queries) a.frr += static_cast<double>(s.frr_queries) / static_cast<double>(a.frr_queries) * s.frr;
  }
  return a;
}

inline std::string format_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed;
  os << "style        count  PSNR(rec)  PSNR(in)  SSIM(rec)  SSIM(in)  FRR@" << r.top_k << "\n";
  auto row = [&os](const StyleEval& s) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-12s %5zu  %9.3f  %8.3f  %9.4f  %8.4f  %6.3f\n", s.style_id.c_str(), s.count,
                  s.psnr_recovered, s.psnr_portrait, s.ssim_recovered, s.ssim_portrait, s.frr);
    os << buf;
  };
  for (const auto& s : r.styles) row(s);
  row(r.aggregate);
  char buf[160];
  std::snprintf(buf, sizeof buf, "random FRR baseline %.4f (gallery %zu)\n", r.frr_random_baseline, r.gallery_size);
  os << buf;
  if (!r.probes.empty()) {
    os << "attribute         GT acc  increased  decreased\n";
    for (const auto& p : r.probes) {
      std::snprintf(buf, sizeof buf, "%-16s %7.3f  %9.3f  %9.3f\n", p.attribute.c_str(), p.gt_accuracy,
                    p.increased_positive, p.decreased_positive);
      os << buf;
    }
  }
  os << "model " << r.model_hash << "  probes " << r.probe_hash << "  config " << r.config_hash << "\n";
  return os.str();
}

/// Recovers every test portrait with ground-truth attributes and scores
/// it against its aligned real face. The retrieval gallery holds the first
/// real face of every identity in the manifest; queries whose own real face
/// is that gallery image are skipped.
inline EvalReport evaluate(const ModelBundle<float>& bundle, const DatasetManifest& m, const ProbeSet& probes,
                           const EvalOptions& opt = {}) {
  detail::require(opt.top_k >= 1, "evaluate: top_k must be >= 1");
  detail::require(opt.batch_size >= 1, "evaluate: batch_size must be >= 1");
  for (const auto& a : opt.probe_attributes) require_attribute(a);
  detail::require(bundle.frn.config().input_size == m.image_size,
                  "evaluate: model expects " + std::to_string(bundle.frn.config().input_size) + "px images, dataset has " +
                      std::to_string(m.image_size));
  const auto test = load_triplets(m, Split::Test);
  detail::require(!test.empty(), "evaluate: the manifest has no test records");

  std::map<std::string, std::string> gallery_face;  // identity -> face id
  std::map<std::string, std::string> gallery_path;
  for (const auto& r : m.records) {
    auto it = gallery_face.find(r.identity_id);
    if (it == gallery_face.end() || r.face_id < it->second) {
      gallery_face[r.identity_id] = r.face_id;
      gallery_path[r.identity_id] = r.real_path;
    }
  }
  std::vector<FaceImage> gallery;
  std::vector<std::string> gallery_labels;
  for (const auto& [id, rel] : gallery_path) {
    gallery.push_back(read_png(m.root / rel));
    gallery_labels.push_back(id);
  }
  const Embedder emb = probes.embedder();
  const auto gallery_emb = emb.embed(gallery);

  auto recover = [&](std::span<const FaceImage> portraits, std::span<const AttributeVector> attrs) {
    std::vector<FaceImage> out;
    for (std::size_t s = 0; s < portraits.size(); s += opt.batch_size) {
      const std::size_t n = std::min(opt.batch_size, portraits.size() - s);
      auto part = recover_images(bundle.frn, portraits.subspan(s, n), attrs.subspan(s, n));
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  };

  std::vector<FaceImage> portraits;
  std::vector<AttributeVector> truth;
  for (const auto& t : test) {
    portraits.push_back(t.portrait);
    truth.push_back(t.attributes);
  }
  const auto recovered = recover(portraits, truth);
  const auto recovered_emb = emb.embed(recovered);

  EvalReport rep;
  rep.top_k = opt.top_k;
  rep.gallery_size = gallery.size();
  rep.frr_random_baseline = std::min(1.0, static_cast<double>(opt.top_k) / static_cast<double>(gallery.size()));
  for (const auto& style : m.styles) {
    StyleEval s;
    s.style_id = style;
    std::vector<Embedding> q;
    std::vector<std::string> ql;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& rec = m.records[test[i].record];
      if (rec.style_id != style) continue;
      ++s.count;
      s.psnr_recovered += psnr(recovered[i], test[i].real);
      s.psnr_portrait += psnr(test[i].portrait, test[i].real);
      s.ssim_recovered += ssim(recovered[i], test[i].real);
      s.ssim_portrait += ssim(test[i].portrait, test[i].real);
      if (gallery_face.at(rec.identity_id) == rec.face_id) continue;
      q.push_back(recovered_emb[i]);
      ql.push_back(rec.identity_id);
    }
    if (s.count == 0) continue;
    const double n = static_cast<double>(s.count);
    s.psnr_recovered /= n;
    s.psnr_portrait /= n;
    s.ssim_recovered /= n;
    s.ssim_portrait /= n;
    s.frr_queries = q.size();
    if (!q.empty()) s.frr = retrieval_ratio(q, ql, gallery_emb, gallery_labels, opt.top_k);
    rep.styles.push_back(s);
  }
  rep.aggregate = aggregate_styles(rep.styles);

  const ClassifyFn classify = probes.classifier();
  for (const auto& a : opt.probe_attributes)
    rep.probes.push_back(attribute_probe(recover, classify, portraits, truth, a, opt.settings));

  rep.model_hash = bundle.hash();
  rep.probe_hash = probes.hash();
  std::ostringstream os;
  os << std::hex << hash_string(rep.model_hash + rep.probe_hash + nlohmann::json(opt).dump());
  rep.config_hash = os.str();
  return rep;
}

}  // namespace afrp
