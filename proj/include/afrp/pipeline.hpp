#pragma once

// Workflows shared by the command-line tool and the acceptance runner.

#include <filesystem>
#include <string>
#include <vector>

#include "afrp/config.hpp"
#include "afrp/dataset.hpp"
#include "afrp/evaluation.hpp"
#include "afrp/probes.hpp"
#include "afrp/style_metric.hpp"
#include "afrp/training.hpp"

namespace afrp {

/// Procedural faces (identity-major, truncated to `faces`) or an external
/// folder when `faces_dir` is set.
inline std::vector<RealFace> source_faces(const DataSection& d) {
  if (!d.faces_dir.empty()) return ingest_face_folder(d.faces_dir, d.image_size);
  const int ids = (d.faces + d.images_per_identity - 1) / d.images_per_identity;
  auto faces = generate_faces(ids, d.images_per_identity, d.image_size, d.seed);
  faces.resize(static_cast<std::size_t>(d.faces));
  return faces;
}

/// Untrained conv features: a fixed, seeded style descriptor for when no
/// trained probe is available.
inline ConvExtractor<float> default_style_extractor(int image_size, std::uint64_t seed) {
  ConvExtractorConfig c;
  c.input_size = image_size;
  c.embedding_dim = 0;
  return ConvExtractor<float>(c, derive_seed(seed, hash_string("style-extractor")), "random-conv");
}

/// Distinctiveness of every candidate style against the real faces, sorted
/// as select_training_styles would rank them.
inline std::vector<StyleProfile> rank_styles(std::span<const FaceImage> faces, const std::vector<std::string>& candidates,
                                             const FeatureExtractor<float>& extractor, std::uint64_t seed) {
  detail::require(!faces.empty(), "rank_styles: no faces");
  const StyleProfile real = compute_style_profile<float>("real", faces, extractor);
  std::vector<StyleProfile> out;
  for (const auto& id : candidates) {
    const auto st = stylizer_by_id(id);
    std::vector<FaceImage> styled;
    for (std::size_t i = 0; i < faces.size(); ++i) styled.push_back(st->apply(faces[i], derive_seed(seed, hash_string(id), i)));
    StyleProfile p = compute_style_profile<float>(id, styled, extractor);
    p.distinctiveness = profile_distance(p, real);
    out.push_back(std::move(p));
  }
  const auto order = select_training_styles(out, static_cast<int>(out.size()));
  std::vector<StyleProfile> sorted;
  for (const auto& id : order)
    for (const auto& p : out)
      if (p.style_id == id) sorted.push_back(p);
  return sorted;
}

inline StylizerList stylizers_for(const std::vector<std::string>& ids) {
  StylizerList out;
  for (const auto& id : ids) out.push_back(stylizer_by_id(id));
  return out;
}

/// Reads a model bundle or the bundle part of a training checkpoint.
inline ModelBundle<float> load_model(const std::filesystem::path& path) {
  Archive ar = read_archive(path);
  if (ar.header.value("kind", std::string()) == kCheckpointKind) ar.header["kind"] = kBundleKind;
  return bundle_from_archive<float>(ar);
}

}  // namespace afrp
