#pragma once

// Triplet dataset: (stylized portrait, aligned real face, attributes).
//
// Directory layout:
//   manifest.jsonl              header line, then one record per line
//   real/<face>.png             aligned real faces
//   portrait/<face>_<style>.png misaligned, stylized portraits
//   attributes.csv              20-name header, one 0/1 row per real face

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "afrp/faces.hpp"
#include "afrp/stylize.hpp"

namespace afrp {

namespace fs = std::filesystem;

inline constexpr int kManifestFormatVersion = 1;

enum class Split { Train, Test };

inline std::string split_name(Split s) { return s == Split::Train ? "train" : "test"; }
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw FormatError("unknown split '" + s + "'");
}

struct TripletRecord {
  std::string face_id;
  std::string identity_id;
  std::string style_id;
  std::string portrait_path;  // relative to the dataset root
  std::string real_path;
  AttributeVector attributes;
  Misalignment misalignment;
  Split split = Split::Train;
  friend bool operator==(const TripletRecord&, const TripletRecord&) = default;
};

struct DatasetManifest {
  std::vector<TripletRecord> records;
  int image_size = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> styles;
  fs::path root;  // not serialized; set by build/load

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == s) out.push_back(i);
    return out;
  }
  std::set<std::string> identities(Split s) const {
    std::set<std::string> out;
    for (const auto& r : records)
      if (r.split == s) out.insert(r.identity_id);
    return out;
  }
};

inline void to_json(nlohmann::json& j, const TripletRecord& r) {
  j = {{"face_id", r.face_id},
       {"identity_id", r.identity_id},
       {"style_id", r.style_id},
       {"portrait_path", r.portrait_path},
       {"real_path", r.real_path},
       {"attributes", std::vector<double>(r.attributes.values.begin(), r.attributes.values.end())},
       {"misalignment", r.misalignment},
       {"split", split_name(r.split)}};
}

inline void from_json(const nlohmann::json& j, TripletRecord& r) {
  r.face_id = j.at("face_id").get<std::string>();
  r.identity_id = j.at("identity_id").get<std::string>();
  r.style_id = j.at("style_id").get<std::string>();
  r.portrait_path = j.at("portrait_path").get<std::string>();
  r.real_path = j.at("real_path").get<std::string>();
  r.attributes = AttributeVector::from(j.at("attributes").get<std::vector<double>>());
  r.misalignment = j.at("misalignment").get<Misalignment>();
  r.split = parse_split(j.at("split").get<std::string>());
}

/// Throws DatasetError if any identity appears in both splits.
inline void check_split_disjoint(const DatasetManifest& m) {
  const auto train = m.identities(Split::Train);
  for (const auto& id : m.identities(Split::Test))
    if (train.count(id)) throw DatasetError("identity '" + id + "' appears in both train and test splits");
}

// ---- attributes.csv ------------------------------------------------------------

inline std::string format_attribute(double v) {
  if (v == 0.0) return "0";
  if (v == 1.0) return "1";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline void write_attributes_csv(const fs::path& path, const std::vector<AttributeVector>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DatasetError("cannot write " + path.string());
  for (std::size_t i = 0; i < kAttributeCount; ++i) out << (i ? "," : "") << kAttributeNames[i];
  out << '\n';
  for (const auto& a : rows) {
    for (std::size_t i = 0; i < kAttributeCount; ++i) out << (i ? "," : "") << format_attribute(a[i]);
    out << '\n';
  }
  if (!out) throw DatasetError("write failed for " + path.string());
}

/// Rows of an attribute CSV. Columns before the 20 attribute names (for
/// example "file,identity") are returned verbatim in `leading`.
struct AttributeTable {
  std::vector<std::string> leading_names;
  std::vector<std::vector<std::string>> leading;
  std::vector<AttributeVector> rows;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    if (!cell.empty() && cell.back() == '\r') cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline AttributeTable read_attributes_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DatasetError(path.string() + ": empty attribute file");
  const auto header = split_csv_line(line);
  if (header.size() < kAttributeCount) throw DatasetError(path.string() + ": header has fewer than 20 columns");
  const std::size_t lead = header.size() - kAttributeCount;
  for (std::size_t i = 0; i < kAttributeCount; ++i)
    if (header[lead + i] != kAttributeNames[i])
      throw DatasetError(path.string() + ": column " + std::to_string(lead + i + 1) + " is '" + header[lead + i] +
                         "', expected '" + std::string(kAttributeNames[i]) + "'");
  AttributeTable t;
  t.leading_names.assign(header.begin(), header.begin() + static_cast<long>(lead));
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                         " columns, got " + std::to_string(cells.size()));
    t.leading.emplace_back(cells.begin(), cells.begin() + static_cast<long>(lead));
    AttributeVector a;
    for (std::size_t i = 0; i < kAttributeCount; ++i) {
      try {
        std::size_t used = 0;
        a[i] = std::stod(cells[lead + i], &used);
        if (used != cells[lead + i].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": bad value '" + cells[lead + i] + "' for " +
                           std::string(kAttributeNames[i]));
      }
    }
    t.rows.push_back(a);
  }
  return t;
}

// ---- manifest I/O ---------------------------------------------------------------

inline void write_manifest(const DatasetManifest& m, const fs::path& dir) {
  const fs::path path = dir / "manifest.jsonl";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DatasetError("cannot write " + path.string());
  nlohmann::json header = {{"kind", "afrp-manifest"},
                           {"format_version", kManifestFormatVersion},
                           {"attribute_names", kAttributeNames},
                           {"image_size", m.image_size},
                           {"seed", m.seed},
                           {"styles", m.styles}};
  out << header.dump() << '\n';
  for (const auto& r : m.records) out << nlohmann::json(r).dump() << '\n';
  if (!out) throw DatasetError("write failed for " + path.string());
}

inline DatasetManifest load_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.jsonl";
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string line;
  DatasetManifest m;
  m.root = dir;
  int line_no = 0;
  try {
    if (!std::getline(in, line)) throw DatasetError(path.string() + ": empty manifest");
    ++line_no;
    const auto header = nlohmann::json::parse(line);
    if (header.value("kind", "") != "afrp-manifest") throw DatasetError(path.string() + ": not a dataset manifest");
    const int version = header.at("format_version").get<int>();
    if (version != kManifestFormatVersion)
      throw DatasetError(path.string() + ": manifest format version " + std::to_string(version) + ", expected " +
                         std::to_string(kManifestFormatVersion));
    const auto names = header.at("attribute_names").get<std::vector<std::string>>();
    if (names.size() != kAttributeCount || !std::equal(names.begin(), names.end(), kAttributeNames.begin()))
      throw DatasetError(path.string() + ": attribute names do not match the 20-attribute vocabulary");
    m.image_size = header.at("image_size").get<int>();
    m.seed = header.at("seed").get<std::uint64_t>();
    m.styles = header.at("styles").get<std::vector<std::string>>();
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      m.records.push_back(nlohmann::json::parse(line).get<TripletRecord>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
  } catch (const ContractError& e) {
    throw DatasetError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
  }
  check_split_disjoint(m);
  return m;
}

// ---- building ----------------------------------------------------------------------

/// Identity ids assigned to the test split: a seeded shuffle of the sorted
/// ids, taking round(fraction * count) of them (at least one when there
/// are two or more identities and fraction > 0).
inline std::set<std::string> choose_test_identities(const std::vector<RealFace>& faces, double fraction,
                                                    std::uint64_t seed) {
  detail::require(fraction >= 0 && fraction < 1, "test fraction must lie in [0,1)");
  std::vector<std::string> ids;
  for (const auto& f : faces) ids.push_back(f.identity_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(derive_seed(seed, hash_string("split")));
  rng.shuffle(ids.begin(), ids.end());
  std::size_t n = static_cast<std::size_t>(std::lround(fraction * ids.size()));
  if (fraction > 0 && ids.size() >= 2) n = std::clamp<std::size_t>(n, 1, ids.size() - 1);
  return {ids.begin(), ids.begin() + static_cast<long>(n)};
}

inline std::string face_id_for(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "f%05zu", index);
  return buf;
}

/// Writes images and manifest under `dir`. Each face yields one record per
/// stylizer whose portrait is stylize(misalign(face)); the real target
/// stays aligned.
inline DatasetManifest build_triplets(const std::vector<RealFace>& faces, const StylizerList& stylizers,
                                      const MisalignBounds& bounds, std::uint64_t seed, const fs::path& dir,
                                      double test_fraction = 0.2) {
  detail::require(!faces.empty(), "build_triplets: no faces");
  detail::require(!stylizers.empty(), "build_triplets: no stylizers");
  const int size = faces.front().image.height;
  for (const auto& f : faces)
    detail::require(f.image.height == size && f.image.width == size, "build_triplets: faces must share one square size");

  std::error_code ec;
  for (const char* sub : {"real", "portrait"}) {
    fs::create_directories(dir / sub, ec);
    if (ec) throw DatasetError("cannot create " + (dir / sub).string() + ": " + ec.message());
  }
  auto save = [&](const fs::path& rel, const FaceImage& img) {
    try {
      write_png(dir / rel, img);
    } catch (const Error& e) {
      throw DatasetError("cannot write " + (dir / rel).string() + ": " + e.what());
    }
  };

  DatasetManifest m;
  m.root = dir;
  m.image_size = size;
  m.seed = seed;
  for (const auto& s : stylizers) m.styles.push_back(s->style_id());
  const auto test_ids = choose_test_identities(faces, test_fraction, seed);
  const double max_shift = bounds.max_translation_frac * size;

  std::vector<AttributeVector> csv_rows;
  for (std::size_t i = 0; i < faces.size(); ++i) {
    const auto& face = faces[i];
    const std::string fid = face_id_for(i);
    const std::string real_rel = "real/" + fid + ".png";
    save(real_rel, face.image);
    csv_rows.push_back(face.attributes);
    for (const auto& s : stylizers) {
      const std::uint64_t rs = derive_seed(seed, i, hash_string(s->style_id()));
      auto [moved, transform] = misalign(face.image, bounds.max_rotation_deg, max_shift, rs);
      FaceImage portrait = s->apply(moved, rs);
      const std::string portrait_rel = "portrait/" + fid + "_" + s->style_id() + ".png";
      save(portrait_rel, portrait);
      m.records.push_back({fid, face.identity_id, s->style_id(), portrait_rel, real_rel, face.attributes, transform,
                           test_ids.count(face.identity_id) ? Split::Test : Split::Train});
    }
  }
  check_split_disjoint(m);
  write_attributes_csv(dir / "attributes.csv", csv_rows);
  write_manifest(m, dir);
  return m;
}

// ---- loading -----------------------------------------------------------------------

/// Decodes, centre-crops to a square and resizes to target_size.
inline FaceImage load_portrait(const fs::path& path, int target_size) {
  detail::require(target_size > 0, "load_portrait: target size must be positive");
  if (!fs::exists(path)) throw IoError("no such file: " + path.string());
  FaceImage img = read_png(path);
  img = center_crop_square(img);
  return resize(img, target_size, target_size);
}

struct Triplet {
  FaceImage portrait;
  FaceImage real;
  AttributeVector attributes;
  std::size_t record = 0;  // index into the manifest
};

/// Loads every record of `split`, in manifest order.
inline std::vector<Triplet> load_triplets(const DatasetManifest& m, Split split) {
  std::vector<Triplet> out;
  std::map<std::string, FaceImage> real_cache;
  for (std::size_t i : m.indices(split)) {
    const auto& r = m.records[i];
    auto load = [&](const std::string& rel) {
      const fs::path p = m.root / rel;
      try {
        FaceImage img = read_png(p);
        if (img.height != m.image_size || img.width != m.image_size)
          throw DatasetError(p.string() + ": expected " + std::to_string(m.image_size) + "x" +
                             std::to_string(m.image_size) + " image, got " + std::to_string(img.height) + "x" +
                             std::to_string(img.width));
        return img;
      } catch (const DatasetError&) {
        throw;
      } catch (const Error& e) {
        throw DatasetError(std::string("record ") + r.face_id + "/" + r.style_id + ": " + e.what());
      }
    };
    auto it = real_cache.find(r.real_path);
    if (it == real_cache.end()) it = real_cache.emplace(r.real_path, load(r.real_path)).first;
    out.push_back({load(r.portrait_path), it->second, r.attributes, i});
  }
  return out;
}

/// One aligned real face per face id, in manifest order.
inline std::vector<RealFace> load_real_faces(const DatasetManifest& m, std::optional<Split> split = std::nullopt) {
  std::vector<RealFace> out;
  std::set<std::string> seen;
  for (const auto& r : m.records) {
    if (split && r.split != *split) continue;
    if (!seen.insert(r.face_id).second) continue;
    const fs::path p = m.root / r.real_path;
    try {
      out.push_back({read_png(p), r.attributes, r.identity_id});
    } catch (const Error& e) {
      throw DatasetError(p.string() + ": " + e.what());
    }
  }
  return out;
}

/// Reads an external aligned face folder: `attributes.csv` whose leading
/// columns are "file,identity" followed by the 20 attribute names. Images
/// are centre-cropped and resized to `size`.
inline std::vector<RealFace> ingest_face_folder(const fs::path& dir, int size) {
  const auto table = read_attributes_csv(dir / "attributes.csv");
  if (table.leading_names != std::vector<std::string>{"file", "identity"})
    throw DatasetError((dir / "attributes.csv").string() + ": expected leading columns 'file,identity'");
  std::vector<RealFace> out;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const fs::path p = dir / table.leading[i][0];
    try {
      out.push_back({load_portrait(p, size), table.rows[i], table.leading[i][1]});
    } catch (const Error& e) {
      throw DatasetError(p.string() + ": " + e.what());
    }
  }
  detail::require<DatasetError>(!out.empty(), (dir / "attributes.csv").string() + ": no rows");
  return out;
}

// ---- mismatched attributes ---------------------------------------------------------

/// For each vector, flips a uniformly chosen nonempty subset of the 20
/// attributes. Flipping maps v >= 0.5 to 0 and v < 0.5 to 1, so every
/// output differs from its input even for non-binary values.
inline std::vector<AttributeVector> sample_mismatched_attributes(std::span<const AttributeVector> attrs,
                                                                 std::uint64_t seed) {
  detail::require(!attrs.empty(), "sample_mismatched_attributes: empty batch");
  Rng rng(derive_seed(seed, hash_string("mismatch")));
  std::vector<AttributeVector> out(attrs.begin(), attrs.end());
  for (auto& a : out) {
    std::uint64_t mask = 0;
    while (mask == 0) mask = rng.next_u64() & ((std::uint64_t{1} << kAttributeCount) - 1);
    for (std::size_t i = 0; i < kAttributeCount; ++i)
      if (mask >> i & 1) a[i] = a[i] >= 0.5 ? 0.0 : 1.0;
  }
  return out;
}

}  // namespace afrp
