#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "afrp/dataset.hpp"
#include "afrp/style_metric.hpp"
#include "support/fixtures.hpp"
#include "support/spd_oracle.hpp"

namespace afrp {
namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("afrp_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<FaceImage> random_faces(int n, int size, std::uint64_t seed) {
  return tensor_to_images(testing::random_images<float>(n, size, seed));
}

// ---- procedural faces --------------------------------------------------------

TEST(ProceduralFaces, DeterministicUnderSeed) {
  auto a = generate_faces(3, 2, 32, 5), b = generate_faces(3, 2, 32, 5);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].attributes, b[i].attributes);
    EXPECT_EQ(a[i].identity_id, b[i].identity_id);
  }
  EXPECT_NE(generate_faces(3, 2, 32, 6)[0].image, a[0].image);
}

TEST(ProceduralFaces, LabelsAreBinaryAndEveryAttributeTakesBothValues) {
  auto faces = generate_faces(40, 3, 16, 11);
  std::array<int, kAttributeCount> positives{};
  for (const auto& f : faces) {
    EXPECT_TRUE(f.attributes.is_binary());
    EXPECT_TRUE(f.image.in_unit_range());
    for (std::size_t i = 0; i < kAttributeCount; ++i) positives[i] += f.attributes[i] > 0.5;
  }
  for (std::size_t i = 0; i < kAttributeCount; ++i) {
    EXPECT_GT(positives[i], 0) << kAttributeNames[i];
    EXPECT_LT(positives[i], static_cast<int>(faces.size())) << kAttributeNames[i];
  }
}

TEST(ProceduralFaces, IdentityBoundAttributesAreStableWithinIdentity) {
  auto faces = generate_faces(10, 4, 16, 3);
  for (const char* name : {"Male", "Young", "Bald", "Big_Nose", "Pale_Skin", "Black_Hair", "No_Beard", "Narrow_Eyes"})
    for (std::size_t i = 0; i < faces.size(); ++i)
      EXPECT_EQ(faces[i].attributes[name], faces[i - i % 4].attributes[name]) << name;
}

TEST(ProceduralFaces, EyeglassesAreRenderedLiterally) {
  Rng rng(1);
  FaceSpec spec{sample_identity(rng), {}};
  spec.appearance = sample_appearance(spec.identity, rng);
  spec.appearance.eyeglasses = false;
  const auto without = render_face(spec, 64);
  spec.appearance.eyeglasses = true;
  const auto with = render_face(spec, 64);
  double diff = 0;
  for (std::size_t i = 0; i < with.pixels.size(); ++i) diff += std::abs(with.pixels[i] - without.pixels[i]);
  EXPECT_GT(diff, 20.0);
  EXPECT_EQ(face_attributes(spec)["Eyeglasses"], 1.0);
}

// ---- stylizers -----------------------------------------------------------------

StylizerList all_stylizers() {
  auto s = procedural_stylizers();
  s.push_back(std::make_shared<IdentityStylizer>());
  return s;
}

TEST(Stylizers, AtLeastFourDistinctBuiltIns) {
  auto s = procedural_stylizers();
  ASSERT_GE(s.size(), 4u);
  std::set<std::string> ids;
  for (auto& x : s) ids.insert(x->style_id());
  EXPECT_EQ(ids.size(), s.size());
  EXPECT_EQ(stylizer_by_id("identity")->style_id(), "identity");
  EXPECT_THROW(stylizer_by_id("mosaic"), ContractError);
}

TEST(Stylizers, PreserveShapeAndUnitRangeOnRandomImages) {
  for (const auto& s : all_stylizers())
    for (int t = 0; t < 5; ++t) {
      auto img = random_faces(1, 8 + 7 * t, 100 + t)[0];
      auto out = s->apply(img, t);
      EXPECT_TRUE(out.same_shape(img)) << s->style_id();
      EXPECT_TRUE(out.in_unit_range()) << s->style_id();
    }
}

TEST(Stylizers, DeterministicUnderSeed) {
  auto img = random_faces(1, 32, 1)[0];
  for (const auto& s : all_stylizers()) EXPECT_EQ(s->apply(img, 9), s->apply(img, 9)) << s->style_id();
  TextureOverlayStylizer tex;
  EXPECT_NE(tex.apply(img, 1), tex.apply(img, 2));
}

TEST(Stylizers, EdgeSketchOfConstantImageIsUniform) {
  FaceImage flat(20, 20, 0.37f);
  auto out = EdgeSketchStylizer().apply(flat, 0);
  for (float v : out.pixels) EXPECT_FLOAT_EQ(v, 1.0f);
}

TEST(Stylizers, TwoLevelPosterizeIsBinary) {
  auto out = PosterizeStylizer(2).apply(random_faces(1, 16, 4)[0], 0);
  for (float v : out.pixels) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

// Distinctiveness recomputed with triple-loop Grams and the Jacobi logm.
double oracle_distinctiveness(const std::vector<FaceImage>& style, const std::vector<FaceImage>& real,
                              const ConvExtractor<float>& ex) {
  auto mean_grams = [&](const std::vector<FaceImage>& imgs) {
    std::vector<testing::Mat> acc;
    for (const auto& img : imgs) {
      NoGradGuard g;
      auto layers = ex.style_layers(Var<float>::leaf(images_to_tensor<float>(std::span(&img, 1))));
      acc.resize(layers.size());
      for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& v = layers[l].value();
        Tensor<double> f({v.dim(1), v.dim(2), v.dim(3)});
        for (std::size_t i = 0; i < f.numel(); ++i) f[i] = v[i];
        auto gm = testing::gram_oracle(f);
        if (acc[l].empty()) acc[l].assign(gm.size(), std::vector<double>(gm.size(), 0.0));
        for (std::size_t i = 0; i < gm.size(); ++i)
          for (std::size_t j = 0; j < gm.size(); ++j) acc[l][i][j] += gm[i][j] / imgs.size();
      }
    }
    return acc;
  };
  const auto s = mean_grams(style), r = mean_grams(real);
  double d = 0;
  for (std::size_t l = 0; l < s.size(); ++l) d += testing::log_euclidean_oracle(s[l], r[l], kDefaultSpdEps);
  return d;
}

TEST(Stylizers, BuiltInsAreMoreDistinctiveThanIdentityAndRankMatchesOracle) {
  ConvExtractorConfig cfg;
  cfg.input_size = 32;
  cfg.channels = {8, 12, 16};
  cfg.embedding_dim = 0;
  ConvExtractor<float> ex(cfg, 2, "random-style");
  std::vector<FaceImage> real;
  for (auto& f : generate_faces(6, 1, 32, 21)) real.push_back(f.image);
  const auto real_profile = compute_style_profile("real", real, ex);

  std::vector<StyleProfile> profiles;
  std::vector<std::pair<double, std::string>> oracle;
  double identity_score = -1;
  for (const auto& s : all_stylizers()) {
    std::vector<FaceImage> styled;
    for (std::size_t i = 0; i < real.size(); ++i) styled.push_back(s->apply(real[i], i));
    StyleProfile p = compute_style_profile(s->style_id(), styled, ex);
    p.distinctiveness = style_distinctiveness(styled, real_profile, ex);
    EXPECT_NEAR(p.distinctiveness, oracle_distinctiveness(styled, real, ex), 1e-4 * (1 + p.distinctiveness))
        << s->style_id();
    oracle.emplace_back(-oracle_distinctiveness(styled, real, ex), s->style_id());
    if (s->style_id() == "identity") identity_score = p.distinctiveness;
    profiles.push_back(p);
  }
  EXPECT_NEAR(identity_score, 0.0, 1e-9);
  for (const auto& p : profiles) {
    if (p.style_id == "identity") continue;
    EXPECT_GT(p.distinctiveness, identity_score + 0.1) << p.style_id;
  }
  std::sort(oracle.begin(), oracle.end());
  const auto ranked = select_training_styles(profiles, static_cast<int>(profiles.size()));
  for (std::size_t i = 0; i < ranked.size(); ++i) EXPECT_EQ(ranked[i], oracle[i].second);
  for (int k = 1; k < static_cast<int>(profiles.size()); ++k) {
    auto chosen = select_training_styles(profiles, k);
    EXPECT_EQ(std::count(chosen.begin(), chosen.end(), "identity"), 0) << "k=" << k;
  }
}

// ---- misalignment --------------------------------------------------------------

TEST(Misalign, ZeroBoundsIsIdentity) {
  auto img = random_faces(1, 24, 2)[0];
  auto [out, m] = misalign(img, 0, 0, 7);
  EXPECT_EQ(m, Misalignment{});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(out.pixels[i], img.pixels[i], 1e-6);
}

TEST(Misalign, IntegerTranslationShiftsIndices) {
  auto img = random_faces(1, 16, 3)[0];
  auto out = apply_misalignment(img, {0.0, 2.0, 0.0});
  for (int y = 0; y < 16; ++y)
    for (int x = 2; x < 16; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.at(y, x, c), img.at(y, x - 2, c), 1e-6);
}

TEST(Misalign, DeterministicAndWithinBounds) {
  auto img = random_faces(1, 16, 4)[0];
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto [a, ma] = misalign(img, 15, 3.2, s);
    auto [b, mb] = misalign(img, 15, 3.2, s);
    EXPECT_EQ(ma, mb);
    EXPECT_EQ(a, b);
    EXPECT_LE(std::abs(ma.rotation_deg), 15.0);
    EXPECT_LE(std::abs(ma.dx_px), 3.2);
    EXPECT_LE(std::abs(ma.dy_px), 3.2);
  }
  EXPECT_THROW(misalign(img, -1, 0, 0), ContractError);
}

TEST(Misalign, QuarterTurnRotatesAboutCentre) {
  auto img = random_faces(1, 9, 5)[0];
  auto out = apply_misalignment(img, {90.0, 0.0, 0.0});
  // Clockwise quarter turn: output (y, x) samples input (8 - x, y).
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x) EXPECT_NEAR(out.at(y, x, 0), img.at(8 - x, y, 0), 1e-5);
}

// ---- mismatched attributes -----------------------------------------------------

TEST(MismatchedAttributes, AllZeroVectorGainsAPositive) {
  AttributeVector zero;
  auto out = sample_mismatched_attributes(std::span(&zero, 1), 3);
  EXPECT_GE(std::count(out[0].values.begin(), out[0].values.end(), 1.0), 1);
}

TEST(MismatchedAttributes, EveryVectorDiffersIncludingNeutral) {
  std::vector<AttributeVector> batch;
  auto faces = generate_faces(8, 2, 8, 1);
  for (auto& f : faces) batch.push_back(f.attributes);
  batch.push_back(AttributeVector::neutral());
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto out = sample_mismatched_attributes(batch, s);
    ASSERT_EQ(out.size(), batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) EXPECT_NE(out[i], batch[i]);
  }
}

TEST(MismatchedAttributes, DeterministicAndSeedDependent) {
  std::vector<AttributeVector> batch(4);
  EXPECT_EQ(sample_mismatched_attributes(batch, 8), sample_mismatched_attributes(batch, 8));
  EXPECT_NE(sample_mismatched_attributes(batch, 8), sample_mismatched_attributes(batch, 9));
  EXPECT_THROW(sample_mismatched_attributes(std::span<const AttributeVector>{}, 0), ContractError);
}

// ---- dataset build / load ------------------------------------------------------

TEST(BuildTriplets, CartesianCountFilesAndRoundTrip) {
  TempDir dir("build");
  auto faces = generate_faces(5, 2, 32, 9);
  StylizerList st{stylizer_by_id("edge"), stylizer_by_id("posterize"), stylizer_by_id("swirl")};
  auto m = build_triplets(faces, st, {}, 4, dir.path);
  ASSERT_EQ(m.records.size(), 30u);
  for (const auto& r : m.records) {
    auto p = read_png(dir.path / r.portrait_path), q = read_png(dir.path / r.real_path);
    EXPECT_EQ(p.height, 32);
    EXPECT_EQ(q.width, 32);
    EXPECT_LE(std::abs(r.misalignment.rotation_deg), 15.0);
    EXPECT_LE(std::abs(r.misalignment.dx_px), 3.2);
  }
  auto loaded = load_manifest(dir.path);
  EXPECT_EQ(loaded.records, m.records);
  EXPECT_EQ(loaded.image_size, 32);
  EXPECT_EQ(loaded.seed, 4u);
  EXPECT_EQ(loaded.styles, (std::vector<std::string>{"edge", "posterize", "swirl"}));

  auto table = read_attributes_csv(dir.path / "attributes.csv");
  ASSERT_EQ(table.rows.size(), faces.size());
  for (std::size_t i = 0; i < faces.size(); ++i) EXPECT_EQ(table.rows[i], faces[i].attributes);
}

TEST(BuildTriplets, SplitIsIdentityDisjointAndNonEmpty) {
  TempDir dir("split");
  auto m = build_triplets(generate_faces(10, 2, 16, 1), {stylizer_by_id("edge")}, {}, 2, dir.path, 0.2);
  const auto train = m.identities(Split::Train), test = m.identities(Split::Test);
  EXPECT_EQ(test.size(), 2u);
  EXPECT_EQ(train.size(), 8u);
  for (const auto& id : test) EXPECT_EQ(train.count(id), 0u);
}

TEST(BuildTriplets, DeterministicAcrossRuns) {
  TempDir a("det_a"), b("det_b");
  auto faces = generate_faces(3, 1, 16, 1);
  auto ma = build_triplets(faces, procedural_stylizers(), {}, 6, a.path);
  auto mb = build_triplets(faces, procedural_stylizers(), {}, 6, b.path);
  EXPECT_EQ(ma.records, mb.records);
  for (const auto& r : ma.records)
    EXPECT_EQ(read_file_bytes(a.path / r.portrait_path), read_file_bytes(b.path / r.portrait_path));
}

TEST(BuildTriplets, UnwritableDirectoryIsDatasetErrorNamingPath) {
  TempDir dir("unwritable");
  const fs::path blocker = dir.path / "blocker";
  std::ofstream(blocker) << "x";
  try {
    build_triplets(generate_faces(1, 1, 16, 1), {stylizer_by_id("edge")}, {}, 1, blocker / "ds");
    FAIL() << "expected DatasetError";
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("blocker"), std::string::npos);
  }
}

TEST(LoadManifest, RejectsCorruptionAndOverlappingSplits) {
  TempDir dir("corrupt");
  auto m = build_triplets(generate_faces(4, 1, 16, 1), {stylizer_by_id("edge")}, {}, 1, dir.path, 0.25);
  auto overlap = m;
  overlap.records[0].split = Split::Test;
  overlap.records[1].split = Split::Train;
  overlap.records[1].identity_id = overlap.records[0].identity_id;
  write_manifest(overlap, dir.path);
  EXPECT_THROW(load_manifest(dir.path), DatasetError);
  std::ofstream(dir.path / "manifest.jsonl") << "{\"kind\":\"afrp-manifest\",\"format_version\":99}\n";
  EXPECT_THROW(load_manifest(dir.path), DatasetError);
  EXPECT_THROW(load_manifest(dir.path / "missing"), DatasetError);
}

TEST(LoadTriplets, LoadsSplitInManifestOrder) {
  TempDir dir("loadsplit");
  auto m = build_triplets(generate_faces(5, 1, 16, 1), {stylizer_by_id("edge"), stylizer_by_id("texture")}, {}, 1,
                          dir.path, 0.2);
  auto test = load_triplets(m, Split::Test);
  ASSERT_EQ(test.size(), m.indices(Split::Test).size());
  for (const auto& t : test) {
    EXPECT_EQ(t.attributes, m.records[t.record].attributes);
    EXPECT_EQ(t.real, read_png(dir.path / m.records[t.record].real_path));
  }
}

TEST(AttributesCsv, RejectsWrongHeaderAndBadValues) {
  TempDir dir("csv");
  std::ofstream(dir.path / "a.csv") << "Bald,Bangs\n0,1\n";
  EXPECT_THROW(read_attributes_csv(dir.path / "a.csv"), DatasetError);
  write_attributes_csv(dir.path / "b.csv", {AttributeVector{}});
  std::ofstream(dir.path / "b.csv", std::ios::app) << "0,0,0,0,0,0,0,0,0,x,0,0,0,0,0,0,0,0,0,0\n";
  EXPECT_THROW(read_attributes_csv(dir.path / "b.csv"), DatasetError);
}

TEST(IngestFaceFolder, ReadsFileIdentityColumns) {
  TempDir dir("ingest");
  auto faces = generate_faces(2, 1, 40, 3);
  std::ofstream csv(dir.path / "attributes.csv");
  csv << "file,identity";
  for (auto n : kAttributeNames) csv << "," << n;
  csv << "\n";
  for (int i = 0; i < 2; ++i) {
    write_png(dir.path / ("img" + std::to_string(i) + ".png"), faces[i].image);
    csv << "img" << i << ".png,person" << i;
    for (double v : faces[i].attributes.values) csv << "," << v;
    csv << "\n";
  }
  csv.close();
  auto got = ingest_face_folder(dir.path, 32);
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[1].identity_id, "person1");
  EXPECT_EQ(got[1].attributes, faces[1].attributes);
  EXPECT_EQ(got[0].image.height, 32);
}

// ---- load_portrait -------------------------------------------------------------

TEST(LoadPortrait, ResizesSquareInputToTarget) {
  TempDir dir("portrait");
  write_png(dir.path / "big.png", random_faces(1, 256, 1)[0]);
  auto img = load_portrait(dir.path / "big.png", 64);
  EXPECT_EQ(img.height, 64);
  EXPECT_EQ(img.width, 64);
  EXPECT_TRUE(img.in_unit_range());
}

TEST(LoadPortrait, CropsCentralSquareOfNonSquareInput) {
  TempDir dir("crop");
  FaceImage wide(200, 300);
  Rng rng(3);
  for (float& v : wide.pixels) v = static_cast<float>(rng.uniform());
  write_png(dir.path / "wide.png", wide);
  auto got = load_portrait(dir.path / "wide.png", 50);
  // Oracle: explicit crop of columns [50, 250) from the decoded file.
  auto decoded = read_png(dir.path / "wide.png");
  FaceImage crop(200, 200);
  for (int y = 0; y < 200; ++y)
    for (int x = 0; x < 200; ++x)
      for (int c = 0; c < 3; ++c) crop.at(y, x, c) = decoded.at(y, x + 50, c);
  EXPECT_EQ(got, resize(crop, 50, 50));
}

TEST(LoadPortrait, TargetSizedImageRoundTripsWithinQuantization) {
  TempDir dir("same");
  auto img = random_faces(1, 64, 2)[0];
  write_png(dir.path / "same.png", img);
  auto got = load_portrait(dir.path / "same.png", 64);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_LE(std::abs(got.pixels[i] - img.pixels[i]), 0.5f / 255 + 1e-6);
}

TEST(LoadPortrait, ErrorsForMissingAndNonImageFiles) {
  TempDir dir("bad");
  EXPECT_THROW(load_portrait(dir.path / "nope.png", 64), IoError);
  std::ofstream(dir.path / "text.png") << "hello";
  EXPECT_THROW(load_portrait(dir.path / "text.png", 64), FormatError);
}

}  // namespace
}  // namespace afrp
