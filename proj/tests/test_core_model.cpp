#include <gtest/gtest.h>

#include <filesystem>

#include "afrp/core_model.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

namespace afrp {
namespace {

using testing::random_attributes;
using testing::random_images;

TEST(FrnConfig, BottleneckSpatial) {
  FrnConfig c;
  EXPECT_EQ(c.depth(), 4);
  EXPECT_EQ(c.bottleneck_spatial(), 4);
}

TEST(FrnConfig, RejectsIndivisibleInput) {
  FrnConfig c;
  c.input_size = 60;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW((Frn<float>(c, 1)), ConfigError);
}

TEST(FrnConfig, RejectsBadStnStageAndResidualCount) {
  FrnConfig c;
  c.stn_stages = {5};
  EXPECT_THROW(c.validate(), ConfigError);
  c = FrnConfig{};
  c.residual_blocks_per_skip = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Frn, SameSeedSameParameters) {
  auto cfg = testing::small_frn_config();
  Frn<float> a(cfg, 42), b(cfg, 42), c(cfg, 43);
  ASSERT_EQ(a.params().size(), b.params().size());
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    EXPECT_EQ(a.params().items()[i].second.value(), b.params().items()[i].second.value());
    differs = differs || !(a.params().items()[i].second.value() == c.params().items()[i].second.value());
  }
  EXPECT_TRUE(differs);
}

TEST(Frn, PaperScaleConfigBuildsAndRuns) {
  FrnConfig c;
  c.input_size = 128;
  Frn<float> frn(c, 1);
  EXPECT_EQ(c.bottleneck_spatial(), 8);
  NoGradGuard g;
  auto y = frn.forward(Var<float>::leaf(random_images<float>(1, 128, 3)), Var<float>::leaf(random_attributes<float>(1, 4)));
  EXPECT_EQ(y.shape(), (Shape{1, 3, 128, 128}));
}

TEST(Frn, ForwardShapeAndRange) {
  Frn<float> frn(FrnConfig{}, 7);
  auto x = Var<float>::leaf(random_images<float>(2, 64, 1));
  auto a = Var<float>::leaf(random_attributes<float>(2, 2));
  auto y = frn.forward(x, a);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 64, 64}));
  for (std::size_t i = 0; i < y.numel(); ++i) {
    EXPECT_GE(y.value()[i], 0.0f);
    EXPECT_LE(y.value()[i], 1.0f);
  }
}

TEST(Frn, AttributeChangesOutput) {
  Frn<double> frn(testing::small_frn_config(), 9);
  auto x = Var<double>::leaf(random_images<double>(1, 64, 1));
  auto a = random_attributes<double>(1, 2);
  auto y1 = frn.forward(x, Var<double>::leaf(a)).value();
  a[6] = 1.0 - a[6];
  auto y2 = frn.forward(x, Var<double>::leaf(a)).value();
  EXPECT_GT(max_abs_diff(y1, y2), 0.0);
}

TEST(Frn, NeutralAttributesGiveFiniteOutput) {
  Frn<float> frn(testing::small_frn_config(), 9);
  Tensor<float> a({1, 20}, 0.5f);
  auto y = frn.forward(Var<float>::leaf(random_images<float>(1, 64, 1)), Var<float>::leaf(a));
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Frn, ShapeContract) {
  Frn<float> frn(testing::small_frn_config(), 9);
  auto x = Var<float>::leaf(random_images<float>(2, 64, 1));
  EXPECT_THROW(frn.forward(x, Var<float>::leaf(random_attributes<float>(3, 1))), ContractError);
  EXPECT_THROW(frn.forward(Var<float>::leaf(random_images<float>(2, 32, 1)), Var<float>::leaf(random_attributes<float>(2, 1))),
               ContractError);
}

TEST(Frn, GradientReachesAttributesAndParameters) {
  Frn<double> frn(testing::tiny_frn_config(), 3);
  auto x = Var<double>::leaf(random_images<double>(2, 16, 1));
  auto a = Var<double>::leaf(random_attributes<double>(2, 2), true);
  auto y = frn.forward(x, a);
  backward(ops::mse(y, Var<double>::leaf(random_images<double>(2, 16, 5))));
  EXPECT_GT(a.grad().max_abs(), 0.0);
  EXPECT_GT(frn.params().get("dec2.weight").grad().max_abs(), 0.0);
}

TEST(FrnProperty, OutputShapeEqualsInputShapeOverRandomConfigs) {
  Rng rng(2024);
  for (int trial = 0; trial < 12; ++trial) {
    FrnConfig c;
    const int depth = 1 + static_cast<int>(rng.below(3));
    c.input_size = (4 << depth) * (1 + static_cast<int>(rng.below(2)));
    c.encoder_channels.clear();
    for (int d = 0; d < depth; ++d) c.encoder_channels.push_back(2 + static_cast<int>(rng.below(5)));
    c.residual_blocks_per_skip = 1 + static_cast<int>(rng.below(2));
    c.stn_stages.clear();
    for (int s = 1; s <= depth; ++s)
      if (rng.below(2) && c.stage_spatial(s) >= 4 && c.stage_spatial(s) % 4 == 0) c.stn_stages.push_back(s);
    c.stn_hidden = 4;
    Frn<float> frn(c, trial);
    const int n = 1 + static_cast<int>(rng.below(3));
    NoGradGuard g;
    auto y = frn.forward(Var<float>::leaf(random_images<float>(n, c.input_size, trial)),
                         Var<float>::leaf(random_attributes<float>(n, trial)));
    EXPECT_EQ(y.shape(), (Shape{n, 3, c.input_size, c.input_size})) << "trial " << trial;
  }
}

TEST(Stn, IdentityTransformPreservesFeatures) {
  nn::ParamStore<float> store;
  Rng rng(1);
  Stn<float> a(store, "a", 5, 8, 8, 0.1, rng), b(store, "b", 5, 8, 8, 0.1, rng);
  a.set_identity();
  b.set_identity();
  Tensor<float> five({2, 5, 8, 8});
  Rng r2(5);
  for (std::size_t i = 0; i < five.numel(); ++i) five[i] = static_cast<float>(r2.normal());
  auto in = Var<float>::leaf(five);
  auto out = b(a(in));
  EXPECT_LT(max_abs_diff(out.value(), five), 1e-5f);
}

TEST(Stn, OneCellTranslationMatchesIndexShift) {
  nn::ParamStore<double> store;
  Rng rng(1);
  Stn<double> stn(store, "s", 2, 4, 4, 0.1, rng);
  stn.set_identity();
  Var<double> bias = stn.output_bias();
  bias.mutable_value()[2] = 2.0 / 3.0;  // one cell for W = 4
  Tensor<double> x({1, 2, 4, 4});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = static_cast<double>(i * 7 % 11);
  auto y = stn(Var<double>::leaf(x)).value();
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 3; ++j) EXPECT_NEAR(y.at4(0, c, i, j), x.at4(0, c, i, j + 1), 1e-12);
}

TEST(Stn, LocalizationGradientMatchesFiniteDifferences) {
  nn::ParamStore<double> store;
  Rng rng(4);
  Stn<double> stn(store, "s", 3, 8, 6, 0.2, rng);
  // Bilinear sampling is piecewise linear: keep sample points off the grid
  // and away from the clamped border, where finite differences straddle kinks.
  Var<double> bias = stn.output_bias();
  const double off_grid[6] = {0.83, 0.05, 0.031, -0.04, 0.86, 0.017};
  for (int i = 0; i < 6; ++i) bias.mutable_value()[i] = off_grid[i];
  auto x = Var<double>::leaf(testing::random_tensor({2, 3, 8, 8}, 8));
  auto target = Var<double>::leaf(testing::random_tensor({2, 3, 8, 8}, 9));
  auto loss = [&] { return ops::mse(stn(x), target); };
  for (const auto& [name, p] : store.items()) {
    auto r = testing::check_gradient(loss, p, 12, 3);
    EXPECT_LT(r.max_rel_error, 1e-4) << name;
  }
}

TEST(Dn, OutputsStrictlyInsideUnitInterval) {
  Dn<float> dn(DnConfig{}, 5);
  auto p = dn.forward(Var<float>::leaf(random_images<float>(4, 64, 1)), Var<float>::leaf(random_attributes<float>(4, 2)));
  ASSERT_EQ(p.shape(), (Shape{4, 1}));
  for (std::size_t i = 0; i < p.numel(); ++i) {
    EXPECT_GT(p.value()[i], 0.0f);
    EXPECT_LT(p.value()[i], 1.0f);
  }
  // Saturating inputs still stay inside (0,1).
  Tensor<float> big({2, 3, 64, 64}, 1e4f);
  auto q = dn.forward(Var<float>::leaf(big), Var<float>::leaf(random_attributes<float>(2, 2)));
  for (std::size_t i = 0; i < q.numel(); ++i) {
    EXPECT_GT(q.value()[i], 0.0f);
    EXPECT_LT(q.value()[i], 1.0f);
  }
}

TEST(Dn, MismatchedAttributesChangeScore) {
  Dn<double> dn(DnConfig{}, 5);
  auto img = Var<double>::leaf(random_images<double>(1, 64, 1));
  auto a = random_attributes<double>(1, 2);
  const double s1 = dn.forward(img, Var<double>::leaf(a)).item();
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = 1.0 - a[i];
  const double s2 = dn.forward(img, Var<double>::leaf(a)).item();
  EXPECT_NE(s1, s2);
}

TEST(Dn, AcceptsBatchOf64) {
  Dn<float> dn(DnConfig{}, 5);
  NoGradGuard g;
  auto p = dn.forward(Var<float>::leaf(random_images<float>(64, 64, 1)), Var<float>::leaf(random_attributes<float>(64, 2)));
  EXPECT_EQ(p.shape(), (Shape{64, 1}));
}

TEST(Dn, ConfigAndShapeContracts) {
  DnConfig c;
  c.attribute_injection_layer = 6;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DnConfig{};
  c.fc_sizes = {8, 2};
  EXPECT_THROW(c.validate(), ConfigError);
  Dn<float> dn(DnConfig{}, 1);
  EXPECT_THROW(dn.forward(Var<float>::leaf(random_images<float>(2, 64, 1)), Var<float>::leaf(random_attributes<float>(1, 2))),
               ContractError);
}

TEST(ModelBundle, CheckpointRoundTripPreservesForwardOutputs) {
  ModelBundle<float> b(testing::small_frn_config(), DnConfig{}, 77);
  b.schedule.step = 12;
  b.schedule.lambda = 0.0099;
  const auto path = std::filesystem::temp_directory_path() / "afrp_bundle_roundtrip.afrp";
  save_bundle(path, b);
  auto c = load_bundle<float>(path);
  EXPECT_EQ(c.schedule, b.schedule);
  EXPECT_EQ(c.hash(), b.hash());
  auto x = Var<float>::leaf(random_images<float>(2, 64, 1));
  auto a = Var<float>::leaf(random_attributes<float>(2, 2));
  EXPECT_EQ(b.frn.forward(x, a).value(), c.frn.forward(x, a).value());
  EXPECT_EQ(b.dn.forward(x, a).value(), c.dn.forward(x, a).value());
  std::filesystem::remove(path);
}

TEST(ModelBundle, CorruptCheckpointIsRejected) {
  ModelBundle<float> b(testing::small_frn_config(), DnConfig{}, 77);
  const auto path = std::filesystem::temp_directory_path() / "afrp_bundle_corrupt.afrp";
  save_bundle(path, b);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-16, std::ios::end);
    f.write("garbage!", 8);
  }
  EXPECT_THROW(load_bundle<float>(path), LoadError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace afrp
