#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "afrp/losses.hpp"
#include "support/fixtures.hpp"
#include "support/gradient_suite.hpp"
#include "support/loss_oracles.hpp"

namespace afrp {
namespace {

using testing::random_tensor;
using namespace testing::oracle;
using V = Var<double>;

// ---- pixel loss ------------------------------------------------------------

TEST(PixelLoss, IdenticalBatchesGiveZero) {
  auto a = V::leaf(random_tensor({2, 3, 4, 4}, 1, 0, 1));
  EXPECT_EQ(pixel_loss(a, a).item(), 0.0);
}

TEST(PixelLoss, UniformHalfVersusZero) {
  auto a = V::leaf(Tensor<double>({2, 3, 8, 8}, 0.5));
  auto b = V::leaf(Tensor<double>({2, 3, 8, 8}, 0.0));
  EXPECT_EQ(pixel_loss(a, b).item(), 0.25);
}

TEST(PixelLoss, MatchesElementwiseOracle) {
  auto a = random_tensor({3, 3, 7, 7}, 2, 0, 1), b = random_tensor({3, 3, 7, 7}, 3, 0, 1);
  EXPECT_NEAR(pixel_loss(V::leaf(a), V::leaf(b)).item(), pixel_oracle(a, b), 1e-10);
}

TEST(PixelLoss, ShapeMismatchIsContractError) {
  EXPECT_THROW(pixel_loss(V::leaf(Tensor<double>({1, 3, 4, 4})), V::leaf(Tensor<double>({1, 3, 4, 5}))), ContractError);
}

// ---- identity loss ---------------------------------------------------------

TEST(IdentityLoss, IdenticalInputsGiveZero) {
  auto psi = two_layer_extractor();
  auto a = V::leaf(random_tensor({2, 3, 16, 16}, 1, 0, 1));
  EXPECT_EQ(identity_loss(a, a, psi).item(), 0.0);
}

TEST(IdentityLoss, IdentityExtractorReducesToPixelLoss) {
  IdentityExtractor<double> psi;
  auto a = V::leaf(random_tensor({2, 3, 8, 8}, 1, 0, 1)), b = V::leaf(random_tensor({2, 3, 8, 8}, 2, 0, 1));
  EXPECT_EQ(identity_loss(a, b, psi).item(), pixel_loss(a, b).item());
}

TEST(IdentityLoss, MatchesStraightLineRecomputation) {
  auto psi = two_layer_extractor();
  auto a = random_tensor({2, 3, 16, 16}, 3, 0, 1), b = random_tensor({2, 3, 16, 16}, 4, 0, 1);
  auto w1 = psi.params().get("conv1.weight").value(), b1 = psi.params().get("conv1.bias").value();
  auto w2 = psi.params().get("conv2.weight").value(), b2 = psi.params().get("conv2.bias").value();
  auto fa = conv_lrelu_oracle(conv_lrelu_oracle(a, w1, b1), w2, b2);
  auto fb = conv_lrelu_oracle(conv_lrelu_oracle(b, w1, b1), w2, b2);
  EXPECT_NEAR(identity_loss(V::leaf(a), V::leaf(b), psi).item(), pixel_oracle(fa, fb), 1e-8);
}

TEST(IdentityLoss, GradientFlowsOnlyThroughRecovered) {
  auto psi = two_layer_extractor();
  auto a = V::leaf(random_tensor({1, 3, 16, 16}, 3, 0, 1), true);
  auto b = V::leaf(random_tensor({1, 3, 16, 16}, 4, 0, 1), true);
  backward(identity_loss(a, b, psi));
  EXPECT_GT(a.grad().max_abs(), 0.0);
  EXPECT_FALSE(b.has_grad());
  EXPECT_FALSE(psi.params().get("conv1.weight").has_grad());
}

TEST(IdentityLoss, IncompatibleExtractorIsContractError) {
  auto psi = two_layer_extractor();
  auto a = V::leaf(Tensor<double>({1, 3, 32, 32}));
  EXPECT_THROW(identity_loss(a, a, psi), ContractError);
}

// ---- discriminator loss ----------------------------------------------------

TEST(DiscriminatorLoss, UniformHalfGivesThreeLnTwo) {
  auto p = prob_batch({0.5, 0.5, 0.5});
  EXPECT_NEAR(discriminator_loss(p, p, p).item(), 3 * std::numbers::ln2, 1e-15);
}

TEST(DiscriminatorLoss, PerfectDiscriminatorLimit) {
  auto real = prob_batch({1 - 1e-12, 1 - 1e-12}), fake = prob_batch({1e-12, 1e-12});
  EXPECT_LT(discriminator_loss(real, fake, fake).item(), 1e-6);
}

TEST(DiscriminatorLoss, MatchesScalarLoopOracle) {
  Rng rng(8);
  std::vector<double> r(9), f(9), m(9);
  for (auto* v : {&r, &f, &m})
    for (double& x : *v) x = rng.uniform(0.01, 0.99);
  EXPECT_NEAR(discriminator_loss(prob_batch(r), prob_batch(f), prob_batch(m)).item(), discriminator_oracle(r, f, m), 1e-10);
}

TEST(DiscriminatorLoss, RejectsProbabilitiesOutsideOpenInterval) {
  auto ok = prob_batch({0.3}), bad = prob_batch({1.0});
  EXPECT_THROW(discriminator_loss(bad, ok, ok), ContractError);
  EXPECT_THROW(discriminator_loss(ok, prob_batch({0.0}), ok), ContractError);
}

TEST(DiscriminatorLoss, InvariantToBatchPermutation) {
  std::vector<double> r{0.2, 0.7, 0.9, 0.4}, f{0.1, 0.3, 0.6, 0.5}, m{0.8, 0.25, 0.35, 0.45};
  const double base = discriminator_loss(prob_batch(r), prob_batch(f), prob_batch(m)).item();
  std::vector<std::size_t> perm{2, 0, 3, 1};
  auto permute = [&](const std::vector<double>& v) {
    std::vector<double> o;
    for (auto i : perm) o.push_back(v[i]);
    return o;
  };
  EXPECT_NEAR(discriminator_loss(prob_batch(permute(r)), prob_batch(permute(f)), prob_batch(permute(m))).item(), base, 1e-14);
}

// ---- generator loss --------------------------------------------------------

struct ConstantDiscriminator {
  double p;
  V operator()(const V& x, const V&) const { return V::leaf(Tensor<double>({x.dim(0), 1}, p)); }
};

TEST(GeneratorLoss, ZeroWeightsEqualPixelLoss) {
  auto a = V::leaf(random_tensor({2, 3, 16, 16}, 1, 0, 1)), b = V::leaf(random_tensor({2, 3, 16, 16}, 2, 0, 1));
  auto attrs = V::leaf(testing::random_attributes<double>(2, 3));
  Dn<double> dn(testing::tiny_dn_config(), 1);
  auto psi = two_layer_extractor();
  auto g = generator_loss(a, b, attrs, dn, &psi, LossWeights{0, 0, 0.995});
  EXPECT_EQ(g.total.item(), pixel_loss(a, b).item());
}

TEST(GeneratorLoss, ClosedFormAdversarialTerm) {
  auto a = V::leaf(random_tensor({2, 3, 16, 16}, 1, 0, 1));
  auto attrs = V::leaf(testing::random_attributes<double>(2, 3));
  const double lambda = 0.37;
  auto g = generator_loss(a, a, attrs, ConstantDiscriminator{0.5}, static_cast<const FeatureExtractor<double>*>(nullptr), LossWeights{lambda, 0, 0.995});
  EXPECT_NEAR(g.total.item(), lambda * std::numbers::ln2, 1e-15);
}

TEST(GeneratorLoss, DefaultWeightsRecomposeFromParts) {
  auto a = V::leaf(random_tensor({2, 3, 16, 16}, 1, 0, 1)), b = V::leaf(random_tensor({2, 3, 16, 16}, 2, 0, 1));
  auto attrs = V::leaf(testing::random_attributes<double>(2, 3));
  Dn<double> dn(testing::tiny_dn_config(), 1);
  auto psi = two_layer_extractor();
  LossWeights w;
  EXPECT_EQ(w.lambda, 1e-2);
  EXPECT_EQ(w.eta, 1e-3);
  EXPECT_EQ(w.lambda_decay, 0.995);
  auto g = generator_loss(a, b, attrs, dn, &psi, w);
  const double pix = pixel_loss(a, b).item();
  const double id = identity_loss(a, b, psi).item();
  const auto d = dn.forward(a, attrs).value();
  double adv = 0;
  for (std::size_t i = 0; i < d.numel(); ++i) adv -= std::log(d[i]);
  adv /= d.numel();
  EXPECT_NEAR(g.total.item(), pix + w.lambda * adv + w.eta * id, 1e-10);
}

TEST(GeneratorLoss, MonotoneInLambdaAndEta) {
  auto a = V::leaf(random_tensor({2, 3, 16, 16}, 1, 0, 1)), b = V::leaf(random_tensor({2, 3, 16, 16}, 2, 0, 1));
  auto attrs = V::leaf(testing::random_attributes<double>(2, 3));
  Dn<double> dn(testing::tiny_dn_config(), 1);
  auto psi = two_layer_extractor();
  double prev = -1;
  for (double lambda : {0.0, 0.01, 0.1, 1.0}) {
    const double v = generator_loss(a, b, attrs, dn, &psi, LossWeights{lambda, 1e-3, 0.995}).total.item();
    EXPECT_GE(v, prev);
    prev = v;
  }
  prev = -1;
  for (double eta : {0.0, 1e-3, 1e-1, 1.0}) {
    const double v = generator_loss(a, b, attrs, dn, &psi, LossWeights{1e-2, eta, 0.995}).total.item();
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Losses, AllNonnegativeOnRandomInputs) {
  Rng rng(3);
  auto psi = two_layer_extractor();
  Dn<double> dn(testing::tiny_dn_config(), 1);
  for (int t = 0; t < 10; ++t) {
    auto a = V::leaf(random_tensor({2, 3, 16, 16}, 10 + t, 0, 1)), b = V::leaf(random_tensor({2, 3, 16, 16}, 50 + t, 0, 1));
    auto attrs = V::leaf(testing::random_attributes<double>(2, t));
    EXPECT_GE(pixel_loss(a, b).item(), 0.0);
    EXPECT_GE(identity_loss(a, b, psi).item(), 0.0);
    auto p = dn.forward(a, attrs);
    EXPECT_GE(discriminator_loss(p, p, p).item(), 0.0);
    EXPECT_GE(generator_loss(a, b, attrs, dn, &psi, LossWeights{}).total.item(), 0.0);
  }
}

TEST(LossWeights, RejectsInvalidValues) {
  EXPECT_THROW((LossWeights{-1, 0, 0.9}.validate()), ContractError);
  EXPECT_THROW((LossWeights{0, 0, 1.5}.validate()), ContractError);
}

TEST(LossGradients, AnalyticMatchesFiniteDifferencesThroughTinyFrn) {
  auto results = testing::run_loss_gradient_suite();
  ASSERT_EQ(results.size(), 4u);
  for (const auto& [name, r] : results) {
    EXPECT_LT(r.max_rel_error, 1e-4) << name << " worst at " << r.worst_param;
    EXPECT_GT(r.checked, 20) << name;
    std::printf("%-14s max rel err %.3e over %d entries (worst %s)\n", name.c_str(), r.max_rel_error, r.checked,
                r.worst_param.c_str());
  }
}

}  // namespace
}  // namespace afrp
