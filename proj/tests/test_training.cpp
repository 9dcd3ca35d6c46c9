#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "afrp/training.hpp"
#include "support/fixtures.hpp"

namespace afrp {
namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("afrp_train_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Toy triplets at 16x16: edge-sketch portraits of procedural faces.
std::vector<Triplet> toy_set(int n, std::uint64_t seed = 1) {
  auto faces = generate_faces(n, 1, 16, seed);
  std::vector<Triplet> out;
  for (int i = 0; i < n; ++i)
    out.push_back({PosterizeStylizer(3).apply(faces[i].image, 0), faces[i].image, faces[i].attributes,
                   static_cast<std::size_t>(i)});
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

TrainConfig toy_config() {
  TrainConfig c;
  c.batch_size = 4;
  c.seed = 5;
  c.loss_weights.eta = 0;
  return c;
}

std::vector<Tensor<float>> snapshot(const nn::ParamStore<float>& ps) {
  std::vector<Tensor<float>> out;
  for (const auto& [_, p] : ps.items()) out.push_back(p.value());
  return out;
}

TEST(TrainConfig, DefaultsMatchReference) {
  TrainConfig c;
  EXPECT_EQ(c.batch_size, 64);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.weight_decay, 1e-2);
  EXPECT_EQ(c.optimizer, "rmsprop");
  EXPECT_EQ(c.loss_weights.lambda, 1e-2);
  EXPECT_EQ(c.loss_weights.eta, 1e-3);
  EXPECT_EQ(c.loss_weights.lambda_decay, 0.995);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c = toy_config();
  c.checkpoint_every = 7;
  EXPECT_EQ(nlohmann::json(c).get<TrainConfig>(), c);
  c.optimizer = "adam";
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy_config();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Schedule, LambdaAfterTenEpochs) {
  EXPECT_NEAR(scheduled_lambda(LossWeights{}, 10), 9.511e-3, 1e-6);
  auto data = toy_set(4);
  TrainConfig c = toy_config();
  c.epochs = 10;
  auto res = fit<float>(data, c, testing::tiny_frn_config(), testing::tiny_dn_config(), nullptr);
  EXPECT_EQ(res.bundle.schedule.epoch, 10);
  EXPECT_EQ(res.bundle.schedule.step, 10);
  EXPECT_NEAR(res.bundle.schedule.lambda, 1e-2 * std::pow(0.995, 10), 1e-15);
  EXPECT_EQ(res.metrics.front().lambda, 1e-2);
  EXPECT_NEAR(res.metrics.back().lambda, 1e-2 * std::pow(0.995, 9), 1e-15);
}

TEST(TrainStep, PixelLossDecreasesOnToySetWithoutAdversarialTerms) {
  auto data = toy_set(32);
  ModelBundle<float> b(testing::tiny_frn_config(), testing::tiny_dn_config(), 3);
  TrainConfig c = toy_config();
  c.batch_size = 8;
  c.loss_weights = {0, 0, 0.995};
  Trainer<float> tr(b, c, nullptr);
  auto full = make_batch<float>(data, iota(32));
  auto pixel_on_all = [&] {
    NoGradGuard g;
    return pixel_loss(b.frn.forward(Var<float>::leaf(full.portraits), Var<float>::leaf(full.attrs)),
                      Var<float>::leaf(full.reals))
        .item();
  };
  const double before = pixel_on_all();
  for (int step = 0; step < 200; ++step) {
    std::vector<std::size_t> idx;
    for (int k = 0; k < 8; ++k) idx.push_back((step * 8 + k) % 32);
    tr.train_step(make_batch<float>(data, idx), 4);
  }
  const double after = pixel_on_all();
  std::printf("pixel loss %.5f -> %.5f\n", before, after);
  EXPECT_LT(after, before * 0.7);
}

TEST(TrainStep, UpdatesBothNetworksAndReachesEveryGeneratorParameter) {
  auto data = toy_set(4);
  ModelBundle<float> b(testing::tiny_frn_config(), testing::tiny_dn_config(), 3);
  TrainConfig c = toy_config();
  c.weight_decay = 0;
  Trainer<float> tr(b, c, nullptr);
  const auto g0 = snapshot(b.frn.params()), d0 = snapshot(b.dn.params());
  auto m = tr.train_step(make_batch<float>(data, iota(4)));
  EXPECT_GT(m.stn_grad_norm, 0.0);
  EXPECT_GT(m.dn_grad_norm, 0.0);
  const auto g1 = snapshot(b.frn.params()), d1 = snapshot(b.dn.params());
  for (std::size_t i = 0; i < g0.size(); ++i)
    EXPECT_GT(max_abs_diff(g0[i], g1[i]), 0.0) << "generator parameter " << b.frn.params().items()[i].first;
  for (std::size_t i = 0; i < d0.size(); ++i)
    EXPECT_GT(max_abs_diff(d0[i], d1[i]), 0.0) << "discriminator parameter " << b.dn.params().items()[i].first;
  EXPECT_TRUE(b.dn.params().trainable());
  EXPECT_EQ(b.schedule.step, 1);
}

TEST(TrainStep, StnParametersReceiveGradientThroughoutTraining) {
  auto data = toy_set(8);
  TrainConfig c = toy_config();
  c.epochs = 3;
  std::vector<double> norms;
  FitOptions o;
  o.on_step = [&](const StepMetrics& m) { norms.push_back(m.stn_grad_norm); };
  fit<float>(data, c, testing::tiny_frn_config(), testing::tiny_dn_config(), nullptr, o);
  ASSERT_EQ(norms.size(), 6u);
  for (double n : norms) EXPECT_GT(n, 0.0);
}

TEST(TrainStep, DiscriminatorStepLowersItsLossAtSmallLearningRate) {
  auto data = toy_set(8);
  double total_drop = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ModelBundle<float> b(testing::tiny_frn_config(), testing::tiny_dn_config(), seed);
    TrainConfig c = toy_config();
    c.learning_rate = 1e-4;
    Trainer<float> tr(b, c, nullptr);
    auto batch = make_batch<float>(data, iota(8));
    StepMetrics before, after;
    tr.discriminator_step(batch, 17, before);
    // Same step seed, so the same mismatched attributes.
    Trainer<float> probe(b, [&] { auto z = c; z.learning_rate = 1e-30; return z; }(), nullptr);
    probe.discriminator_step(batch, 17, after);
    total_drop += before.l_dis - after.l_dis;
  }
  EXPECT_GT(total_drop / 5, 0.0);
}

TEST(TrainStep, NonFiniteParametersAbortWithDiagnostics) {
  auto data = toy_set(4);
  ModelBundle<float> b(testing::tiny_frn_config(), testing::tiny_dn_config(), 3);
  Trainer<float> tr(b, toy_config(), nullptr);
  b.frn.params().items()[0].second.node()->value[0] = std::nanf("");
  EXPECT_THROW(tr.train_step(make_batch<float>(data, iota(4))), NumericError);
}

TEST(TrainStep, EtaWithoutExtractorIsRejected) {
  ModelBundle<float> b(testing::tiny_frn_config(), testing::tiny_dn_config(), 3);
  TrainConfig c;
  EXPECT_THROW(Trainer<float>(b, c, nullptr), ContractError);
}

TEST(Fit, EmptyTrainingSetIsContractError) {
  EXPECT_THROW(fit<float>({}, toy_config(), testing::tiny_frn_config(), testing::tiny_dn_config(), nullptr),
               ContractError);
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

TEST(Fit, MetricsLogHasOneFiniteLinePerStepAndCheckpointsAreNamedByStep) {
  TempDir dir("log");
  auto data = toy_set(10);
  TrainConfig c = toy_config();
  c.epochs = 2;
  c.checkpoint_every = 2;
  FitOptions o;
  o.out_dir = dir.path;
  auto res = fit<float>(data, c, testing::tiny_frn_config(), testing::tiny_dn_config(), nullptr, o);
  EXPECT_EQ(res.steps_per_epoch, 3);
  const auto lines = read_lines(dir.path / "metrics.jsonl");
  ASSERT_EQ(lines.size(), 6u);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    auto j = nlohmann::json::parse(lines[i]);
    EXPECT_EQ(j.at("step").get<int>(), static_cast<int>(i));
    for (const char* k : {"epoch", "l_pix", "l_id", "l_adv", "l_dis", "d_real_mean", "d_fake_mean", "lambda"})
      EXPECT_TRUE(std::isfinite(j.at(k).get<double>())) << k;
    EXPECT_EQ(j.size(), 9u);
  }
  for (int s : {2, 4, 6}) EXPECT_TRUE(fs::exists(checkpoint_path(dir.path, s))) << s;
}

TEST(Fit, ResumeFromCheckpointReproducesUninterruptedRun) {
  TempDir a("full"), b("resumed");
  auto data = toy_set(10);
  TrainConfig c = toy_config();
  c.epochs = 3;
  c.checkpoint_every = 4;
  ConvExtractorConfig pc;
  pc.input_size = 16;
  pc.channels = {4, 6};
  pc.feature_layer = 2;
  pc.embedding_dim = 0;
  pc.style_layer_count = 2;
  ConvExtractor<float> psi(pc, 2, "psi");
  psi.freeze();
  c.loss_weights.eta = 1e-3;

  FitOptions full;
  full.out_dir = a.path;
  auto ra = fit<float>(data, c, testing::tiny_frn_config(), testing::tiny_dn_config(), &psi, full);

  FitOptions first;
  first.out_dir = b.path;
  first.max_steps = 5;  // interrupted after the step-4 checkpoint
  fit<float>(data, c, testing::tiny_frn_config(), testing::tiny_dn_config(), &psi, first);
  FitOptions second;
  second.out_dir = b.path;
  second.resume_from = checkpoint_path(b.path, 4);
  auto rb = fit<float>(data, c, testing::tiny_frn_config(), testing::tiny_dn_config(), &psi, second);

  EXPECT_EQ(read_lines(a.path / "metrics.jsonl"), read_lines(b.path / "metrics.jsonl"));
  EXPECT_EQ(ra.bundle.hash(), rb.bundle.hash());
  EXPECT_EQ(read_file_bytes(checkpoint_path(a.path, 9)), read_file_bytes(checkpoint_path(b.path, 9)));
}

TEST(Fit, CorruptCheckpointIsLoadError) {
  TempDir dir("corrupt");
  auto data = toy_set(4);
  TrainConfig c = toy_config();
  FitOptions o;
  o.out_dir = dir.path;
  fit<float>(data, c, testing::tiny_frn_config(), testing::tiny_dn_config(), nullptr, o);
  const auto ck = checkpoint_path(dir.path, 1);
  auto bytes = read_file_bytes(ck);
  bytes[bytes.size() - 3] ^= 0x5a;
  write_file_bytes(ck, bytes);
  FitOptions r;
  r.resume_from = ck;
  EXPECT_THROW(fit<float>(data, c, testing::tiny_frn_config(), testing::tiny_dn_config(), nullptr, r), LoadError);
}

}  // namespace
}  // namespace afrp
