#pragma once

// Alternating adversarial training: one discriminator step then one
// generator step per batch, RMSprop on both networks.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "afrp/dataset.hpp"
#include "afrp/losses.hpp"

namespace afrp {

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-3;
  double dn_learning_rate = 0;  // 0: same as learning_rate
  double weight_decay = 1e-2;
  std::string optimizer = "rmsprop";
  double rmsprop_alpha = 0.99;
  double rmsprop_eps = 1e-8;
  LossWeights loss_weights;
  int epochs = 1;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // steps; 0 writes only the final checkpoint

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (!(dn_learning_rate >= 0)) throw ConfigError("dn_learning_rate must be >= 0");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
    if (optimizer != "rmsprop") throw ConfigError("optimizer must be 'rmsprop', got '" + optimizer + "'");
    if (!(rmsprop_alpha > 0 && rmsprop_alpha < 1)) throw ConfigError("rmsprop_alpha must lie in (0,1)");
    if (!(rmsprop_eps > 0)) throw ConfigError("rmsprop_eps must be > 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    try {
      loss_weights.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
  }

  nn::RmsPropConfig rmsprop() const { return {learning_rate, rmsprop_alpha, rmsprop_eps, weight_decay}; }
  nn::RmsPropConfig dn_rmsprop() const {
    return {dn_learning_rate > 0 ? dn_learning_rate : learning_rate, rmsprop_alpha, rmsprop_eps, weight_decay};
  }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},       {"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
       {"dn_learning_rate", c.dn_learning_rate},
       {"optimizer", c.optimizer},         {"rmsprop_alpha", c.rmsprop_alpha}, {"rmsprop_eps", c.rmsprop_eps},
       {"loss_weights", c.loss_weights},   {"epochs", c.epochs},               {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.dn_learning_rate = j.value("dn_learning_rate", d.dn_learning_rate);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.rmsprop_alpha = j.value("rmsprop_alpha", d.rmsprop_alpha);
  c.rmsprop_eps = j.value("rmsprop_eps", d.rmsprop_eps);
  c.loss_weights = j.contains("loss_weights") ? j.at("loss_weights").get<LossWeights>() : d.loss_weights;
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
}

/// lambda_0 * decay^epochs.
inline double scheduled_lambda(const LossWeights& w, std::int64_t epochs_elapsed) {
  return w.lambda * std::pow(w.lambda_decay, static_cast<double>(epochs_elapsed));
}

struct StepMetrics {
  std::int64_t step = 0;  // zero-based index of the step
  std::int64_t epoch = 0;
  double l_pix = 0, l_id = 0, l_adv = 0, l_dis = 0;
  double d_real_mean = 0, d_fake_mean = 0;
  double lambda = 0;
  // Diagnostics kept out of the metrics log.
  double frn_grad_norm = 0, stn_grad_norm = 0, dn_grad_norm = 0;

  bool all_finite() const {
    for (double v : {l_pix, l_id, l_adv, l_dis, d_real_mean, d_fake_mean, lambda})
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline nlohmann::json metrics_json(const StepMetrics& m) {
  return {{"step", m.step},   {"epoch", m.epoch},   {"l_pix", m.l_pix},
          {"l_id", m.l_id},   {"l_adv", m.l_adv},   {"l_dis", m.l_dis},
          {"d_real_mean", m.d_real_mean}, {"d_fake_mean", m.d_fake_mean}, {"lambda", m.lambda}};
}

/// A training batch as tensors plus the attribute vectors they came from.
template <class T>
struct Batch {
  Tensor<T> portraits;
  Tensor<T> reals;
  Tensor<T> attrs;
  std::vector<AttributeVector> attribute_vectors;

  int size() const { return portraits.dim(0); }
};

template <class T>
Batch<T> make_batch(std::span<const Triplet> triplets, std::span<const std::size_t> indices) {
  detail::require(!indices.empty(), "make_batch: empty index list");
  std::vector<FaceImage> portraits, reals;
  Batch<T> b;
  for (std::size_t i : indices) {
    detail::require(i < triplets.size(), "make_batch: index out of range");
    portraits.push_back(triplets[i].portrait);
    reals.push_back(triplets[i].real);
    b.attribute_vectors.push_back(triplets[i].attributes);
  }
  b.portraits = images_to_tensor<T>(portraits);
  b.reals = images_to_tensor<T>(reals);
  b.attrs = attributes_to_tensor<T>(b.attribute_vectors);
  return b;
}

namespace detail {

template <class T>
double grad_norm(const nn::ParamStore<T>& ps, const std::string& contains = {}) {
  double s = 0;
  for (const auto& [name, p] : ps.items()) {
    if (!contains.empty() && name.find(contains) == std::string::npos) continue;
    if (!p.has_grad()) continue;
    const auto& g = p.node()->grad;
    for (std::size_t i = 0; i < g.numel(); ++i) s += double(g[i]) * g[i];
  }
  return std::sqrt(s);
}

template <class T>
std::string parameter_norm_table(const nn::ParamStore<T>& ps, const std::string& prefix) {
  std::ostringstream os;
  for (const auto& [name, p] : ps.items()) {
    double s = 0;
    bool finite = true;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      finite = finite && std::isfinite(double(p.value()[i]));
      s += double(p.value()[i]) * p.value()[i];
    }
    os << "  " << prefix << name << "  norm=" << std::sqrt(s) << (finite ? "" : "  NON-FINITE") << '\n';
  }
  return os.str();
}

}  // namespace detail

/// Mutable training state around a ModelBundle: optimizers and running
/// loss averages. The bundle's ScheduleState carries step, epoch, lambda.
template <class T>
class Trainer {
 public:
  Trainer(ModelBundle<T>& bundle, TrainConfig cfg, const FeatureExtractor<T>* psi)
      : bundle_(bundle), cfg_(std::move(cfg)), psi_(psi),
        opt_g_(bundle.frn.params(), cfg_.rmsprop()), opt_d_(bundle.dn.params(), cfg_.dn_rmsprop()) {
    cfg_.validate();
    detail::require(psi_ != nullptr || cfg_.loss_weights.eta == 0,
                    "training with eta > 0 needs an identity feature extractor");
    if (psi_)
      detail::require(psi_->accepts(bundle.frn.config().input_size),
                      "identity extractor '" + psi_->id() + "' does not accept the generator's image size");
    if (bundle_.schedule.step == 0 && bundle_.schedule.epoch == 0) bundle_.schedule.lambda = cfg_.loss_weights.lambda;
  }

  const TrainConfig& config() const { return cfg_; }
  ModelBundle<T>& bundle() { return bundle_; }
  nn::RmsProp<T>& generator_optimizer() { return opt_g_; }
  nn::RmsProp<T>& discriminator_optimizer() { return opt_d_; }
  std::map<std::string, double>& running() { return running_; }

  /// One discriminator update on the three pair types. Returns the loss
  /// before the update and fills the D diagnostics of `m`.
  double discriminator_step(const Batch<T>& b, std::uint64_t step_seed, StepMetrics& m) {
    auto& frn = bundle_.frn;
    auto& dn = bundle_.dn;
    Var<T> fake;
    {
      NoGradGuard no_grad;
      fake = frn.forward(Var<T>::leaf(b.portraits), Var<T>::leaf(b.attrs));
    }
    const auto mismatched = sample_mismatched_attributes(b.attribute_vectors, derive_seed(step_seed, hash_string("D")));
    auto reals = Var<T>::leaf(b.reals);
    auto attrs = Var<T>::leaf(b.attrs);
    auto d_real = dn.forward(reals, attrs);
    auto d_fake = dn.forward(fake.detach(), attrs);
    auto d_mis = dn.forward(reals, Var<T>::leaf(attributes_to_tensor<T>(mismatched)));
    auto loss = discriminator_loss(d_real, d_fake, d_mis);
    m.l_dis = loss.item();
    m.d_real_mean = mean_of(d_real.value());
    m.d_fake_mean = mean_of(d_fake.value());
    check_finite_losses(m, "discriminator");
    dn.params().zero_grad();
    backward(loss);
    m.dn_grad_norm = detail::grad_norm(dn.params());
    opt_d_.step(dn.params());
    dn.params().zero_grad();
    return m.l_dis;
  }

  /// One generator update with the discriminator frozen.
  double generator_step(const Batch<T>& b, StepMetrics& m) {
    auto& frn = bundle_.frn;
    auto& dn = bundle_.dn;
    LossWeights w = cfg_.loss_weights;
    w.lambda = bundle_.schedule.lambda;
    dn.params().set_trainable(false);
    struct Restore {
      nn::ParamStore<T>& ps;
      ~Restore() { ps.set_trainable(true); }
    } restore{dn.params()};
    auto recovered = frn.forward(Var<T>::leaf(b.portraits), Var<T>::leaf(b.attrs));
    auto g = generator_loss(recovered, Var<T>::leaf(b.reals), Var<T>::leaf(b.attrs), dn, psi_, w);
    m.l_pix = g.pixel.item();
    m.l_adv = g.adversarial.item();
    m.l_id = psi_ ? g.identity.item() : 0.0;
    m.lambda = w.lambda;
    check_finite_losses(m, "generator");
    frn.params().zero_grad();
    backward(g.total);
    m.frn_grad_norm = detail::grad_norm(frn.params());
    m.stn_grad_norm = detail::grad_norm(frn.params(), "stn");
    opt_g_.step(frn.params());
    frn.params().zero_grad();
    return g.total.item();
  }

  /// D step, G step, schedule bookkeeping. `steps_per_epoch` drives the
  /// per-epoch lambda decay; 0 disables it.
  StepMetrics train_step(const Batch<T>& b, std::int64_t steps_per_epoch = 0) {
    detail::require(b.portraits.dim(0) == b.reals.dim(0) && b.portraits.dim(0) == b.attrs.dim(0),
                    "train_step: batch tensors disagree on batch size");
    auto& s = bundle_.schedule;
    StepMetrics m;
    m.step = s.step;
    m.epoch = s.epoch;
    const std::uint64_t step_seed = derive_seed(cfg_.seed, hash_string("step"), static_cast<std::uint64_t>(s.step));
    discriminator_step(b, step_seed, m);
    generator_step(b, m);
    if (!bundle_.all_finite()) throw NumericError(snapshot(m, "parameters became non-finite"));
    for (const auto& [k, v] : std::initializer_list<std::pair<const char*, double>>{
             {"l_pix", m.l_pix}, {"l_id", m.l_id}, {"l_adv", m.l_adv}, {"l_dis", m.l_dis}}) {
      auto it = running_.find(k);
      running_[k] = it == running_.end() ? v : 0.98 * it->second + 0.02 * v;
    }
    ++s.step;
    if (steps_per_epoch > 0 && s.step % steps_per_epoch == 0) {
      ++s.epoch;
      s.lambda = scheduled_lambda(cfg_.loss_weights, s.epoch);
    }
    return m;
  }

 private:
  static double mean_of(const Tensor<T>& t) {
    double s = 0;
    for (std::size_t i = 0; i < t.numel(); ++i) s += t[i];
    return s / static_cast<double>(t.numel());
  }

  void check_finite_losses(const StepMetrics& m, const char* phase) const {
    if (!m.all_finite()) throw NumericError(snapshot(m, std::string("non-finite loss in ") + phase + " step"));
  }

  std::string snapshot(const StepMetrics& m, const std::string& what) const {
    std::ostringstream os;
    os << what << " at step " << m.step << " (epoch " << m.epoch << ")\n"
       << "  " << metrics_json(m).dump() << "\nparameter norms:\n"
       << detail::parameter_norm_table(bundle_.frn.params(), "frn/")
       << detail::parameter_norm_table(bundle_.dn.params(), "dn/");
    return os.str();
  }

  ModelBundle<T>& bundle_;
  TrainConfig cfg_;
  const FeatureExtractor<T>* psi_;
  nn::RmsProp<T> opt_g_, opt_d_;
  std::map<std::string, double> running_;
};

// ---- checkpoints ---------------------------------------------------------------

inline constexpr const char* kCheckpointKind = "afrp-train-checkpoint";

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::int64_t step) {
  return dir / ("ckpt_step" + std::to_string(step) + ".afrp");
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, Trainer<T>& tr) {
  Archive ar = bundle_to_archive(tr.bundle());
  ar.header["kind"] = kCheckpointKind;
  ar.header["train_config"] = tr.config();
  ar.header["running"] = tr.running();
  for (const auto& [name, v] : tr.generator_optimizer().state()) ar.tensors.emplace_back("opt_g/" + name, v.template cast<float>());
  for (const auto& [name, v] : tr.discriminator_optimizer().state())
    ar.tensors.emplace_back("opt_d/" + name, v.template cast<float>());
  write_archive(path, ar);
}

/// Restores bundle, optimizer moments and running averages in place. The
/// trainer must have been built for the same architecture.
template <class T>
void restore_checkpoint(const Archive& ar, Trainer<T>& tr) {
  if (ar.header.value("kind", std::string()) != kCheckpointKind)
    throw LoadError("archive is not a training checkpoint (kind '" + ar.header.value("kind", std::string()) + "')");
  nlohmann::json bundle_header = ar.header;
  bundle_header["kind"] = kBundleKind;
  Archive as_bundle{bundle_header, {}};
  for (const auto& [name, t] : ar.tensors)
    if (name.rfind("frn/", 0) == 0 || name.rfind("dn/", 0) == 0) as_bundle.tensors.emplace_back(name, t);
  ModelBundle<T> loaded = bundle_from_archive<T>(as_bundle);
  if (!(loaded.frn.config() == tr.bundle().frn.config()) || !(loaded.dn.config() == tr.bundle().dn.config()))
    throw LoadError("checkpoint architecture does not match the configured model");
  tr.bundle().frn.params().assign_from(loaded.frn.params());
  tr.bundle().dn.params().assign_from(loaded.dn.params());
  tr.bundle().schedule = loaded.schedule;
  auto restore_opt = [&](nn::RmsProp<T>& opt, const std::string& prefix) {
    for (auto& [name, v] : opt.state()) {
      const auto& t = ar.tensor(prefix + name);
      if (t.shape() != v.shape()) throw LoadError("optimizer state " + prefix + name + " has the wrong shape");
      v = t.template cast<T>();
    }
  };
  restore_opt(tr.generator_optimizer(), "opt_g/");
  restore_opt(tr.discriminator_optimizer(), "opt_d/");
  try {
    tr.running() = ar.header.value("running", nlohmann::json::object()).get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed running averages: ") + e.what());
  }
}

// ---- fit ---------------------------------------------------------------------------

struct FitOptions {
  std::filesystem::path out_dir;  // checkpoints and metrics.jsonl; empty disables both
  std::optional<std::filesystem::path> resume_from;
  std::int64_t max_steps = -1;  // stop early after this many total steps (for interruption tests)
  std::function<void(const StepMetrics&)> on_step;
};

template <class T>
struct FitResult {
  ModelBundle<T> bundle;
  std::vector<StepMetrics> metrics;  // steps taken in this call
  std::int64_t steps_per_epoch = 0;
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, hash_string("shuffle"), static_cast<std::uint64_t>(epoch)));
  rng.shuffle(order.begin(), order.end());
  return order;
}

/// Keeps metrics lines whose step precedes `step`; used when resuming.
inline void truncate_metrics(const std::filesystem::path& path, std::int64_t step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (nlohmann::json::parse(line).at("step").get<std::int64_t>() < step) keep.push_back(line);
    } catch (const nlohmann::json::exception&) {
      break;
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

template <class T>
FitResult<T> fit(const std::vector<Triplet>& train, const TrainConfig& cfg, const FrnConfig& frn_cfg,
                 const DnConfig& dn_cfg, const FeatureExtractor<T>* psi, const FitOptions& opts = {}) {
  detail::require(!train.empty(), "fit: the training split is empty");
  cfg.validate();
  FitResult<T> res{ModelBundle<T>(frn_cfg, dn_cfg, cfg.seed), {}, 0};
  Trainer<T> tr(res.bundle, cfg, psi);
  const auto n = static_cast<std::int64_t>(train.size());
  const std::int64_t spe = (n + cfg.batch_size - 1) / cfg.batch_size;
  res.steps_per_epoch = spe;
  if (opts.resume_from) restore_checkpoint(read_archive(*opts.resume_from), tr);

  std::optional<std::ofstream> log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    const auto metrics_path = opts.out_dir / "metrics.jsonl";
    if (opts.resume_from)
      truncate_metrics(metrics_path, res.bundle.schedule.step);
    else
      std::filesystem::remove(metrics_path);
    log.emplace(metrics_path, std::ios::app);
    if (!*log) throw IoError("cannot open " + metrics_path.string());
  }

  auto& s = res.bundle.schedule;
  const std::int64_t total = spe * cfg.epochs;
  const std::int64_t stop = opts.max_steps >= 0 ? std::min(total, opts.max_steps) : total;
  std::int64_t order_epoch = -1;
  std::vector<std::size_t> order;
  while (s.step < stop) {
    const std::int64_t epoch = s.step / spe, pos = s.step % spe;
    if (epoch != order_epoch) {
      order = epoch_order(train.size(), cfg.seed, epoch);
      order_epoch = epoch;
    }
    const std::size_t begin = static_cast<std::size_t>(pos * cfg.batch_size);
    const std::size_t end = std::min(train.size(), begin + static_cast<std::size_t>(cfg.batch_size));
    auto batch = make_batch<T>(train, std::span(order).subspan(begin, end - begin));
    StepMetrics m = tr.train_step(batch, spe);
    res.metrics.push_back(m);
    if (log) {
      *log << metrics_json(m).dump() << '\n';
      log->flush();
    }
    if (opts.on_step) opts.on_step(m);
    const bool periodic = cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0;
    if (!opts.out_dir.empty() && (periodic || s.step == stop)) save_checkpoint(checkpoint_path(opts.out_dir, s.step), tr);
  }
  return res;
}

}  // namespace afrp
