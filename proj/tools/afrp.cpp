// Command-line front end: dataset synthesis, style selection, probe and
// model training, evaluation, single-image recovery and the HTTP service.
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "afrp/pipeline.hpp"
#include "afrp/service.hpp"

namespace fs = std::filesystem;
using namespace afrp;

namespace {

struct UsageError : Error {
  using Error::Error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

void require_parent(const fs::path& p, const std::string& what) {
  const fs::path parent = fs::absolute(p).parent_path();
  if (!fs::is_directory(parent)) throw UsageError(what + ": parent directory " + parent.string() + " does not exist");
}

/// "Name=value,Name=value" over the neutral vector.
AttributeVector parse_attr_pairs(const std::string& spec) {
  AttributeVector a = AttributeVector::neutral();
  for (const auto& item : split_list(spec)) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw UsageError("--attrs entry '" + item + "' is not Name=value");
    const auto name = item.substr(0, eq);
    if (!attribute_index(name)) throw UsageError("--attrs: unknown attribute '" + name + "'");
    try {
      std::size_t used = 0;
      a[name] = std::stod(item.substr(eq + 1), &used);
      if (used != item.size() - eq - 1) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw UsageError("--attrs: value for " + name + " is not a number");
    }
  }
  return a;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

struct Options {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

ProjectConfig resolve_config(const Options& o) {
  ProjectConfig c = o.config_path.empty() ? parse_project_config(nlohmann::json::object()) : load_project_config(o.config_path);
  if (o.seed_set) {
    c.data.seed = o.seed;
    c.train.seed = o.seed;
    c.probes.seed = o.seed;
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-guided face recovery from stylized portraits"};
  app.require_subcommand(1);
  app.fallthrough();
  Options opt;
  app.add_option("--config", opt.config_path, "project config JSON");
  app.add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { opt.seed = s, opt.seed_set = true; }, "seed for every random choice");

  // synthesize
  auto* syn = app.add_subcommand("synthesize", "render faces and build the triplet dataset");
  std::string syn_out, syn_styles, syn_faces_dir;
  int syn_faces = 0, syn_per = 0, syn_size = 0;
  syn->add_option("--out", syn_out, "dataset directory")->required();
  syn->add_option("--faces", syn_faces, "number of real faces");
  syn->add_option("--images-per-identity", syn_per, "procedural images per identity");
  syn->add_option("--size", syn_size, "image size");
  syn->add_option("--styles", syn_styles, "comma-separated style ids (default: top-k by distinctiveness)");
  syn->add_option("--faces-dir", syn_faces_dir, "external aligned face folder with attributes.csv");

  // select-styles
  auto* sel = app.add_subcommand("select-styles", "rank candidate styles by distinctiveness");
  std::string sel_candidates, sel_probes, sel_json;
  int sel_top = 0, sel_sample = 0;
  sel->add_option("--candidates", sel_candidates, "comma-separated style ids");
  sel->add_option("--top", sel_top, "number of styles to select");
  sel->add_option("--sample", sel_sample, "procedural faces to profile");
  sel->add_option("--probes", sel_probes, "probe archive whose identity features define style");
  sel->add_option("--json", sel_json, "write the ranking as JSON");

  // train-probes
  auto* tp = app.add_subcommand("train-probes", "train identity and attribute probes on real faces");
  std::string tp_data, tp_out, tp_attrs;
  int tp_epochs = 0;
  tp->add_option("--dataset", tp_data, "dataset directory")->required();
  tp->add_option("--out", tp_out, "probe archive path")->required();
  tp->add_option("--epochs", tp_epochs, "training epochs");
  tp->add_option("--attributes", tp_attrs, "comma-separated probed attributes (default all)");

  // train
  auto* tr = app.add_subcommand("train", "train the recovery model");
  std::string tr_data, tr_out, tr_probes, tr_resume;
  int tr_epochs = -1, tr_batch = 0, tr_every = -1;
  std::int64_t tr_max_steps = -1;
  double tr_eta = -1, tr_dn_lr = -1;
  tr->add_option("--dataset", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory for metrics, checkpoints and model.afrp")->required();
  tr->add_option("--probes", tr_probes, "probe archive; its identity trunk is the identity-loss extractor");
  tr->add_option("--epochs", tr_epochs, "epochs");
  tr->add_option("--batch-size", tr_batch, "batch size");
  tr->add_option("--checkpoint-every", tr_every, "checkpoint interval in steps");
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");
  tr->add_option("--max-steps", tr_max_steps, "stop after this global step");
  tr->add_option("--eta", tr_eta, "identity-loss weight");
  tr->add_option("--dn-lr", tr_dn_lr, "discriminator learning rate");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score a model on the test split");
  std::string ev_data, ev_model, ev_probes, ev_out, ev_attrs;
  ev->add_option("--dataset", ev_data, "dataset directory")->required();
  ev->add_option("--model", ev_model, "model bundle or checkpoint")->required();
  ev->add_option("--probes", ev_probes, "probe archive")->required();
  ev->add_option("--out", ev_out, "write the report JSON here");
  ev->add_option("--attributes", ev_attrs, "comma-separated probe attributes");

  // recover
  auto* rc = app.add_subcommand("recover", "recover a face from one portrait");
  std::string rc_model, rc_in, rc_out, rc_attrs;
  rc->add_option("--model", rc_model, "model bundle or checkpoint")->required();
  rc->add_option("--input", rc_in, "portrait PNG")->required();
  rc->add_option("--out", rc_out, "output PNG")->required();
  rc->add_option("--attrs", rc_attrs, "Name=value pairs; unspecified attributes are 0.5");

  // serve
  auto* sv = app.add_subcommand("serve", "run the HTTP inference service");
  std::string sv_model, sv_host;
  int sv_port = -1;
  sv->add_option("--model", sv_model, "model bundle or checkpoint");
  sv->add_option("--host", sv_host, "bind address");
  sv->add_option("--port", sv_port, "port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    ProjectConfig cfg = resolve_config(opt);

    if (*syn) {
      if (syn_faces > 0) cfg.data.faces = syn_faces;
      if (syn_per > 0) cfg.data.images_per_identity = syn_per;
      if (syn_size > 0) {
        cfg.data.image_size = syn_size;
        cfg.frn.input_size = cfg.dn.input_size = syn_size;
      }
      if (!syn_faces_dir.empty()) cfg.data.faces_dir = syn_faces_dir;
      require_parent(syn_out, "--out");
      const auto faces = source_faces(cfg.data);
      std::vector<std::string> styles = syn_styles.empty() ? cfg.styles.selected : split_list(syn_styles);
      if (styles.empty()) {
        std::vector<FaceImage> sample;
        for (std::size_t i = 0; i < faces.size() && sample.size() < static_cast<std::size_t>(cfg.styles.sample_faces); ++i)
          sample.push_back(faces[i].image);
        const auto ext = default_style_extractor(cfg.data.image_size, cfg.data.seed);
        if (cfg.styles.top_k > static_cast<int>(cfg.styles.candidates.size()))
          throw UsageError("styles.top_k exceeds the number of candidates");
        for (const auto& p : rank_styles(sample, cfg.styles.candidates, ext, cfg.data.seed))
          if (static_cast<int>(styles.size()) < cfg.styles.top_k) styles.push_back(p.style_id);
      }
      StylizerList stylizers;
      try {
        stylizers = stylizers_for(styles);
      } catch (const ContractError& e) {
        throw UsageError(e.what());
      }
      const auto m = build_triplets(faces, stylizers, cfg.data.misalign, cfg.data.seed, syn_out, cfg.data.test_fraction);
      std::printf("faces %zu identities %zu styles %zu\n", faces.size(), m.identities(Split::Train).size() + m.identities(Split::Test).size(), styles.size());
      std::printf("records %zu (train %zu, test %zu)\n", m.records.size(), m.indices(Split::Train).size(), m.indices(Split::Test).size());
      return 0;
    }

    if (*sel) {
      const auto candidates = sel_candidates.empty() ? cfg.styles.candidates : split_list(sel_candidates);
      const int k = sel_top > 0 ? sel_top : cfg.styles.top_k;
      if (k > static_cast<int>(candidates.size()))
        throw UsageError("--top " + std::to_string(k) + " exceeds the " + std::to_string(candidates.size()) + " candidate styles");
      DataSection d = cfg.data;
      d.faces = sel_sample > 0 ? sel_sample : cfg.styles.sample_faces;
      const auto faces = source_faces(d);
      std::vector<FaceImage> sample;
      for (const auto& f : faces) sample.push_back(f.image);
      std::vector<StyleProfile> ranked;
      if (!sel_probes.empty()) {
        const auto probes = load_probes(sel_probes);
        ranked = rank_styles(sample, candidates, probes.identity_extractor(), d.seed);
      } else {
        ranked = rank_styles(sample, candidates, default_style_extractor(d.image_size, d.seed), d.seed);
      }
      nlohmann::json j = nlohmann::json::array();
      for (std::size_t i = 0; i < ranked.size(); ++i) {
        std::printf("%zu %-10s %.9g\n", i + 1, ranked[i].style_id.c_str(), ranked[i].distinctiveness);
        j.push_back({{"style_id", ranked[i].style_id}, {"distinctiveness", ranked[i].distinctiveness}});
      }
      std::string chosen;
      for (int i = 0; i < k; ++i) chosen += (i ? "," : "") + ranked[i].style_id;
      std::printf("selected %s\n", chosen.c_str());
      if (!sel_json.empty()) write_text(sel_json, nlohmann::json{{"ranking", j}, {"selected", split_list(chosen)}, {"extractor", ranked.front().extractor_id}}.dump(2));
      return 0;
    }

    if (*tp) {
      require_parent(tp_out, "--out");
      ProbeConfig pc = cfg.probes;
      if (tp_epochs > 0) pc.epochs = tp_epochs;
      if (!tp_attrs.empty()) pc.attributes = split_list(tp_attrs);
      const auto m = load_manifest(tp_data);
      pc.identity_net.input_size = pc.attribute_net.input_size = m.image_size;
      const auto faces = load_real_faces(m);
      const auto probes = train_probes(faces, pc);
      save_probes(tp_out, probes);
      std::printf("probes %s trained on %zu faces, %zu identities\n", probes.hash().c_str(), probes.accuracy.train_count, probes.identities.size());
      if (probes.accuracy.identity) std::printf("held-out identity accuracy %.4f\n", *probes.accuracy.identity);
      for (const auto& [name, acc] : probes.accuracy.attributes) std::printf("held-out %-20s %.4f\n", name.c_str(), acc);
      return 0;
    }

    if (*tr) {
      TrainConfig tc = cfg.train;
      if (tr_epochs >= 0) tc.epochs = tr_epochs;
      if (tr_batch > 0) tc.batch_size = tr_batch;
      if (tr_every >= 0) tc.checkpoint_every = tr_every;
      if (tr_eta >= 0) tc.loss_weights.eta = tr_eta;
      if (tr_dn_lr >= 0) tc.dn_learning_rate = tr_dn_lr;
      tc.validate();
      require_parent(tr_out, "--out");
      fs::create_directories(tr_out);
      const auto m = load_manifest(tr_data);
      FrnConfig fc = cfg.frn;
      DnConfig dc = cfg.dn;
      fc.input_size = dc.input_size = m.image_size;
      std::optional<ProbeSet> probes;
      const std::string probe_path = !tr_probes.empty() ? tr_probes : cfg.probes_path;
      if (!probe_path.empty()) probes.emplace(load_probes(probe_path));
      if (tc.loss_weights.eta > 0 && !probes)
        throw UsageError("the identity loss needs --probes (or --eta 0)");
      const auto train = load_triplets(m, Split::Train);
      FitOptions fo;
      fo.out_dir = tr_out;
      if (!tr_resume.empty()) fo.resume_from = tr_resume;
      if (tr_max_steps >= 0) fo.max_steps = tr_max_steps;
      const FeatureExtractor<float>* psi = probes ? &probes->identity_extractor() : nullptr;
      auto res = fit<float>(train, tc, fc, dc, psi, fo);
      save_bundle(fs::path(tr_out) / "model.afrp", res.bundle);
      std::printf("trained %zu steps (%lld epochs) on %zu triplets; model %s\n", res.metrics.size(),
                  static_cast<long long>(res.bundle.schedule.epoch), train.size(), res.bundle.hash().c_str());
      return 0;
    }

    if (*ev) {
      if (!ev_out.empty()) require_parent(ev_out, "--out");
      const auto m = load_manifest(ev_data);
      const auto bundle = load_model(ev_model);
      const auto probes = load_probes(ev_probes);
      EvalOptions eo = cfg.evaluation;
      if (!ev_attrs.empty()) eo.probe_attributes = split_list(ev_attrs);
      const auto report = evaluate(bundle, m, probes, eo);
      std::fputs(format_table(report).c_str(), stdout);
      if (!ev_out.empty()) write_text(ev_out, nlohmann::json(report).dump(2));
      return 0;
    }

    if (*rc) {
      require_parent(rc_out, "--out");
      const AttributeVector attrs = parse_attr_pairs(rc_attrs);
      const auto bundle = load_model(rc_model);
      const FaceImage portrait = load_portrait(rc_in, bundle.frn.config().input_size);
      const auto out = recover_images(bundle.frn, std::span<const FaceImage>(&portrait, 1),
                                      std::span<const AttributeVector>(&attrs, 1));
      write_png(rc_out, out.front());
      std::printf("wrote %s (attrs %s, model %s)\n", rc_out.c_str(), attrs_hash(attrs).c_str(), bundle.hash().c_str());
      return 0;
    }

    if (*sv) {
      const std::string model = !sv_model.empty() ? sv_model : cfg.service.model_path;
      if (model.empty()) throw UsageError("serve needs --model or service.model_path");
      RecoveryService service(load_model(model), hash_hex(nlohmann::json(cfg).dump()), cfg.service.cache_capacity);
      httplib::Server server;
      service.install(server);
      const std::string host = sv_host.empty() ? cfg.service.host : sv_host;
      const int port = sv_port >= 0 ? sv_port : cfg.service.port;
      std::fprintf(stderr, "serving model %s on %s:%d\n", service.model_hash().c_str(), host.c_str(), port);
      if (!server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
      return 0;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
