#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pda/datagen/datagen.hpp"
#include "pda/errors.hpp"
#include "pda/io/config.hpp"
#include "pda/io/files.hpp"
#include "pda/metrics/metrics.hpp"
#include "pda/training/training.hpp"

namespace fs = std::filesystem;
using namespace pda;
using num::Tensor;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

int exit_code(const Error& e) {
  switch (e.category()) {
    case Error::Category::usage:
      return kExitUsage;
    case Error::Category::numerical:
      return kExitNumerical;
    case Error::Category::data:
    case Error::Category::contract:
      break;
  }
  return kExitData;
}

struct ConfigOptions {
  std::string file;
  std::vector<std::string> settings;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--set", settings, "override one key: --set key=value (repeatable)");
  }
};

// Frozen encoder, pipeline and data assembled from a manifest and config.
struct Session {
  io::RunConfig config;
  io::LoadedDataset dataset;
  std::unique_ptr<enc::DualEncoder> encoder;
  std::unique_ptr<train::Pipeline> pipeline;
};

Session open_session(const std::string& manifest, const ConfigOptions& options) {
  Session s;
  if (!options.file.empty()) io::apply_config_file(s.config, options.file);
  for (const auto& kv : options.settings) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ParameterError("--set expects key=value, got '" + kv + "'");
    io::apply_setting(s.config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  s.dataset = io::load_dataset(manifest);
  const auto& m = s.dataset.manifest;
  s.config.encoder.vocab_size = m.classes();
  if (m.kind == train::FeatureKind::raw_patches) s.config.encoder.n_patches = m.n_patches;
  s.config.finalize();
  auto weights = enc::FrozenWeights::random(s.config.encoder);
  if (s.dataset.anchors) weights.set_token_embeddings(*s.dataset.anchors);
  s.encoder = std::make_unique<enc::DualEncoder>(s.config.encoder, std::move(weights));
  s.dataset.data.validate(s.config.encoder);
  s.pipeline = std::make_unique<train::Pipeline>(*s.encoder, m.kind, m.classes());
  return s;
}

void print_prefixed(std::ostream& os, const std::string& text, const std::string& prefix) {
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) os << prefix << line << '\n';
}

std::optional<std::vector<std::uint32_t>> eval_labels_if_present(const fs::path& target) {
  try {
    return io::read_eval_labels(target);
  } catch (const DataError&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  data::SyntheticShiftSpec spec;
  std::string out = ".";
  std::string dtype = "f64";
};

int run_generate(const GenerateArgs& a) {
  a.spec.validate();
  const auto ds = data::generate_synthetic(a.spec);
  const io::DType dtype = a.dtype == "f32" ? io::DType::f32 : io::DType::f64;
  const fs::path dir = a.out;
  fs::create_directories(dir);

  io::write_embeddings(dir / "source.pdae", io::flatten_samples(ds.source), &ds.source_labels, dtype);
  io::write_embeddings(dir / "target.pdae", io::flatten_samples(ds.target), nullptr, dtype, &ds.target_labels);
  const std::vector<io::Record> anchors{io::Record::matrix(io::Section::weights, ds.class_means, dtype)};
  io::write_file(dir / "anchors.pdae", anchors);

  io::DatasetManifest m;
  for (std::size_t k = 0; k < a.spec.classes; ++k) m.class_names.push_back("class" + std::to_string(k));
  m.kind = train::FeatureKind::raw_patches;
  m.n_patches = a.spec.n_patches;
  m.source = "source.pdae";
  m.target = "target.pdae";
  m.anchors = "anchors.pdae";
  io::write_manifest(dir / "data.manifest", m);
  std::cout << "wrote " << (dir / "data.manifest").string() << " (" << ds.source.size() << " source, "
            << ds.target.size() << " target samples)\n";
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string manifest;
  ConfigOptions config;
  std::string out = "model.ckpt";
  std::string log = "train.log";
  std::string resume;
  std::size_t stop_after = 0;
};

int run_train(const TrainArgs& a) {
  Session s = open_session(a.manifest, a.config);
  const std::string resolved = io::describe(s.config);
  print_prefixed(std::cout, resolved, "# ");

  std::optional<train::CheckpointState> resume;
  if (!a.resume.empty()) resume = io::read_checkpoint(a.resume);

  std::ofstream log(a.log, resume ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot open log file " + a.log);
  if (!resume) {
    print_prefixed(log, resolved, "# ");
    log << "# step\tlr\tL_x\tL_u\tL_xa\tL_ua\ttotal\tn_pseudo_kept\n";
  }

  train::TrainHooks hooks;
  hooks.on_step = [&](const train::LossReport& r) { log << train::format_log_record(r) << '\n'; };
  hooks.on_epoch = [&](const train::EpochSummary& e, const train::CheckpointState& c) {
    log.flush();
    io::write_checkpoint(a.out, c);
    std::printf("epoch %zu\tsteps %zu\tlr %.6g\ttotal %.6f\tL_x %.6f\tL_u %.6f\tL_xa %.6f\tL_ua %.6f\tkept %zu\n",
                e.epoch, e.steps, e.mean.lr, e.mean.total, e.mean.lx, e.mean.lu, e.mean.lxa, e.mean.lua,
                e.mean.n_pseudo_kept);
    std::fflush(stdout);
  };
  if (a.stop_after > 0) hooks.stop_after_epochs = a.stop_after;

  auto result = train::train(*s.pipeline, s.dataset.data, s.config.train, hooks, resume ? &*resume : nullptr);
  io::write_checkpoint(a.out, result.checkpoint);
  std::cout << "wrote " << a.out << " (step " << result.checkpoint.global_step << ", next epoch "
            << result.checkpoint.next_epoch << ")\n";
  return 0;
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string manifest;
  ConfigOptions config;
  std::string checkpoint;
};

void report_accuracy(const std::string& domain, const std::vector<std::uint32_t>& predicted,
                     const std::vector<std::uint32_t>& labels, const io::DatasetManifest& m) {
  std::printf("accuracy\t%s\t%.6f\t%zu\n", domain.c_str(), metrics::accuracy(predicted, labels), labels.size());
  for (std::size_t k = 0; k < m.classes(); ++k) {
    std::size_t n = 0, hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != k) continue;
      ++n;
      hit += predicted[i] == k;
    }
    if (n == 0) continue;
    std::printf("class_accuracy\t%s\t%s\t%.6f\t%zu\n", domain.c_str(), m.class_names[k].c_str(),
                static_cast<double>(hit) / static_cast<double>(n), n);
  }
}

int run_eval(const EvalArgs& a) {
  Session s = open_session(a.manifest, a.config);
  const auto& data = s.dataset.data;
  auto classify = [&](std::span<const Tensor> inputs) {
    if (a.checkpoint.empty()) {
      const auto state = train::ModelState::initial(s.config.encoder, s.config.train);
      const Tensor probs = enc::zero_shot_probs(s.pipeline->text_features(state),
                                                s.pipeline->image_features(state, inputs), s.pipeline->temperature());
      return train::pseudo_label(probs, 0.0).labels;
    }
    const auto ck = io::read_checkpoint(a.checkpoint);
    return train::predict(*s.pipeline, ck.state, ck.banks, inputs, s.config.train.ensemble_weight).classes;
  };
  std::cout << "# mode\t" << (a.checkpoint.empty() ? "zero-shot" : "checkpoint " + a.checkpoint) << '\n';
  report_accuracy("source", classify(data.source), data.source_labels, s.dataset.manifest);
  if (auto labels = eval_labels_if_present(s.dataset.manifest.target)) {
    report_accuracy("target", classify(data.target), *labels, s.dataset.manifest);
  } else {
    std::cout << "# target has no evaluation-only labels; target accuracy not reported\n";
  }
  return 0;
}

// ----------------------------------------------------------------- metrics

struct MetricsArgs {
  std::string a;
  std::string b;
  std::string manifest;
  ConfigOptions config;
  std::string checkpoint;
  std::string features = "base";
};

int run_metrics(const MetricsArgs& a) {
  std::vector<metrics::MetricRecord> records;
  if (!a.a.empty()) {
    auto load = [](const std::string& path) {
      auto set = io::read_embeddings(path);
      metrics::DomainFeatures f{set.matrix, {}, {}};
      if (set.labels) f.labels = *set.labels;
      return f;
    };
    records = metrics::metric_report(load(a.a), load(a.b), a.a, a.b);
  } else {
    Session s = open_session(a.manifest, a.config);
    const auto& data = s.dataset.data;
    train::ModelState state = train::ModelState::initial(s.config.encoder, s.config.train);
    train::Banks banks;
    std::string origin = "zero-shot";
    if (!a.checkpoint.empty()) {
      auto ck = io::read_checkpoint(a.checkpoint);
      state = std::move(ck.state);
      banks = std::move(ck.banks);
      origin = a.checkpoint;
    } else {
      banks = train::build_banks(train::zero_shot(*s.pipeline, state, data), data, s.config.train.shots);
    }
    auto features = [&](std::span<const Tensor> inputs) {
      Tensor z = s.pipeline->image_features(state, inputs);
      if (a.features == "aligned") z = align::ift_forward(z, banks.source, banks.target, state.ift);
      return z;
    };
    const double lambda = s.config.train.ensemble_weight;
    metrics::DomainFeatures src{features(data.source), data.source_labels,
                                train::predict(*s.pipeline, state, banks, data.source, lambda).classes};
    metrics::DomainFeatures tgt{features(data.target), {},
                                train::predict(*s.pipeline, state, banks, data.target, lambda).classes};
    if (auto labels = eval_labels_if_present(s.dataset.manifest.target)) tgt.labels = *labels;
    const std::string tag = origin + ":" + a.features;
    records = metrics::metric_report(src, tgt, tag + ":source", tag + ":target");
  }
  for (const auto& r : records) std::cout << metrics::format_record(r) << '\n';
  return 0;
}

// -------------------------------------------------------------------- bank

struct BankArgs {
  std::string manifest;
  ConfigOptions config;
  std::string out = ".";
};

int run_bank(const BankArgs& a) {
  Session s = open_session(a.manifest, a.config);
  const auto state = train::ModelState::initial(s.config.encoder, s.config.train);
  const auto banks = train::build_banks(train::zero_shot(*s.pipeline, state, s.dataset.data), s.dataset.data,
                                        s.config.train.shots);
  const fs::path dir = a.out;
  fs::create_directories(dir);
  io::write_bank(dir / "source_bank.pdae", banks.source);
  io::write_bank(dir / "target_bank.pdae", banks.target);
  for (const auto* bank : {&banks.source, &banks.target}) {
    for (std::size_t k = 0; k < bank->classes(); ++k) {
      const auto& sup = bank->support[k];
      std::printf("bank\t%s\t%s\t%zu\t%s\n", align::to_string(bank->domain).c_str(),
                  s.dataset.manifest.class_names[k].c_str(), sup.sample_ids.size(),
                  sup.fallback ? "fallback" : "selected");
    }
  }
  return 0;
}

// --------------------------------------------------------------- gradcheck

int run_gradcheck(std::uint64_t seed) {
  const auto r = train::gradcheck_toy(seed);
  std::printf("max_relative_error\t%.3e\ncoordinates\t%zu\ntensors\t%zu\n", r.max_relative_error, r.coordinates,
              r.tensors);
  if (!(r.max_relative_error < 1e-4)) {
    std::fprintf(stderr, "gradient check failed: %.3e >= 1e-4\n", r.max_relative_error);
    return kExitNumerical;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-based domain adaptation toolkit"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a synthetic domain-shift dataset");
  g->add_option("--out", gen.out, "output directory");
  g->add_option("--classes", gen.spec.classes);
  g->add_option("--n-source", gen.spec.n_source, "source samples per class");
  g->add_option("--n-target", gen.spec.n_target, "target samples per class");
  g->add_option("--d-in", gen.spec.d_in, "patch feature width");
  g->add_option("--patches", gen.spec.n_patches);
  g->add_option("--class-sep", gen.spec.class_sep);
  g->add_option("--shift", gen.spec.domain_shift, "domain shift magnitude");
  g->add_option("--noise", gen.spec.noise_std);
  g->add_option("--seed", gen.spec.seed);
  g->add_option("--dtype", gen.dtype)->check(CLI::IsMember({"f32", "f64"}));

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train prompts and the alignment module");
  t->add_option("--manifest", tr.manifest)->required()->check(CLI::ExistingFile);
  tr.config.add_to(t);
  t->add_option("--out", tr.out, "checkpoint path (rewritten after every epoch)");
  t->add_option("--log", tr.log, "per-step tab-separated log");
  t->add_option("--resume", tr.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  t->add_option("--stop-after", tr.stop_after, "stop after this many epochs in total");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "per-domain and per-class accuracy");
  e->add_option("--manifest", ev.manifest)->required()->check(CLI::ExistingFile);
  ev.config.add_to(e);
  e->add_option("--checkpoint", ev.checkpoint, "omit for zero-shot")->check(CLI::ExistingFile);

  MetricsArgs me;
  auto* m = app.add_subcommand("metrics", "feature-space metric report");
  auto* a_opt = m->add_option("--a", me.a, "first embedding file")->check(CLI::ExistingFile);
  auto* b_opt = m->add_option("--b", me.b, "second embedding file")->check(CLI::ExistingFile);
  auto* mf_opt = m->add_option("--manifest", me.manifest)->check(CLI::ExistingFile);
  me.config.add_to(m);
  m->add_option("--checkpoint", me.checkpoint, "omit for zero-shot features")->check(CLI::ExistingFile);
  m->add_option("--features", me.features, "base or aligned")->check(CLI::IsMember({"base", "aligned"}));
  a_opt->needs(b_opt);
  b_opt->needs(a_opt);
  a_opt->excludes(mf_opt);

  BankArgs bk;
  auto* b = app.add_subcommand("bank", "build feature banks from zero-shot confidences");
  b->add_option("--manifest", bk.manifest)->required()->check(CLI::ExistingFile);
  bk.config.add_to(b);
  b->add_option("--out", bk.out, "output directory");

  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
  gc->add_option("--seed", gc_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    if (err.get_exit_code() == 0) return app.exit(err);
    std::cerr << err.what() << "\n\n" << app.help();
    return kExitUsage;
  }
  if (m->parsed() && me.a.empty() && me.manifest.empty()) {
    std::cerr << "metrics needs --a/--b or --manifest\n\n" << m->help();
    return kExitUsage;
  }

  try {
    if (g->parsed()) return run_generate(gen);
    if (t->parsed()) return run_train(tr);
    if (e->parsed()) return run_eval(ev);
    if (m->parsed()) return run_metrics(me);
    if (b->parsed()) return run_bank(bk);
    return run_gradcheck(gc_seed);
  } catch (const Error& err) {
    std::cerr << "pda: " << err.what() << '\n';
    return exit_code(err);
  } catch (const std::exception& err) {
    std::cerr << "pda: " << err.what() << '\n';
    return kExitData;
  }
}
