#include "pda/training/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <sstream>

#include "pda/errors.hpp"

namespace pda::train {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Shuffle order for one domain in one epoch; depends only on (seed, epoch,
// stream) so a resumed run sees the same batches.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::uint64_t stream, std::size_t n) {
  num::Rng rng(splitmix64(seed ^ splitmix64(epoch * 2 + stream + 1)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fisher-Yates with an explicit draw so the order is library-independent.
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  Tensor out(idx.size(), t.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto src = t.row(idx[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<double> row_max(const Tensor& probs) {
  std::vector<double> m(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) m[i] = *std::max_element(probs.row(i).begin(), probs.row(i).end());
  return m;
}

std::vector<std::uint32_t> row_argmax(const Tensor& probs) {
  std::vector<std::uint32_t> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto r = probs.row(i);
    out[i] = static_cast<std::uint32_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(tau >= 0.0 && tau <= 1.01)) throw ParameterError("tau must lie in [0, 1] (1.01 disables pseudo labels)");
  if (!(gamma >= 0.0)) throw ParameterError("gamma must be non-negative");
  if (!(ensemble_weight >= 0.0 && ensemble_weight <= 1.0)) throw ParameterError("ensemble_weight must lie in [0, 1]");
  if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw ParameterError("lr0 must be a finite non-negative number");
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  if (shots == 0) throw ParameterError("shots must be positive");
  if (context_length == 0) throw ParameterError("context_length must be positive");
  if ((losses & ~static_cast<unsigned>(kAllLosses)) != 0) throw ParameterError("unknown loss term flag");
}

std::string format_log_record(const LossReport& r) {
  std::ostringstream os;
  os << r.step << '\t' << fmt(r.lr) << '\t' << fmt(r.lx) << '\t' << fmt(r.lu) << '\t' << fmt(r.lxa) << '\t'
     << fmt(r.lua) << '\t' << fmt(r.total) << '\t' << r.n_pseudo_kept;
  return os.str();
}

LossReport parse_log_record(const std::string& line) {
  std::istringstream is(line);
  LossReport r;
  if (!(is >> r.step >> r.lr >> r.lx >> r.lu >> r.lxa >> r.lua >> r.total >> r.n_pseudo_kept)) {
    throw DataError("malformed training log record: " + line);
  }
  return r;
}

ModelState ModelState::initial(const enc::EncoderConfig& encoder, const TrainConfig& config) {
  num::Rng rng(splitmix64(config.seed));
  ModelState s;
  s.prompts = enc::PromptSet::initial(encoder, rng);
  s.ift = align::IftParams::initial(encoder.d_proj, rng);
  s.ift.beta_source = config.beta_source;
  s.ift.beta_target = config.beta_target;
  return s;
}

std::vector<const Tensor*> ModelState::tensors() const {
  auto out = prompts.tensors();
  for (const auto* t : ift.tensors()) out.push_back(t);
  return out;
}

std::vector<Tensor*> ModelState::tensors() {
  auto out = prompts.tensors();
  for (auto* t : ift.tensors()) out.push_back(t);
  return out;
}

void UdaData::validate(const enc::EncoderConfig& encoder) const {
  if (classes < 2) throw DataError("need at least two classes");
  if (classes > encoder.vocab_size) {
    throw DataError(std::to_string(classes) + " classes but the token table has " + std::to_string(encoder.vocab_size));
  }
  if (source.size() != source_labels.size()) throw DataError("source inputs and labels differ in length");
  const std::size_t rows = kind == FeatureKind::raw_patches ? encoder.n_patches : 1;
  const std::size_t cols = kind == FeatureKind::raw_patches ? encoder.d_model : encoder.d_proj;
  for (const auto* set : {&source, &target}) {
    for (const auto& x : *set) {
      if (x.rows() != rows || x.cols() != cols) {
        throw DataError("input " + x.shape_string() + " does not match expected " + std::to_string(rows) + "x" +
                        std::to_string(cols));
      }
    }
  }
  std::vector<std::size_t> count(classes, 0);
  for (auto y : source_labels) {
    if (y >= classes) throw DataError("source label " + std::to_string(y) + " out of range");
    ++count[y];
  }
  for (std::size_t k = 0; k < classes; ++k) {
    if (count[k] == 0) throw DataError("class " + std::to_string(k) + " has no source samples");
  }
}

Pipeline::Pipeline(const enc::DualEncoder& encoder, FeatureKind kind, std::size_t classes)
    : encoder_(encoder), kind_(kind), classes_(classes) {
  if (classes < 1 || classes > encoder.config().vocab_size) {
    throw ParameterError("class count " + std::to_string(classes) + " does not fit the token table");
  }
}

Tensor Pipeline::text_features(const ModelState& state) const {
  return enc::encode_text(encoder_, state.prompts, enc::all_class_ids(classes_));
}

Tensor Pipeline::image_features(const ModelState& state, std::span<const Tensor> inputs) const {
  if (kind_ == FeatureKind::raw_patches) return enc::encode_images(encoder_, state.prompts, inputs);
  Tensor out(inputs.size(), encoder_.config().d_proj);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const double n = num::row_norm(inputs[i].data());
    if (!(n >= 1e-12)) throw DegenerateInputError("embedding " + std::to_string(i) + " is the zero vector");
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = inputs[i].data()[j] / n;
  }
  return out;
}

StepGraph::StepGraph(Tape& tape, const Pipeline& pipeline, const ModelState& state, const Banks& banks,
                     bool learnable)
    : tape_(tape),
      pipeline_(pipeline),
      encoder_(tape, pipeline.encoder(), state.prompts, learnable),
      ift_(align::bind_ift(tape, state.ift, learnable)) {
  text_ = encoder_.encode_text(enc::all_class_ids(pipeline.classes()));
  source_bank_ = tape.constant(banks.source.centroids);
  target_bank_ = tape.constant(banks.target.centroids);
}

Var StepGraph::image_features(std::span<const Tensor> inputs) {
  if (pipeline_.kind() == FeatureKind::raw_patches) return encoder_.encode_images(inputs);
  std::vector<Var> rows;
  for (const auto& x : inputs) rows.push_back(tape_.constant(x));
  return num::l2_normalize_rows(num::concat_rows(rows));
}

align::IftOutput StepGraph::augment(Var image_features) {
  return align::ift_forward(image_features, source_bank_, target_bank_, ift_);
}

std::vector<Var> StepGraph::parameters() const {
  auto out = encoder_.prompts().all();
  for (const Var& v : ift_.all()) out.push_back(v);
  return out;
}

std::size_t PseudoLabels::kept() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true)); }

PseudoLabels pseudo_label(const Tensor& probs, double tau) {
  PseudoLabels out;
  out.labels.resize(probs.rows());
  out.keep.resize(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto r = probs.row(i);
    double s = 0.0;
    for (double p : r) {
      if (!(p >= 0.0)) throw ContractError("probability row " + std::to_string(i) + " has a negative or NaN entry");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-6) {
      throw ContractError("probability row " + std::to_string(i) + " sums to " + fmt(s));
    }
    auto best = std::max_element(r.begin(), r.end());
    out.labels[i] = static_cast<std::uint32_t>(best - r.begin());
    out.keep[i] = *best >= tau;
  }
  return out;
}

Var contrastive_loss(Var text, Var images, std::span<const std::uint32_t> labels, const std::vector<bool>& keep,
                     double temperature) {
  return num::cross_entropy(enc::class_probabilities(text, images, temperature), labels, keep);
}

LossTerms total_loss(StepGraph& graph, std::span<const Tensor> source, std::span<const std::uint32_t> source_labels,
                     std::span<const Tensor> target, const Tensor* target_probs, const TrainConfig& config) {
  Tape& tape = graph.tape();
  const double t = graph.temperature();
  const Var zero = tape.constant(Tensor::scalar(0.0));
  const Var text = graph.text();
  Var lx = zero, lu = zero, lxa = zero, lua = zero;
  LossReport report;

  if (source.size() != source_labels.size()) throw DataError("source batch and labels differ in length");
  if (!source.empty()) {
    Var zs = graph.image_features(source);
    const std::vector<bool> all(source.size(), true);
    if (config.losses & kSupervised) lx = contrastive_loss(text, zs, source_labels, all, t);
    if (config.losses & kAlignSupervised) lxa = contrastive_loss(text, graph.augment(zs).fused, source_labels, all, t);
  }
  if (!target.empty()) {
    Var zt = graph.image_features(target);
    const Tensor probs = target_probs ? *target_probs : enc::class_probabilities(text, zt, t).value();
    if (probs.rows() != target.size()) throw DimensionError("pseudo-label probabilities do not match the target batch");
    PseudoLabels pl = pseudo_label(probs, config.tau);
    report.n_pseudo_kept = pl.kept();
    if (config.losses & kPseudo) lu = contrastive_loss(text, zt, pl.labels, pl.keep, t);
    if ((config.losses & kAlignPseudo) && pl.kept() > 0) {
      lua = contrastive_loss(text, graph.augment(zt).fused, pl.labels, pl.keep, t);
    }
  }

  Var total = num::add(num::add(lx, lu), num::scale(num::add(lxa, lua), config.gamma));
  report.lx = lx.value().item();
  report.lu = lu.value().item();
  report.lxa = lxa.value().item();
  report.lua = lua.value().item();
  report.total = total.value().item();
  return LossTerms{total, report};
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) return lr0;
  if (step > total_steps) throw ParameterError("step beyond the schedule");
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

ZeroShot zero_shot(const Pipeline& pipeline, const ModelState& state, const UdaData& data) {
  ZeroShot zs;
  zs.text = pipeline.text_features(state);
  const double t = pipeline.temperature();
  zs.source_features = pipeline.image_features(state, data.source);
  zs.source_probs = enc::zero_shot_probs(zs.text, zs.source_features, t);
  if (!data.target.empty()) {
    zs.target_features = pipeline.image_features(state, data.target);
    zs.target_probs = enc::zero_shot_probs(zs.text, zs.target_features, t);
  }
  return zs;
}

Banks build_banks(const ZeroShot& zs, const UdaData& data, std::size_t shots) {
  Banks b;
  b.source = align::build_feature_bank(zs.source_features, row_max(zs.source_probs), data.source_labels, data.classes,
                                       shots, align::Domain::source);
  if (zs.target_features.empty()) {
    b.target = b.source;
    b.target.domain = align::Domain::target;
    for (auto& s : b.target.support) s = align::BankSupport{{}, {}, true};
    b.target_fallback = enc::all_class_ids(data.classes);
    return b;
  }
  b.target = align::build_feature_bank_with_fallback(zs.target_features, row_max(zs.target_probs),
                                                     row_argmax(zs.target_probs), data.classes, shots,
                                                     align::Domain::target, b.source, b.target_fallback);
  return b;
}

std::string describe(const TrainConfig& c) {
  std::ostringstream os;
  os << "tau = " << fmt(c.tau) << "\n"
     << "gamma = " << fmt(c.gamma) << "\n"
     << "beta_source = " << fmt(c.beta_source) << "\n"
     << "beta_target = " << fmt(c.beta_target) << "\n"
     << "temperature = " << fmt(c.temperature) << "\n"
     << "lr0 = " << fmt(c.lr0) << "\n"
     << "epochs = " << c.epochs << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "shots = " << c.shots << "\n"
     << "context_length = " << c.context_length << "\n"
     << "warmup_epochs = " << c.warmup_epochs << "\n"
     << "ensemble_weight = " << fmt(c.ensemble_weight) << "\n"
     << "seed = " << c.seed << "\n"
     << "losses = " << c.losses << "\n"
     << "bank_refresh_epochs = " << c.bank_refresh_epochs << "\n";
  return os.str();
}

std::string describe(const enc::EncoderConfig& c) {
  std::ostringstream os;
  os << "d_model = " << c.d_model << "\n"
     << "n_layers = " << c.n_layers << "\n"
     << "n_heads = " << c.n_heads << "\n"
     << "d_proj = " << c.d_proj << "\n"
     << "n_patches = " << c.n_patches << "\n"
     << "coupled_layers = " << c.coupled_layers << "\n"
     << "vocab_size = " << c.vocab_size << "\n"
     << "mlp_width = " << c.mlp_width << "\n"
     << "encoder_seed = " << c.seed << "\n"
     << "identity_value_path = " << (c.identity_value_path ? 1 : 0) << "\n";
  return os.str();
}

std::uint64_t config_hash(const enc::EncoderConfig& encoder, const TrainConfig& config) {
  // FNV-1a over the canonical text.
  const std::string text = describe(encoder) + describe(config);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

TrainResult train(const Pipeline& pipeline, const UdaData& data, const TrainConfig& config, const TrainHooks& hooks,
                  const CheckpointState* resume) {
  config.validate();
  const auto& ec = pipeline.encoder().config();
  if (ec.context_length != config.context_length) {
    throw ParameterError("encoder context length " + std::to_string(ec.context_length) + " differs from config " +
                         std::to_string(config.context_length));
  }
  if (ec.temperature != config.temperature) throw ParameterError("encoder temperature differs from config");
  data.validate(ec);
  if (data.classes != pipeline.classes()) throw DataError("dataset class count does not match pipeline");

  const std::uint64_t hash = config_hash(ec, config);
  TrainResult result;
  CheckpointState& ck = result.checkpoint;
  std::optional<ZeroShot> zs;

  if (resume) {
    if (resume->config_hash != hash) throw DataError("checkpoint was written under a different configuration");
    ck = *resume;
  } else {
    ck.state = ModelState::initial(ec, config);
    ck.seed = config.seed;
    ck.config_hash = hash;
    zs = zero_shot(pipeline, ck.state, data);
    ck.banks = build_banks(*zs, data, config.shots);
  }

  const std::size_t ns = data.source.size();
  const std::size_t nt = data.target.size();
  const std::size_t bs = std::min(config.batch_size, ns);
  const std::size_t bt = std::min(config.batch_size, nt);
  const std::size_t steps_per_epoch = (std::max(ns, nt) + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  // Zero-shot target probabilities are needed for pseudo labels unless the
  // whole remaining run labels with the current model.
  const bool needs_zero_shot_labels = config.warmup_epochs == 0 || ck.next_epoch < config.warmup_epochs;
  if (needs_zero_shot_labels && nt > 0 && !zs) {
    ModelState initial = ModelState::initial(ec, config);
    zs = zero_shot(pipeline, initial, data);
  }

  std::size_t end_epoch = config.epochs;
  if (hooks.stop_after_epochs) end_epoch = std::min(end_epoch, *hooks.stop_after_epochs);

  for (std::size_t epoch = ck.next_epoch; epoch < end_epoch; ++epoch) {
    if (config.bank_refresh_epochs > 0 && epoch > 0 && epoch % config.bank_refresh_epochs == 0) {
      ck.banks = build_banks(zero_shot(pipeline, ck.state, data), data, config.shots);
    }
    const auto src_order = epoch_order(config.seed, epoch, 0, ns);
    const auto tgt_order = epoch_order(config.seed, epoch, 1, nt);
    const bool zero_shot_labels = config.warmup_epochs == 0 || epoch < config.warmup_epochs;

    EpochSummary summary;
    summary.epoch = epoch;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<std::size_t> si, ti;
      for (std::size_t r = 0; r < bs; ++r) si.push_back(src_order[(s * config.batch_size + r) % ns]);
      for (std::size_t r = 0; r < bt; ++r) ti.push_back(tgt_order[(s * config.batch_size + r) % nt]);
      const auto xs = gather(data.source, si);
      const auto ys = gather(data.source_labels, si);
      const auto xt = gather(data.target, ti);
      std::optional<Tensor> override_probs;
      if (zero_shot_labels && nt > 0) override_probs = gather_rows(zs->target_probs, ti);

      const double lr = cosine_lr(ck.global_step, total_steps, config.lr0);
      Tape tape;
      StepGraph graph(tape, pipeline, ck.state, ck.banks, true);
      LossTerms terms = total_loss(graph, xs, ys, xt, override_probs ? &*override_probs : nullptr, config);
      terms.report.epoch = epoch;
      terms.report.step = ck.global_step;
      terms.report.lr = lr;
      if (!std::isfinite(terms.report.total)) {
        throw NumericalError("non-finite loss: " + format_log_record(terms.report));
      }
      auto grads = tape.backward(terms.total);
      auto params = graph.parameters();
      auto targets = ck.state.tensors();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& g = grads.at(params[i].id);
        Tensor& p = *targets[i];
        for (std::size_t j = 0; j < p.size(); ++j) p.data()[j] -= lr * g.data()[j];
      }
      ++ck.global_step;
      result.steps.push_back(terms.report);
      if (hooks.on_step) hooks.on_step(terms.report);

      auto& m = summary.mean;
      m.lx += terms.report.lx;
      m.lu += terms.report.lu;
      m.lxa += terms.report.lxa;
      m.lua += terms.report.lua;
      m.total += terms.report.total;
      m.n_pseudo_kept += terms.report.n_pseudo_kept;
      ++summary.steps;
    }
    if (summary.steps > 0) {
      const double n = static_cast<double>(summary.steps);
      summary.mean.lx /= n;
      summary.mean.lu /= n;
      summary.mean.lxa /= n;
      summary.mean.lua /= n;
      summary.mean.total /= n;
      summary.mean.epoch = epoch;
    }
    ck.next_epoch = epoch + 1;
    result.epochs.push_back(summary);
    if (hooks.on_epoch) hooks.on_epoch(summary, ck);
  }
  return result;
}

Prediction predict(const Pipeline& pipeline, const ModelState& state, const Banks& banks,
                   std::span<const Tensor> inputs, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("ensemble weight must lie in [0, 1]");
  const Tensor text = pipeline.text_features(state);
  const Tensor z = pipeline.image_features(state, inputs);
  const double t = pipeline.temperature();
  Tape tape;
  Var tv = tape.constant(text);
  Var zv = tape.constant(z);
  Prediction out;
  Tensor base = enc::class_probabilities(tv, zv, t).value();
  if (lambda < 1.0) {
    const Tensor h = align::ift_forward(z, banks.source, banks.target, state.ift);
    Tensor aligned = enc::class_probabilities(tv, tape.constant(h), t).value();
    base *= lambda;
    aligned *= 1.0 - lambda;
    base += aligned;
    out.probs = base;
  } else {
    out.probs = base;
  }
  out.classes = row_argmax(out.probs);
  return out;
}

}  // namespace pda::train
