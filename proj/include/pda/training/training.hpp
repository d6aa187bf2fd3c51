#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pda/alignment/alignment.hpp"
#include "pda/encoder/encoder.hpp"

namespace pda::train {

using num::Tape;
using num::Tensor;
using num::Var;

// Bit flags selecting which terms of the total objective are active.
enum LossTerm : unsigned {
  kSupervised = 1u,         // L_x
  kPseudo = 2u,             // L_u
  kAlignSupervised = 4u,    // L_xa
  kAlignPseudo = 8u,        // L_ua
  kAllLosses = 15u,
};

struct TrainConfig {
  double tau = 0.8;
  double gamma = 1.0;
  double beta_source = 0.1;
  double beta_target = 0.1;
  double temperature = 0.01;
  double lr0 = 0.003;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::size_t shots = 5;
  std::size_t context_length = 2;
  // 0 keeps zero-shot pseudo labels for the whole run; otherwise the current
  // model labels the target from this epoch on.
  std::size_t warmup_epochs = 0;
  double ensemble_weight = 0.5;
  std::uint64_t seed = 0;
  unsigned losses = kAllLosses;
  // Rebuild banks from the current model every N epochs; 0 = never.
  std::size_t bank_refresh_epochs = 0;

  void validate() const;
};

struct LossReport {
  double lx = 0.0;
  double lu = 0.0;
  double lxa = 0.0;
  double lua = 0.0;
  double total = 0.0;
  std::size_t n_pseudo_kept = 0;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
};

// One tab-separated log record: step, lr, L_x, L_u, L_xa, L_ua, total, n_pseudo_kept.
std::string format_log_record(const LossReport& r);
LossReport parse_log_record(const std::string& line);

// Learnable state: prompts plus the IFT module.
struct ModelState {
  enc::PromptSet prompts;
  align::IftParams ift;

  static ModelState initial(const enc::EncoderConfig& encoder, const TrainConfig& config);
  std::vector<const Tensor*> tensors() const;
  std::vector<Tensor*> tensors();
};

enum class FeatureKind : std::uint32_t { raw_patches = 0, embeddings = 1 };

// In-memory UDA problem. Target labels never live here.
struct UdaData {
  std::size_t classes = 0;
  FeatureKind kind = FeatureKind::raw_patches;
  std::vector<Tensor> source;
  std::vector<std::uint32_t> source_labels;
  std::vector<Tensor> target;

  void validate(const enc::EncoderConfig& encoder) const;
};

struct Banks {
  align::FeatureBank source;
  align::FeatureBank target;
  std::vector<std::uint32_t> target_fallback;  // classes borrowed from source
};

// Frozen encoder plus everything needed to run the model on images.
class Pipeline {
 public:
  Pipeline(const enc::DualEncoder& encoder, FeatureKind kind, std::size_t classes);

  const enc::DualEncoder& encoder() const noexcept { return encoder_; }
  FeatureKind kind() const noexcept { return kind_; }
  std::size_t classes() const noexcept { return classes_; }
  double temperature() const noexcept { return encoder_.config().temperature; }

  Tensor text_features(const ModelState& state) const;
  Tensor image_features(const ModelState& state, std::span<const Tensor> inputs) const;

 private:
  const enc::DualEncoder& encoder_;
  FeatureKind kind_;
  std::size_t classes_;
};

// Graph for one step: encoder, IFT and banks bound to a tape.
class StepGraph {
 public:
  StepGraph(Tape& tape, const Pipeline& pipeline, const ModelState& state, const Banks& banks, bool learnable);

  Var text() const noexcept { return text_; }
  Var image_features(std::span<const Tensor> inputs);
  align::IftOutput augment(Var image_features);
  std::vector<Var> parameters() const;
  Tape& tape() noexcept { return tape_; }
  double temperature() const noexcept { return pipeline_.temperature(); }

 private:
  Tape& tape_;
  const Pipeline& pipeline_;
  enc::EncoderGraph encoder_;
  align::BoundIft ift_;
  Var text_;
  Var source_bank_;
  Var target_bank_;
};

struct PseudoLabels {
  std::vector<std::uint32_t> labels;
  std::vector<bool> keep;

  std::size_t kept() const;
};

// Arg-max labels; keep when the row maximum is at least tau.
PseudoLabels pseudo_label(const Tensor& probs, double tau);

// Mean over kept rows of -log softmax(cos(W, z)/t)[label]; exact 0 when
// nothing is kept.
Var contrastive_loss(Var text, Var images, std::span<const std::uint32_t> labels, const std::vector<bool>& keep,
                     double temperature);

struct LossTerms {
  Var total;
  LossReport report;
};

// L = L_x + L_u + gamma (L_xa + L_ua). `target_probs`, when given, supplies
// the probabilities pseudo labels are drawn from; otherwise the current
// base branch labels the target batch.
LossTerms total_loss(StepGraph& graph, std::span<const Tensor> source, std::span<const std::uint32_t> source_labels,
                     std::span<const Tensor> target, const Tensor* target_probs, const TrainConfig& config);

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

// Zero-shot pass with the initial prompt set: features, probabilities and
// the text features used to produce them.
struct ZeroShot {
  Tensor text;
  Tensor source_features;
  Tensor source_probs;
  Tensor target_features;
  Tensor target_probs;
};

ZeroShot zero_shot(const Pipeline& pipeline, const ModelState& state, const UdaData& data);

// Source bank from ground-truth classes ranked by zero-shot confidence;
// target bank from zero-shot pseudo labels, falling back to the source
// centroid for classes nobody was assigned to.
Banks build_banks(const ZeroShot& zs, const UdaData& data, std::size_t shots);

struct CheckpointState {
  ModelState state;
  Banks banks;
  std::uint64_t global_step = 0;
  std::uint64_t next_epoch = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
};

struct EpochSummary {
  std::size_t epoch = 0;
  LossReport mean;
  std::size_t steps = 0;
};

struct TrainResult {
  CheckpointState checkpoint;
  std::vector<LossReport> steps;
  std::vector<EpochSummary> epochs;
};

struct TrainHooks {
  std::function<void(const LossReport&)> on_step;
  std::function<void(const EpochSummary&, const CheckpointState&)> on_epoch;
  // Stop after finishing this many epochs (for interrupted runs).
  std::optional<std::size_t> stop_after_epochs;
};

// Canonical "key = value" lines (full precision) for every field.
std::string describe(const TrainConfig& config);
std::string describe(const enc::EncoderConfig& config);
std::uint64_t config_hash(const enc::EncoderConfig& encoder, const TrainConfig& config);

// Runs (or resumes, when `resume` is given) plain-SGD training.
TrainResult train(const Pipeline& pipeline, const UdaData& data, const TrainConfig& config,
                  const TrainHooks& hooks = {}, const CheckpointState* resume = nullptr);

struct Prediction {
  std::vector<std::uint32_t> classes;
  Tensor probs;  // B x K
};

// lambda * base-branch probs + (1 - lambda) * alignment-branch probs.
Prediction predict(const Pipeline& pipeline, const ModelState& state, const Banks& banks,
                   std::span<const Tensor> inputs, double lambda);

struct ToyGradCheck {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t tensors = 0;
};

// Full-objective gradient check on a 2-class instance with two source and
// two target samples, covering every learnable tensor. Biases are drawn at
// random so no ReLU input sits on its kink.
ToyGradCheck gradcheck_toy(std::uint64_t seed = 0);

}  // namespace pda::train
