#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pda/numerics/ops.hpp"

namespace pda::enc {

using num::Rng;
using num::Tape;
using num::Tensor;
using num::Var;

struct EncoderConfig {
  std::size_t d_model = 32;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_proj = 16;
  std::size_t n_patches = 9;
  std::size_t coupled_layers = 2;
  std::size_t context_length = 2;
  std::size_t vocab_size = 5;  // one token row per class id
  std::size_t mlp_width = 64;
  double temperature = 0.01;
  std::uint64_t seed = 0;
  // Value/output projections start at identity (plus noise) so the class
  // token pools the patch tokens instead of ignoring them.
  bool identity_value_path = true;

  void validate() const;
  std::size_t head_dim() const { return d_model / n_heads; }
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  std::vector<Tensor> query, key, value;  // per head, d_model x head_dim
  std::vector<Tensor> out;                // per head, head_dim x d_model
  Tensor ln2_gain, ln2_bias;
  Tensor fc1, fc1_bias, fc2, fc2_bias;
};

struct TowerWeights {
  std::vector<LayerWeights> layers;
  Tensor ln_final_gain, ln_final_bias;
  Tensor projection;  // d_model x d_proj
};

// Never trained. Byte-identical for the lifetime of a run.
struct FrozenWeights {
  TowerWeights text;
  TowerWeights image;
  Tensor token_embedding;  // vocab_size x d_model
  Tensor class_embedding;  // 1 x d_model, image [CLS]
  double temperature = 0.01;

  static FrozenWeights random(const EncoderConfig& config);

  // Overwrite the class-name token table, e.g. with class concept anchors.
  void set_token_embeddings(const Tensor& table);

  // Fixed traversal order used for serialization and equality checks.
  std::vector<const Tensor*> tensors() const;
  std::vector<Tensor*> tensors();
};

struct PromptSet {
  std::vector<Tensor> text_context;  // n_layers tensors of M x d_model
  Tensor coupling;                   // d_model x d_model
  std::vector<Tensor> deep_visual;   // (n_layers - coupled_layers) tensors of M x d_model

  static PromptSet initial(const EncoderConfig& config, Rng& rng);
  std::size_t parameter_count() const;
  std::vector<const Tensor*> tensors() const;
  std::vector<Tensor*> tensors();
};

struct BoundPrompts {
  std::vector<Var> text_context;
  Var coupling;
  std::vector<Var> deep_visual;

  std::vector<Var> all() const;
};

BoundPrompts bind_prompts(Tape& tape, const PromptSet& prompts, bool learnable);

// Layer-j visual prompt: v_j * F for j < coupled_layers, independent deep
// prompts afterwards. Length n_layers.
std::vector<Var> couple_visual_prompts(const BoundPrompts& prompts, std::size_t coupled_layers);

class DualEncoder {
 public:
  DualEncoder(EncoderConfig config, FrozenWeights weights);
  explicit DualEncoder(const EncoderConfig& config) : DualEncoder(config, FrozenWeights::random(config)) {}

  const EncoderConfig& config() const noexcept { return config_; }
  const FrozenWeights& weights() const noexcept { return weights_; }

 private:
  EncoderConfig config_;
  FrozenWeights weights_;
};

// Frozen weights and a prompt set bound onto one tape. Frozen tensors are
// tape constants; prompts are parameters when `learnable_prompts` is set.
class EncoderGraph {
 public:
  EncoderGraph(Tape& tape, const DualEncoder& encoder, const PromptSet& prompts, bool learnable_prompts);

  // K x d_proj unit rows.
  Var encode_text(std::span<const std::uint32_t> class_ids);
  // 1 x d_proj unit row from n_patches x d_model patch features.
  Var encode_image(const Tensor& patches);
  Var encode_images(std::span<const Tensor> batch);

  const BoundPrompts& prompts() const noexcept { return prompts_; }
  Tape& tape() noexcept { return tape_; }

  struct BoundLayer {
    Var ln1_gain, ln1_bias;
    std::vector<Var> query, key, value, out;
    Var ln2_gain, ln2_bias, fc1, fc1_bias, fc2, fc2_bias;
  };
  struct BoundTower {
    std::vector<BoundLayer> layers;
    Var ln_final_gain, ln_final_bias, projection;
  };

 private:
  Tape& tape_;
  const DualEncoder& encoder_;
  BoundPrompts prompts_;
  std::vector<Var> visual_prompts_;
  BoundTower text_;
  BoundTower image_;
  Var token_embedding_;
  Var class_embedding_;
};

// One pre-LN transformer block over a token sequence.
Var transformer_block(const EncoderGraph::BoundLayer& layer, Var x, std::size_t n_heads);

// Softmax over cosine similarities: B x K probabilities from B image rows
// and K text rows.
Var class_probabilities(Var text, Var images, double temperature);

// Value-level zero-shot probabilities. Inputs must already be unit rows
// (within 1e-6); returns B x K.
Tensor zero_shot_probs(const Tensor& text, const Tensor& images, double temperature);

// Convenience inference (no gradients).
Tensor encode_text(const DualEncoder& encoder, const PromptSet& prompts, std::span<const std::uint32_t> class_ids);
Tensor encode_images(const DualEncoder& encoder, const PromptSet& prompts, std::span<const Tensor> batch);

std::vector<std::uint32_t> all_class_ids(std::size_t k);

}  // namespace pda::enc
