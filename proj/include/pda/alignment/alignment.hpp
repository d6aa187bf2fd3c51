#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pda/numerics/ops.hpp"

namespace pda::align {

using num::Rng;
using num::Tape;
using num::Tensor;
using num::Var;

enum class Domain : std::uint32_t { source = 0, target = 1 };

std::string to_string(Domain d);

struct BankSupport {
  std::vector<std::size_t> sample_ids;  // selected samples, best first
  std::vector<double> confidences;
  bool fallback = false;  // centroid borrowed from the other domain's bank
};

// K x d per-class centroids built from the top-C most confident samples.
struct FeatureBank {
  Tensor centroids;
  Domain domain = Domain::source;
  std::size_t shots = 0;
  std::vector<BankSupport> support;

  std::size_t classes() const { return centroids.rows(); }
};

// Picks, per class, the C highest-confidence samples (ties: lower sample id
// first), averages their features and L2-normalizes the mean. A class with
// no candidates is an error naming every empty class.
FeatureBank build_feature_bank(const Tensor& features, std::span<const double> confidences,
                               std::span<const std::uint32_t> labels, std::size_t classes, std::size_t shots,
                               Domain domain);

// Like build_feature_bank, but classes without candidates take the row of
// `fallback` and are flagged in support. Returns the fallback class ids in
// `missing`.
FeatureBank build_feature_bank_with_fallback(const Tensor& features, std::span<const double> confidences,
                                             std::span<const std::uint32_t> labels, std::size_t classes,
                                             std::size_t shots, Domain domain, const FeatureBank& fallback,
                                             std::vector<std::uint32_t>& missing);

// Three-layer perceptron d -> d -> d -> d with ReLU between layers.
struct Mlp {
  std::array<Tensor, 3> weight;
  std::array<Tensor, 3> bias;

  static Mlp random(std::size_t width, double stddev, Rng& rng);
  static Mlp identity(std::size_t width);
  std::size_t width() const { return weight[0].rows(); }
};

struct IftParams {
  Mlp pre;
  Mlp post;
  double epsilon = 4.0;  // attention scale
  double beta_source = 0.1;
  double beta_target = 0.1;

  static IftParams initial(std::size_t width, Rng& rng);
  void validate() const;
  std::vector<const Tensor*> tensors() const;
  std::vector<Tensor*> tensors();
};

struct BoundMlp {
  std::array<Var, 3> weight;
  std::array<Var, 3> bias;
};

struct BoundIft {
  BoundMlp pre;
  BoundMlp post;
  double epsilon;
  double beta_source;
  double beta_target;

  std::vector<Var> all() const;
};

BoundMlp bind_mlp(Tape& tape, const Mlp& mlp, bool learnable);
BoundIft bind_ift(Tape& tape, const IftParams& params, bool learnable);

Var apply_mlp(const BoundMlp& mlp, Var x);

struct Projected {
  Var query;
  Var key_source, value_source;
  Var key_target, value_target;
};

// Q = f_pre(z); keys and values of a bank are one shared projection.
Projected project_qkv(Var image_features, Var source_bank, Var target_bank, const BoundMlp& pre);

// f_post(softmax(Q K^T / epsilon) V).
Var attend(Var query, Var keys, Var values, double epsilon, const BoundMlp& post);

// Row-wise (attended + features) / ||attended + features||.
Var add_norm(Var attended, Var features);

struct IftOutput {
  Var fused;          // beta_s * z_vs + beta_t * z_vt
  Var source_branch;  // z_vs
  Var target_branch;  // z_vt
};

// Banks enter as tape constants and never receive gradients.
IftOutput ift_forward(Var image_features, Var source_bank, Var target_bank, const BoundIft& ift);

// Inference helper.
Tensor ift_forward(const Tensor& image_features, const FeatureBank& source, const FeatureBank& target,
                   const IftParams& params);

}  // namespace pda::align
