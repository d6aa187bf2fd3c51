#include "pda/alignment/alignment.hpp"

#include <algorithm>
#include <cmath>

#include "pda/errors.hpp"

namespace pda::align {
namespace {

constexpr double kInitStd = 0.02;

struct Candidate {
  double confidence;
  std::size_t id;
};

// Per class: candidates ordered best first, ties by ascending sample id.
std::vector<std::vector<Candidate>> rank_candidates(const Tensor& features, std::span<const double> confidences,
                                                    std::span<const std::uint32_t> labels, std::size_t classes) {
  if (confidences.size() != features.rows() || labels.size() != features.rows()) {
    throw DimensionError("bank inputs disagree: " + std::to_string(features.rows()) + " features, " +
                         std::to_string(confidences.size()) + " confidences, " + std::to_string(labels.size()) +
                         " labels");
  }
  std::vector<std::vector<Candidate>> per_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) + " outside " +
                      std::to_string(classes) + " classes");
    }
    per_class[labels[i]].push_back({confidences[i], i});
  }
  for (auto& c : per_class) {
    std::sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
      return a.confidence != b.confidence ? a.confidence > b.confidence : a.id < b.id;
    });
  }
  return per_class;
}

void fill_centroid(FeatureBank& bank, std::size_t k, const Tensor& features, const std::vector<Candidate>& ranked,
                   std::size_t shots) {
  const std::size_t take = std::min(shots, ranked.size());
  auto row = bank.centroids.row(k);
  std::fill(row.begin(), row.end(), 0.0);
  BankSupport& sup = bank.support[k];
  for (std::size_t s = 0; s < take; ++s) {
    sup.sample_ids.push_back(ranked[s].id);
    sup.confidences.push_back(ranked[s].confidence);
    auto f = features.row(ranked[s].id);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += f[j];
  }
  for (auto& v : row) v /= static_cast<double>(take);
  const double n = num::row_norm(row);
  if (!(n >= 1e-12)) throw DegenerateInputError("centroid of class " + std::to_string(k) + " is the zero vector");
  for (auto& v : row) v /= n;
}

FeatureBank empty_bank(const Tensor& features, std::size_t classes, std::size_t shots, Domain domain) {
  if (classes == 0) throw ParameterError("feature bank needs at least one class");
  if (shots == 0) throw ParameterError("feature bank needs at least one shot per class");
  FeatureBank bank;
  bank.centroids = Tensor(classes, features.cols());
  bank.domain = domain;
  bank.shots = shots;
  bank.support.resize(classes);
  return bank;
}

void check_mlp(const Mlp& m, const char* name) {
  const std::size_t w = m.width();
  for (std::size_t l = 0; l < 3; ++l) {
    if (m.weight[l].rows() != w || m.weight[l].cols() != w || m.bias[l].rows() != 1 || m.bias[l].cols() != w) {
      throw DimensionError(std::string(name) + " layer " + std::to_string(l) + " is not " + std::to_string(w) + "x" +
                           std::to_string(w));
    }
  }
}

}  // namespace

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

FeatureBank build_feature_bank(const Tensor& features, std::span<const double> confidences,
                               std::span<const std::uint32_t> labels, std::size_t classes, std::size_t shots,
                               Domain domain) {
  FeatureBank bank = empty_bank(features, classes, shots, domain);
  auto ranked = rank_candidates(features, confidences, labels, classes);
  std::string empty;
  for (std::size_t k = 0; k < classes; ++k) {
    if (ranked[k].empty()) empty += (empty.empty() ? "" : ", ") + std::to_string(k);
  }
  if (!empty.empty()) throw DataError("cannot build " + to_string(domain) + " bank, no samples for classes " + empty);
  for (std::size_t k = 0; k < classes; ++k) fill_centroid(bank, k, features, ranked[k], shots);
  return bank;
}

FeatureBank build_feature_bank_with_fallback(const Tensor& features, std::span<const double> confidences,
                                             std::span<const std::uint32_t> labels, std::size_t classes,
                                             std::size_t shots, Domain domain, const FeatureBank& fallback,
                                             std::vector<std::uint32_t>& missing) {
  if (fallback.classes() != classes || fallback.centroids.cols() != features.cols()) {
    throw DimensionError("fallback bank " + fallback.centroids.shape_string() + " does not fit " +
                         std::to_string(classes) + " classes");
  }
  FeatureBank bank = empty_bank(features, classes, shots, domain);
  auto ranked = rank_candidates(features, confidences, labels, classes);
  missing.clear();
  for (std::size_t k = 0; k < classes; ++k) {
    if (ranked[k].empty()) {
      missing.push_back(static_cast<std::uint32_t>(k));
      auto src = fallback.centroids.row(k);
      std::copy(src.begin(), src.end(), bank.centroids.row(k).begin());
      bank.support[k].fallback = true;
    } else {
      fill_centroid(bank, k, features, ranked[k], shots);
    }
  }
  return bank;
}

Mlp Mlp::random(std::size_t width, double stddev, Rng& rng) {
  Mlp m;
  for (std::size_t l = 0; l < 3; ++l) {
    m.weight[l] = Tensor::gaussian(width, width, stddev, rng);
    m.bias[l] = Tensor(1, width, 0.0);
  }
  return m;
}

Mlp Mlp::identity(std::size_t width) {
  Mlp m;
  for (std::size_t l = 0; l < 3; ++l) {
    m.weight[l] = Tensor::identity(width);
    m.bias[l] = Tensor(1, width, 0.0);
  }
  return m;
}

IftParams IftParams::initial(std::size_t width, Rng& rng) {
  IftParams p;
  p.pre = Mlp::random(width, kInitStd, rng);
  p.post = Mlp::random(width, kInitStd, rng);
  p.epsilon = std::sqrt(static_cast<double>(width));
  return p;
}

void IftParams::validate() const {
  check_mlp(pre, "f_pre");
  check_mlp(post, "f_post");
  if (pre.width() != post.width()) throw DimensionError("f_pre and f_post widths differ");
  if (!(epsilon > 0.0)) throw ParameterError("attention scale epsilon must be positive");
}

std::vector<const Tensor*> IftParams::tensors() const {
  std::vector<const Tensor*> out;
  for (const Mlp* m : {&pre, &post}) {
    for (std::size_t l = 0; l < 3; ++l) {
      out.push_back(&m->weight[l]);
      out.push_back(&m->bias[l]);
    }
  }
  return out;
}

std::vector<Tensor*> IftParams::tensors() {
  std::vector<Tensor*> out;
  for (Mlp* m : {&pre, &post}) {
    for (std::size_t l = 0; l < 3; ++l) {
      out.push_back(&m->weight[l]);
      out.push_back(&m->bias[l]);
    }
  }
  return out;
}

std::vector<Var> BoundIft::all() const {
  std::vector<Var> out;
  for (const BoundMlp* m : {&pre, &post}) {
    for (std::size_t l = 0; l < 3; ++l) {
      out.push_back(m->weight[l]);
      out.push_back(m->bias[l]);
    }
  }
  return out;
}

BoundMlp bind_mlp(Tape& tape, const Mlp& mlp, bool learnable) {
  BoundMlp b;
  for (std::size_t l = 0; l < 3; ++l) {
    b.weight[l] = learnable ? tape.parameter(mlp.weight[l]) : tape.constant(mlp.weight[l]);
    b.bias[l] = learnable ? tape.parameter(mlp.bias[l]) : tape.constant(mlp.bias[l]);
  }
  return b;
}

BoundIft bind_ift(Tape& tape, const IftParams& params, bool learnable) {
  params.validate();
  return BoundIft{bind_mlp(tape, params.pre, learnable), bind_mlp(tape, params.post, learnable), params.epsilon,
                  params.beta_source, params.beta_target};
}

Var apply_mlp(const BoundMlp& mlp, Var x) {
  if (x.cols() != mlp.weight[0].rows()) {
    throw DimensionError("perceptron of width " + std::to_string(mlp.weight[0].rows()) + " applied to " +
                         x.value().shape_string());
  }
  for (std::size_t l = 0; l < 3; ++l) {
    x = num::add_row(num::matmul(x, mlp.weight[l]), mlp.bias[l]);
    if (l < 2) x = num::relu(x);
  }
  return x;
}

Projected project_qkv(Var image_features, Var source_bank, Var target_bank, const BoundMlp& pre) {
  if (source_bank.cols() != image_features.cols() || target_bank.cols() != image_features.cols()) {
    throw DimensionError("image features " + image_features.value().shape_string() + " vs banks " +
                         source_bank.value().shape_string() + " and " + target_bank.value().shape_string());
  }
  Var q = apply_mlp(pre, image_features);
  Var ks = apply_mlp(pre, source_bank);
  Var kt = apply_mlp(pre, target_bank);
  return Projected{q, ks, ks, kt, kt};
}

Var attend(Var query, Var keys, Var values, double epsilon, const BoundMlp& post) {
  if (!(epsilon > 0.0)) throw ParameterError("attention scale epsilon must be positive");
  if (query.cols() != keys.cols() || keys.rows() != values.rows()) {
    throw DimensionError("attend query " + query.value().shape_string() + ", keys " + keys.value().shape_string() +
                         ", values " + values.value().shape_string());
  }
  Var weights = num::softmax_rows(num::matmul(query, num::transpose(keys)), epsilon);
  return apply_mlp(post, num::matmul(weights, values));
}

Var add_norm(Var attended, Var features) { return num::l2_normalize_rows(num::add(attended, features)); }

IftOutput ift_forward(Var image_features, Var source_bank, Var target_bank, const BoundIft& ift) {
  Projected p = project_qkv(image_features, source_bank, target_bank, ift.pre);
  Var zs = add_norm(attend(p.query, p.key_source, p.value_source, ift.epsilon, ift.post), image_features);
  Var zt = add_norm(attend(p.query, p.key_target, p.value_target, ift.epsilon, ift.post), image_features);
  Var fused = num::add(num::scale(zs, ift.beta_source), num::scale(zt, ift.beta_target));
  return IftOutput{fused, zs, zt};
}

Tensor ift_forward(const Tensor& image_features, const FeatureBank& source, const FeatureBank& target,
                   const IftParams& params) {
  Tape tape;
  BoundIft ift = bind_ift(tape, params, false);
  return ift_forward(tape.constant(image_features), tape.constant(source.centroids), tape.constant(target.centroids),
                     ift)
      .fused.value();
}

}  // namespace pda::align
