#include "pda/errors.hpp"
#include "pda/numerics/gradcheck.hpp"
#include "pda/training/training.hpp"

namespace pda::train {

ToyGradCheck gradcheck_toy(std::uint64_t seed) {
  enc::EncoderConfig ec;
  ec.d_model = 8;
  ec.n_layers = 2;
  ec.n_heads = 2;
  ec.d_proj = 4;
  ec.n_patches = 3;
  ec.coupled_layers = 1;
  ec.context_length = 2;
  ec.vocab_size = 2;
  ec.mlp_width = 16;
  ec.temperature = 0.1;
  ec.seed = seed;

  TrainConfig tc;
  tc.temperature = ec.temperature;
  tc.context_length = ec.context_length;
  tc.shots = 1;
  tc.tau = 0.0;
  tc.seed = seed + 1;

  num::Rng rng(seed + 2);
  UdaData data;
  data.classes = 2;
  for (std::uint32_t i = 0; i < 2; ++i) {
    Tensor offset = Tensor::gaussian(1, ec.d_model, 1.0, rng);
    Tensor xs = Tensor::gaussian(ec.n_patches, ec.d_model, 0.3, rng);
    Tensor xt = Tensor::gaussian(ec.n_patches, ec.d_model, 0.3, rng);
    for (std::size_t p = 0; p < ec.n_patches; ++p) {
      for (std::size_t j = 0; j < ec.d_model; ++j) {
        xs(p, j) += offset(0, j);
        xt(p, j) += offset(0, j) + 0.5;
      }
    }
    data.source.push_back(xs);
    data.source_labels.push_back(i);
    data.target.push_back(xt);
  }

  enc::DualEncoder encoder(ec);
  Pipeline pipeline(encoder, FeatureKind::raw_patches, data.classes);
  ModelState state = ModelState::initial(ec, tc);
  for (auto* m : {&state.ift.pre, &state.ift.post}) {
    for (auto& b : m->bias) b = Tensor::gaussian(1, b.cols(), 0.1, rng);
  }
  const ZeroShot zs = zero_shot(pipeline, state, data);
  const Banks banks = build_banks(zs, data, tc.shots);

  std::vector<double> theta;
  for (const Tensor* t : state.tensors()) theta.insert(theta.end(), t->data().begin(), t->data().end());
  auto loss_at = [&](std::span<const double> x) {
    ModelState s = state;
    std::size_t at = 0;
    for (Tensor* t : s.tensors()) {
      for (double& v : t->data()) v = x[at++];
    }
    Tape tape;
    StepGraph g(tape, pipeline, s, banks, false);
    return total_loss(g, data.source, data.source_labels, data.target, &zs.target_probs, tc).report.total;
  };

  Tape tape;
  StepGraph g(tape, pipeline, state, banks, true);
  auto terms = total_loss(g, data.source, data.source_labels, data.target, &zs.target_probs, tc);
  auto grads = tape.backward(terms.total);
  std::vector<double> analytic;
  const auto params = g.parameters();
  for (const Var& p : params) {
    const auto& d = grads.at(p.id).data();
    analytic.insert(analytic.end(), d.begin(), d.end());
  }
  if (analytic.size() != theta.size()) throw ContractError("parameter traversal mismatch in gradient check");

  ToyGradCheck r;
  r.max_relative_error = num::finite_diff_check(loss_at, theta, analytic, 1e-6);
  r.coordinates = theta.size();
  r.tensors = params.size();
  return r;
}

}  // namespace pda::train
