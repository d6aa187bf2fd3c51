#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "../support/oracles.hpp"
#include "pda/errors.hpp"
#include "pda/numerics/gradcheck.hpp"
#include "pda/training/training.hpp"

using namespace pda;
using num::Tape;
using num::Tensor;
using num::Var;
using train::FeatureKind;
using train::TrainConfig;

namespace {

enc::EncoderConfig tiny_encoder() {
  enc::EncoderConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_proj = 4;
  c.n_patches = 3;
  c.coupled_layers = 1;
  c.context_length = 2;
  c.vocab_size = 3;
  c.mlp_width = 16;
  c.temperature = 0.1;
  c.seed = 7;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.temperature = 0.1;
  t.context_length = 2;
  t.epochs = 3;
  t.batch_size = 4;
  t.shots = 2;
  t.tau = 0.4;
  t.lr0 = 0.05;
  t.seed = 11;
  return t;
}

train::UdaData toy_data(std::size_t per_class, std::uint64_t seed, std::size_t classes = 2) {
  const auto ec = tiny_encoder();
  num::Rng rng(seed);
  std::vector<Tensor> means;
  for (std::size_t k = 0; k < classes; ++k) means.push_back(Tensor::gaussian(1, ec.d_model, 1.0, rng));
  train::UdaData d;
  d.classes = classes;
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    const std::size_t k = i % classes;
    Tensor xs = Tensor::gaussian(ec.n_patches, ec.d_model, 0.3, rng);
    Tensor xt = Tensor::gaussian(ec.n_patches, ec.d_model, 0.3, rng);
    for (std::size_t p = 0; p < ec.n_patches; ++p) {
      for (std::size_t j = 0; j < ec.d_model; ++j) {
        xs(p, j) += means[k](0, j);
        xt(p, j) += means[k](0, j) + 0.5;
      }
    }
    d.source.push_back(xs);
    d.source_labels.push_back(static_cast<std::uint32_t>(k));
    d.target.push_back(xt);
  }
  return d;
}

struct Fixture {
  enc::DualEncoder encoder{tiny_encoder()};
  train::Pipeline pipeline{encoder, FeatureKind::raw_patches, 2};
  train::UdaData data = toy_data(4, 3);
  TrainConfig config = tiny_train();
  train::ModelState state = train::ModelState::initial(tiny_encoder(), config);
  train::ZeroShot zs = train::zero_shot(pipeline, state, data);
  train::Banks banks = train::build_banks(zs, data, config.shots);
};

double scalar_ce(const Tensor& text, const Tensor& z, std::size_t row, std::uint32_t label, double t) {
  auto zr = oracle::row(z, row);
  double zn = 0.0;
  for (double v : zr) zn += v * v;
  zn = std::sqrt(zn);
  std::vector<double> logits;
  for (std::size_t k = 0; k < text.rows(); ++k) {
    double dot = 0.0, wn = 0.0;
    for (std::size_t j = 0; j < zr.size(); ++j) {
      dot += text(k, j) * zr[j];
      wn += text(k, j) * text(k, j);
    }
    logits.push_back(dot / (zn * std::sqrt(wn)) / t);
  }
  double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double l : logits) s += std::exp(l - mx);
  return -(logits[label] - mx - std::log(s));
}

void expect_bit_identical(const train::ModelState& a, const train::ModelState& b) {
  auto ta = a.tensors();
  auto tb = b.tensors();
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) CHECK(num::bit_identical(*ta[i], *tb[i]));
}

}  // namespace

TEST_CASE("pseudo_label examples") {
  auto a = train::pseudo_label(Tensor::from_rows({{0.9, 0.1}}), 0.8);
  CHECK(a.labels[0] == 0);
  CHECK(a.keep[0]);
  auto b = train::pseudo_label(Tensor::from_rows({{0.6, 0.4}}), 0.8);
  CHECK_FALSE(b.keep[0]);
  Tensor p = Tensor::from_rows({{0.2, 0.8}, {0.5, 0.5}, {1.0, 0.0}});
  CHECK(train::pseudo_label(p, 0.0).kept() == 3);
  CHECK(train::pseudo_label(p, 1.01).kept() == 0);
  CHECK(train::pseudo_label(p, 0.0).labels[0] == 1);
  CHECK_THROWS_AS(train::pseudo_label(Tensor::from_rows({{0.7, 0.7}}), 0.5), ContractError);
  CHECK_THROWS_AS(train::pseudo_label(Tensor::from_rows({{1.2, -0.2}}), 0.5), ContractError);
}

TEST_CASE("raising tau never increases the kept count") {
  num::Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    Tensor logits = Tensor::gaussian(16, 4, 2.0, rng);
    Tensor probs = num::softmax_rows(tape.constant(logits), 1.0).value();
    std::size_t prev = probs.rows() + 1;
    for (double tau = 0.0; tau <= 1.01; tau += 0.05) {
      std::size_t k = train::pseudo_label(probs, tau).kept();
      CHECK(k <= prev);
      prev = k;
    }
  }
}

TEST_CASE("contrastive_loss examples") {
  Tape tape;
  const std::uint32_t zero[] = {0};
  const std::vector<bool> yes{true};
  SUBCASE("symmetric logits give ln 2") {
    Var w = tape.constant(Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
    Var z = tape.constant(Tensor::from_rows({{1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0)}}));
    CHECK(train::contrastive_loss(w, z, zero, yes, 0.01).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("three class scalar case") {
    const double s[] = {0.9, 0.5, 0.1};
    Tensor w(3, 2);
    for (int k = 0; k < 3; ++k) {
      w(k, 0) = s[k];
      w(k, 1) = std::sqrt(1.0 - s[k] * s[k]);
    }
    Var z = tape.constant(Tensor::from_rows({{1.0, 0.0}}));
    const double expected = -std::log(std::exp(0.9) / (std::exp(0.9) + std::exp(0.5) + std::exp(0.1)));
    CHECK(std::abs(train::contrastive_loss(tape.constant(w), z, zero, yes, 1.0).value().item() - expected) < 1e-12);
  }
  SUBCASE("empty mask and bad label") {
    Var w = tape.constant(Tensor::from_rows({{1.0, 0.0}, {0.0, 1.0}}));
    Var z = tape.constant(Tensor::from_rows({{0.6, 0.8}}));
    CHECK(train::contrastive_loss(w, z, zero, {false}, 0.1).value().item() == 0.0);
    const std::uint32_t bad[] = {2};
    CHECK_THROWS_AS(train::contrastive_loss(w, z, bad, yes, 0.1), DataError);
  }
}

TEST_CASE("cosine_lr examples") {
  CHECK(train::cosine_lr(0, 100, 0.003) == doctest::Approx(0.003).epsilon(1e-15));
  CHECK(std::abs(train::cosine_lr(100, 100, 0.003)) < 1e-18);
  CHECK(train::cosine_lr(50, 100, 0.003) == doctest::Approx(0.0015).epsilon(1e-12));
  CHECK_THROWS_AS(train::cosine_lr(101, 100, 0.003), ParameterError);
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.tau = -0.1;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = TrainConfig{};
  c.gamma = -1.0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = TrainConfig{};
  c.ensemble_weight = 1.5;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
}

TEST_CASE("log records round trip") {
  train::LossReport r;
  r.step = 12;
  r.lr = 0.0029;
  r.lx = 0.5;
  r.lu = 0.25;
  r.lxa = 1.0 / 3.0;
  r.lua = 0.125;
  r.total = 1.2;
  r.n_pseudo_kept = 7;
  auto line = train::format_log_record(r);
  CHECK(std::count(line.begin(), line.end(), '\t') == 7);
  auto back = train::parse_log_record(line);
  CHECK(back.step == 12);
  CHECK(back.lxa == r.lxa);
  CHECK(back.n_pseudo_kept == 7);
  CHECK_THROWS_AS(train::parse_log_record("1\t2"), DataError);
}

TEST_CASE("total_loss branch ablation and empty target") {
  Fixture f;
  std::span<const Tensor> src(f.data.source.data(), 4);
  std::span<const std::uint32_t> ys(f.data.source_labels.data(), 4);
  std::span<const Tensor> tgt(f.data.target.data(), 4);
  SUBCASE("gamma zero") {
    f.config.gamma = 0.0;
    Tape tape;
    train::StepGraph g(tape, f.pipeline, f.state, f.banks, true);
    auto terms = train::total_loss(g, src, ys, tgt, nullptr, f.config);
    CHECK(terms.report.total == terms.report.lx + terms.report.lu);
    CHECK(terms.report.lxa > 0.0);
  }
  SUBCASE("empty target") {
    Tape tape;
    train::StepGraph g(tape, f.pipeline, f.state, f.banks, true);
    auto terms = train::total_loss(g, src, ys, {}, nullptr, f.config);
    CHECK(terms.report.lu == 0.0);
    CHECK(terms.report.lua == 0.0);
    CHECK(terms.report.n_pseudo_kept == 0);
    CHECK(terms.report.total == terms.report.lx + terms.report.lxa);
  }
}

TEST_CASE("total_loss equals independently computed components") {
  Fixture f;
  f.config.tau = 0.0;
  f.config.gamma = 0.7;
  std::vector<Tensor> src(f.data.source.begin(), f.data.source.begin() + 2);
  std::vector<std::uint32_t> ys(f.data.source_labels.begin(), f.data.source_labels.begin() + 2);
  std::vector<Tensor> tgt(f.data.target.begin(), f.data.target.begin() + 2);

  Tape tape;
  train::StepGraph g(tape, f.pipeline, f.state, f.banks, true);
  auto terms = train::total_loss(g, src, ys, tgt, nullptr, f.config);

  const double t = f.config.temperature;
  const Tensor text = f.pipeline.text_features(f.state);
  const Tensor zs = f.pipeline.image_features(f.state, src);
  const Tensor zt = f.pipeline.image_features(f.state, tgt);
  const Tensor hs = oracle::ift(zs, f.banks.source.centroids, f.banks.target.centroids, f.state.ift);
  const Tensor ht = oracle::ift(zt, f.banks.source.centroids, f.banks.target.centroids, f.state.ift);
  double lx = 0, lu = 0, lxa = 0, lua = 0;
  for (std::size_t i = 0; i < 2; ++i) {
    lx += scalar_ce(text, zs, i, ys[i], t) / 2;
    lxa += scalar_ce(text, hs, i, ys[i], t) / 2;
    // current-model pseudo label: nearest text row
    std::uint32_t best = 0;
    double bd = -2;
    for (std::uint32_t k = 0; k < text.rows(); ++k) {
      double dot = 0;
      for (std::size_t j = 0; j < text.cols(); ++j) dot += text(k, j) * zt(i, j);
      if (dot > bd) bd = dot, best = k;
    }
    lu += scalar_ce(text, zt, i, best, t) / 2;
    lua += scalar_ce(text, ht, i, best, t) / 2;
  }
  CHECK(terms.report.n_pseudo_kept == 2);
  CHECK(std::abs(terms.report.lx - lx) < 1e-9);
  CHECK(std::abs(terms.report.lu - lu) < 1e-9);
  CHECK(std::abs(terms.report.lxa - lxa) < 1e-9);
  CHECK(std::abs(terms.report.lua - lua) < 1e-9);
  CHECK(std::abs(terms.report.total - (lx + lu + 0.7 * (lxa + lua))) < 1e-9);
}

TEST_CASE("total_loss gradient matches central differences over every learnable coordinate") {
  Fixture f;
  f.config.tau = 0.0;
  std::vector<Tensor> src(f.data.source.begin(), f.data.source.begin() + 2);
  std::vector<std::uint32_t> ys(f.data.source_labels.begin(), f.data.source_labels.begin() + 2);
  std::vector<Tensor> tgt(f.data.target.begin(), f.data.target.begin() + 2);
  const Tensor fixed_probs = Tensor::from_rows({{0.9, 0.1}, {0.2, 0.8}});
  // Zero-initialized biases put some ReLU inputs exactly on the kink; check
  // at a generic point instead.
  num::Rng rng(21);
  for (auto* m : {&f.state.ift.pre, &f.state.ift.post}) {
    for (auto& b : m->bias) b = Tensor::gaussian(1, b.cols(), 0.1, rng);
  }

  auto pack = [](const train::ModelState& s) {
    std::vector<double> out;
    for (const Tensor* t : s.tensors()) out.insert(out.end(), t->data().begin(), t->data().end());
    return out;
  };
  auto unpack = [&](std::span<const double> theta) {
    train::ModelState s = f.state;
    std::size_t at = 0;
    for (Tensor* t : s.tensors()) {
      for (double& v : t->data()) v = theta[at++];
    }
    return s;
  };
  auto loss_at = [&](std::span<const double> theta) {
    train::ModelState s = unpack(theta);
    Tape tape;
    train::StepGraph g(tape, f.pipeline, s, f.banks, false);
    return train::total_loss(g, src, ys, tgt, &fixed_probs, f.config).report.total;
  };

  Tape tape;
  train::StepGraph g(tape, f.pipeline, f.state, f.banks, true);
  auto terms = train::total_loss(g, src, ys, tgt, &fixed_probs, f.config);
  auto grads = tape.backward(terms.total);
  std::vector<double> analytic;
  for (const Var& p : g.parameters()) {
    const auto& d = grads.at(p.id).data();
    analytic.insert(analytic.end(), d.begin(), d.end());
  }
  const auto theta = pack(f.state);
  REQUIRE(theta.size() == analytic.size());
  CHECK(num::finite_diff_check(loss_at, theta, analytic, 1e-6) < 1e-4);
}

TEST_CASE("gradients reach prompts and both perceptrons in one backward pass") {
  Fixture f;
  f.config.tau = 0.0;
  Tape tape;
  train::StepGraph g(tape, f.pipeline, f.state, f.banks, true);
  std::span<const Tensor> src(f.data.source.data(), 4);
  std::span<const std::uint32_t> ys(f.data.source_labels.data(), 4);
  auto terms = train::total_loss(g, src, ys, {}, nullptr, f.config);
  auto grads = tape.backward(terms.total);
  auto params = g.parameters();
  auto nonzero = [&](std::size_t i) {
    for (double v : grads.at(params[i].id).data())
      if (v != 0.0) return true;
    return false;
  };
  CHECK(nonzero(0));                  // first text context
  CHECK(nonzero(params.size() - 12)); // f_pre first weight
  CHECK(nonzero(params.size() - 2));  // f_post last weight
}

TEST_CASE("training reports satisfy additivity on every step") {
  Fixture f;
  train::TrainHooks hooks;
  std::size_t steps = 0;
  hooks.on_step = [&](const train::LossReport& r) {
    ++steps;
    CHECK(std::abs(r.total - (r.lx + r.lu + f.config.gamma * (r.lxa + r.lua))) < 1e-9);
  };
  auto result = train::train(f.pipeline, f.data, f.config, hooks);
  CHECK(steps == 6);
  CHECK(result.steps.size() == 6);
  CHECK(result.epochs.size() == 3);
  CHECK(result.checkpoint.global_step == 6);
  CHECK(result.steps.front().lr == doctest::Approx(f.config.lr0));
}

TEST_CASE("training is deterministic and resumes bit-identically") {
  Fixture f;
  auto a = train::train(f.pipeline, f.data, f.config);
  auto b = train::train(f.pipeline, f.data, f.config);
  expect_bit_identical(a.checkpoint.state, b.checkpoint.state);

  train::TrainHooks stop;
  stop.stop_after_epochs = 1;
  auto first = train::train(f.pipeline, f.data, f.config, stop);
  CHECK(first.checkpoint.next_epoch == 1);
  auto rest = train::train(f.pipeline, f.data, f.config, {}, &first.checkpoint);
  expect_bit_identical(a.checkpoint.state, rest.checkpoint.state);
  CHECK(rest.checkpoint.global_step == a.checkpoint.global_step);
  for (std::size_t i = 0; i < rest.steps.size(); ++i) {
    CHECK(rest.steps[i].total == a.steps[first.steps.size() + i].total);
  }

  TrainConfig other = f.config;
  other.tau = 0.5;
  CHECK_THROWS_AS(train::train(f.pipeline, f.data, other, {}, &first.checkpoint), DataError);
}

TEST_CASE("epochs zero returns the initial state and zero-shot predictions") {
  Fixture f;
  f.config.epochs = 0;
  auto r = train::train(f.pipeline, f.data, f.config);
  CHECK(r.steps.empty());
  expect_bit_identical(r.checkpoint.state, f.state);
  auto pred = train::predict(f.pipeline, r.checkpoint.state, r.checkpoint.banks, f.data.target, 1.0);
  auto zs_labels = train::pseudo_label(f.zs.target_probs, 0.0).labels;
  CHECK(pred.classes == zs_labels);
}

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  Fixture f;
  f.config.lr0 = 0.0;
  auto r = train::train(f.pipeline, f.data, f.config);
  CHECK(r.steps.size() == 6);
  expect_bit_identical(r.checkpoint.state, f.state);
}

TEST_CASE("warm-up over the whole run keeps zero-shot pseudo labels") {
  Fixture f;
  f.config.tau = 0.55;
  f.config.warmup_epochs = f.config.epochs;
  auto kept = [&](double lr) {
    TrainConfig c = f.config;
    c.lr0 = lr;
    std::vector<std::size_t> out;
    for (const auto& s : train::train(f.pipeline, f.data, c).steps) out.push_back(s.n_pseudo_kept);
    return out;
  };
  const auto slow = kept(0.0);
  CHECK(slow == kept(5.0));

  // Replay the batches: kept counts must match the precomputed zero-shot labels.
  const auto labels = train::pseudo_label(f.zs.target_probs, f.config.tau);
  std::size_t total_kept = 0;
  for (auto s : slow) total_kept += s;
  // Each epoch visits every target sample exactly once (8 samples, 2 steps of 4).
  CHECK(total_kept == labels.kept() * f.config.epochs);
}

TEST_CASE("predict ensembles the two branches") {
  Fixture f;
  auto base = train::predict(f.pipeline, f.state, f.banks, f.data.target, 1.0);
  auto aligned = train::predict(f.pipeline, f.state, f.banks, f.data.target, 0.0);
  const Tensor text = f.pipeline.text_features(f.state);
  CHECK(num::max_abs_diff(base.probs, enc::zero_shot_probs(text, f.zs.target_features, f.config.temperature)) < 1e-12);
  const Tensor h = align::ift_forward(f.zs.target_features, f.banks.source, f.banks.target, f.state.ift);
  Tape tape;
  const Tensor ap = enc::class_probabilities(tape.constant(text), tape.constant(h), f.config.temperature).value();
  CHECK(num::max_abs_diff(aligned.probs, ap) < 1e-12);
  for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    auto mix = train::predict(f.pipeline, f.state, f.banks, f.data.target, lambda);
    for (std::size_t i = 0; i < mix.classes.size(); ++i) {
      if (base.classes[i] == aligned.classes[i]) CHECK(mix.classes[i] == base.classes[i]);
      double s = 0;
      for (double p : mix.probs.row(i)) s += p;
      CHECK(s == doctest::Approx(1.0));
    }
  }
  CHECK_THROWS_AS(train::predict(f.pipeline, f.state, f.banks, f.data.target, 1.5), ParameterError);
}

TEST_CASE("embedding inputs train without the image tower") {
  enc::DualEncoder encoder(tiny_encoder());
  train::Pipeline pipeline(encoder, FeatureKind::embeddings, 2);
  train::UdaData d;
  d.classes = 2;
  d.kind = FeatureKind::embeddings;
  num::Rng rng(9);
  for (int i = 0; i < 8; ++i) {
    Tensor x = Tensor::gaussian(1, 4, 0.2, rng);
    x(0, i % 2) += 1.0;
    d.source.push_back(x);
    d.source_labels.push_back(static_cast<std::uint32_t>(i % 2));
    Tensor y = x;
    y(0, 2) += 0.5;
    d.target.push_back(y);
  }
  auto r = train::train(pipeline, d, tiny_train());
  CHECK(r.steps.size() == 6);
  for (const auto& s : r.steps) CHECK(std::isfinite(s.total));
}

TEST_CASE("invalid training inputs") {
  Fixture f;
  SUBCASE("missing source class") {
    auto d = f.data;
    for (auto& y : d.source_labels) y = 0;
    CHECK_THROWS_AS(train::train(f.pipeline, d, f.config), DataError);
  }
  SUBCASE("wrong patch shape") {
    auto d = f.data;
    d.target[0] = Tensor(2, 8);
    CHECK_THROWS_AS(train::train(f.pipeline, d, f.config), DataError);
  }
  SUBCASE("context length mismatch") {
    auto c = f.config;
    c.context_length = 3;
    CHECK_THROWS_AS(train::train(f.pipeline, f.data, c), ParameterError);
  }
}
