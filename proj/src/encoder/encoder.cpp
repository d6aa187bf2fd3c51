#include "pda/encoder/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pda/errors.hpp"

namespace pda::enc {
namespace {

constexpr double kInitStd = 0.02;

LayerWeights random_layer(const EncoderConfig& c, Rng& rng) {
  LayerWeights w;
  const std::size_t d = c.d_model;
  const std::size_t dh = c.head_dim();
  w.ln1_gain = Tensor(1, d, 1.0);
  w.ln1_bias = Tensor(1, d, 0.0);
  w.ln2_gain = Tensor(1, d, 1.0);
  w.ln2_bias = Tensor(1, d, 0.0);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    w.query.push_back(Tensor::gaussian(d, dh, kInitStd, rng));
    w.key.push_back(Tensor::gaussian(d, dh, kInitStd, rng));
    Tensor v = Tensor::gaussian(d, dh, kInitStd, rng);
    Tensor o = Tensor::gaussian(dh, d, kInitStd, rng);
    if (c.identity_value_path) {
      // Head h reads and writes its own block of d_model coordinates.
      for (std::size_t i = 0; i < dh; ++i) {
        v(h * dh + i, i) += 1.0;
        o(i, h * dh + i) += 1.0;
      }
    }
    w.value.push_back(std::move(v));
    w.out.push_back(std::move(o));
  }
  w.fc1 = Tensor::gaussian(d, c.mlp_width, kInitStd, rng);
  w.fc1_bias = Tensor(1, c.mlp_width, 0.0);
  w.fc2 = Tensor::gaussian(c.mlp_width, d, kInitStd, rng);
  w.fc2_bias = Tensor(1, d, 0.0);
  return w;
}

TowerWeights random_tower(const EncoderConfig& c, Rng& rng, const Tensor& projection) {
  TowerWeights t;
  for (std::size_t j = 0; j < c.n_layers; ++j) t.layers.push_back(random_layer(c, rng));
  t.ln_final_gain = Tensor(1, c.d_model, 1.0);
  t.ln_final_bias = Tensor(1, c.d_model, 0.0);
  t.projection = projection;
  return t;
}

template <typename W, typename T>
void collect_tower(W& tower, std::vector<T*>& out) {
  for (auto& l : tower.layers) {
    out.push_back(&l.ln1_gain);
    out.push_back(&l.ln1_bias);
    for (auto& x : l.query) out.push_back(&x);
    for (auto& x : l.key) out.push_back(&x);
    for (auto& x : l.value) out.push_back(&x);
    for (auto& x : l.out) out.push_back(&x);
    out.push_back(&l.ln2_gain);
    out.push_back(&l.ln2_bias);
    out.push_back(&l.fc1);
    out.push_back(&l.fc1_bias);
    out.push_back(&l.fc2);
    out.push_back(&l.fc2_bias);
  }
  out.push_back(&tower.ln_final_gain);
  out.push_back(&tower.ln_final_bias);
  out.push_back(&tower.projection);
}

EncoderGraph::BoundTower bind_tower(Tape& tape, const TowerWeights& w) {
  EncoderGraph::BoundTower t;
  for (const auto& l : w.layers) {
    EncoderGraph::BoundLayer b;
    b.ln1_gain = tape.constant(l.ln1_gain);
    b.ln1_bias = tape.constant(l.ln1_bias);
    for (std::size_t h = 0; h < l.query.size(); ++h) {
      b.query.push_back(tape.constant(l.query[h]));
      b.key.push_back(tape.constant(l.key[h]));
      b.value.push_back(tape.constant(l.value[h]));
      b.out.push_back(tape.constant(l.out[h]));
    }
    b.ln2_gain = tape.constant(l.ln2_gain);
    b.ln2_bias = tape.constant(l.ln2_bias);
    b.fc1 = tape.constant(l.fc1);
    b.fc1_bias = tape.constant(l.fc1_bias);
    b.fc2 = tape.constant(l.fc2);
    b.fc2_bias = tape.constant(l.fc2_bias);
    t.layers.push_back(std::move(b));
  }
  t.ln_final_gain = tape.constant(w.ln_final_gain);
  t.ln_final_bias = tape.constant(w.ln_final_bias);
  t.projection = tape.constant(w.projection);
  return t;
}

Var readout(const EncoderGraph::BoundTower& tower, Var token) {
  Var h = num::add_row(num::mul_row(num::layer_norm_rows(token), tower.ln_final_gain), tower.ln_final_bias);
  return num::l2_normalize_rows(num::matmul(h, tower.projection));
}

}  // namespace

void EncoderConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ParameterError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                         std::to_string(n_heads) + ")");
  }
  if (n_layers == 0) throw ParameterError("n_layers must be at least 1");
  if (coupled_layers < 1 || coupled_layers > n_layers) {
    throw ParameterError("coupled_layers must lie in [1, n_layers], got " + std::to_string(coupled_layers));
  }
  if (context_length < 1) throw ParameterError("context_length must be at least 1");
  if (d_proj == 0 || n_patches == 0 || vocab_size == 0 || mlp_width == 0) {
    throw ParameterError("encoder widths and counts must be positive");
  }
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
}

FrozenWeights FrozenWeights::random(const EncoderConfig& config) {
  config.validate();
  Rng rng(config.seed);
  FrozenWeights w;
  w.temperature = config.temperature;
  // Both towers start from the same projection so the two feature spaces
  // share coordinates, the desk-scale stand-in for contrastive pretraining.
  Tensor projection = Tensor::gaussian(config.d_model, config.d_proj, kInitStd, rng);
  w.text = random_tower(config, rng, projection);
  w.image = random_tower(config, rng, projection);
  w.token_embedding = Tensor::gaussian(config.vocab_size, config.d_model, kInitStd, rng);
  w.class_embedding = Tensor::gaussian(1, config.d_model, kInitStd, rng);
  return w;
}

void FrozenWeights::set_token_embeddings(const Tensor& table) {
  if (!table.same_shape(token_embedding)) {
    throw DimensionError("token table " + table.shape_string() + " does not match " + token_embedding.shape_string());
  }
  token_embedding = table;
}

std::vector<const Tensor*> FrozenWeights::tensors() const {
  std::vector<const Tensor*> out;
  collect_tower(text, out);
  collect_tower(image, out);
  out.push_back(&token_embedding);
  out.push_back(&class_embedding);
  return out;
}

std::vector<Tensor*> FrozenWeights::tensors() {
  std::vector<Tensor*> out;
  collect_tower(text, out);
  collect_tower(image, out);
  out.push_back(&token_embedding);
  out.push_back(&class_embedding);
  return out;
}

PromptSet PromptSet::initial(const EncoderConfig& config, Rng& rng) {
  config.validate();
  PromptSet p;
  for (std::size_t j = 0; j < config.n_layers; ++j) {
    p.text_context.push_back(Tensor::gaussian(config.context_length, config.d_model, kInitStd, rng));
  }
  p.coupling = Tensor::identity(config.d_model) + Tensor::gaussian(config.d_model, config.d_model, 0.01, rng);
  for (std::size_t j = config.coupled_layers; j < config.n_layers; ++j) {
    p.deep_visual.push_back(Tensor::gaussian(config.context_length, config.d_model, kInitStd, rng));
  }
  return p;
}

std::size_t PromptSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto* t : tensors()) n += t->size();
  return n;
}

std::vector<const Tensor*> PromptSet::tensors() const {
  std::vector<const Tensor*> out;
  for (const auto& t : text_context) out.push_back(&t);
  out.push_back(&coupling);
  for (const auto& t : deep_visual) out.push_back(&t);
  return out;
}

std::vector<Tensor*> PromptSet::tensors() {
  std::vector<Tensor*> out;
  for (auto& t : text_context) out.push_back(&t);
  out.push_back(&coupling);
  for (auto& t : deep_visual) out.push_back(&t);
  return out;
}

std::vector<Var> BoundPrompts::all() const {
  std::vector<Var> out(text_context);
  out.push_back(coupling);
  out.insert(out.end(), deep_visual.begin(), deep_visual.end());
  return out;
}

BoundPrompts bind_prompts(Tape& tape, const PromptSet& prompts, bool learnable) {
  auto bind = [&](const Tensor& t) { return learnable ? tape.parameter(t) : tape.constant(t); };
  BoundPrompts b;
  for (const auto& t : prompts.text_context) b.text_context.push_back(bind(t));
  b.coupling = bind(prompts.coupling);
  for (const auto& t : prompts.deep_visual) b.deep_visual.push_back(bind(t));
  return b;
}

std::vector<Var> couple_visual_prompts(const BoundPrompts& prompts, std::size_t coupled_layers) {
  const std::size_t layers = prompts.text_context.size();
  if (coupled_layers > layers || prompts.deep_visual.size() != layers - coupled_layers) {
    throw DimensionError("prompt set has " + std::to_string(layers) + " text layers and " +
                         std::to_string(prompts.deep_visual.size()) + " deep visual layers for " +
                         std::to_string(coupled_layers) + " coupled layers");
  }
  std::vector<Var> out;
  for (std::size_t j = 0; j < coupled_layers; ++j) out.push_back(num::matmul(prompts.text_context[j], prompts.coupling));
  for (const auto& v : prompts.deep_visual) out.push_back(v);
  return out;
}

DualEncoder::DualEncoder(EncoderConfig config, FrozenWeights weights) : config_(config), weights_(std::move(weights)) {
  config_.validate();
  if (weights_.text.layers.size() != config_.n_layers || weights_.image.layers.size() != config_.n_layers) {
    throw DimensionError("frozen weights depth does not match n_layers");
  }
  if (weights_.token_embedding.rows() != config_.vocab_size || weights_.token_embedding.cols() != config_.d_model) {
    throw DimensionError("token table " + weights_.token_embedding.shape_string() + " does not match config");
  }
}

Var transformer_block(const EncoderGraph::BoundLayer& layer, Var x, std::size_t n_heads) {
  Var h = num::add_row(num::mul_row(num::layer_norm_rows(x), layer.ln1_gain), layer.ln1_bias);
  const double scale = std::sqrt(static_cast<double>(layer.query.front().cols()));
  Var attn;
  for (std::size_t head = 0; head < n_heads; ++head) {
    Var q = num::matmul(h, layer.query[head]);
    Var k = num::matmul(h, layer.key[head]);
    Var v = num::matmul(h, layer.value[head]);
    Var weights = num::softmax_rows(num::matmul(q, num::transpose(k)), scale);
    Var contrib = num::matmul(num::matmul(weights, v), layer.out[head]);
    attn = head == 0 ? contrib : num::add(attn, contrib);
  }
  x = num::add(x, attn);
  Var h2 = num::add_row(num::mul_row(num::layer_norm_rows(x), layer.ln2_gain), layer.ln2_bias);
  Var mlp = num::add_row(num::matmul(num::gelu(num::add_row(num::matmul(h2, layer.fc1), layer.fc1_bias)), layer.fc2),
                         layer.fc2_bias);
  return num::add(x, mlp);
}

EncoderGraph::EncoderGraph(Tape& tape, const DualEncoder& encoder, const PromptSet& prompts, bool learnable_prompts)
    : tape_(tape), encoder_(encoder) {
  const auto& c = encoder.config();
  if (prompts.text_context.size() != c.n_layers) throw DimensionError("prompt depth does not match n_layers");
  for (const auto& t : prompts.text_context) {
    if (t.rows() != c.context_length || t.cols() != c.d_model) {
      throw DimensionError("text context " + t.shape_string() + " does not match config");
    }
  }
  prompts_ = bind_prompts(tape, prompts, learnable_prompts);
  visual_prompts_ = couple_visual_prompts(prompts_, c.coupled_layers);
  const auto& w = encoder.weights();
  text_ = bind_tower(tape, w.text);
  image_ = bind_tower(tape, w.image);
  token_embedding_ = tape.constant(w.token_embedding);
  class_embedding_ = tape.constant(w.class_embedding);
}

Var EncoderGraph::encode_text(std::span<const std::uint32_t> class_ids) {
  const auto& c = encoder_.config();
  std::vector<Var> rows;
  rows.reserve(class_ids.size());
  for (auto id : class_ids) {
    if (id >= c.vocab_size) {
      throw DataError("class id " + std::to_string(id) + " outside token table of " + std::to_string(c.vocab_size));
    }
    Var token = num::slice_rows(token_embedding_, id, 1);
    for (std::size_t j = 0; j < c.n_layers; ++j) {
      // Context vectors are replaced at every layer; the class token carries on.
      std::vector<Var> seq{prompts_.text_context[j], token};
      Var out = transformer_block(text_.layers[j], num::concat_rows(seq), c.n_heads);
      token = num::slice_rows(out, c.context_length, 1);
    }
    rows.push_back(readout(text_, token));
  }
  if (rows.empty()) throw DataError("no class ids to encode");
  return num::concat_rows(rows);
}

Var EncoderGraph::encode_image(const Tensor& patches) {
  const auto& c = encoder_.config();
  if (patches.rows() != c.n_patches || patches.cols() != c.d_model) {
    throw DataError("image input " + patches.shape_string() + " does not match " + std::to_string(c.n_patches) + "x" +
                    std::to_string(c.d_model) + " patches");
  }
  Var body = tape_.constant(patches);
  Var cls = class_embedding_;
  for (std::size_t j = 0; j < c.n_layers; ++j) {
    std::vector<Var> seq{visual_prompts_[j], body, cls};
    Var out = transformer_block(image_.layers[j], num::concat_rows(seq), c.n_heads);
    body = num::slice_rows(out, c.context_length, c.n_patches);
    cls = num::slice_rows(out, c.context_length + c.n_patches, 1);
  }
  return readout(image_, cls);
}

Var EncoderGraph::encode_images(std::span<const Tensor> batch) {
  if (batch.empty()) throw DataError("empty image batch");
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (const auto& x : batch) rows.push_back(encode_image(x));
  return num::concat_rows(rows);
}

Var class_probabilities(Var text, Var images, double temperature) {
  return num::softmax_rows(num::cosine_similarity(images, text), temperature);
}

Tensor zero_shot_probs(const Tensor& text, const Tensor& images, double temperature) {
  auto check_unit = [](const Tensor& t, const char* what) {
    for (std::size_t i = 0; i < t.rows(); ++i) {
      if (std::abs(num::row_norm(t.row(i)) - 1.0) > 1e-6) {
        throw ContractError(std::string(what) + " row " + std::to_string(i) + " is not unit norm");
      }
    }
  };
  check_unit(text, "text feature");
  check_unit(images, "image feature");
  if (text.cols() != images.cols()) {
    throw DimensionError("text " + text.shape_string() + " vs image " + images.shape_string());
  }
  Tape tape;
  Var sims = num::matmul(tape.constant(images), num::transpose(tape.constant(text)));
  return num::softmax_rows(sims, temperature).value();
}

Tensor encode_text(const DualEncoder& encoder, const PromptSet& prompts, std::span<const std::uint32_t> class_ids) {
  Tape tape;
  EncoderGraph g(tape, encoder, prompts, false);
  return g.encode_text(class_ids).value();
}

Tensor encode_images(const DualEncoder& encoder, const PromptSet& prompts, std::span<const Tensor> batch) {
  if (batch.empty()) throw DataError("empty image batch");
  // Chunked so an inference tape never holds more than a batch worth of nodes.
  constexpr std::size_t kChunk = 32;
  Tensor out(batch.size(), encoder.config().d_proj);
  for (std::size_t begin = 0; begin < batch.size(); begin += kChunk) {
    Tape tape;
    EncoderGraph g(tape, encoder, prompts, false);
    const std::size_t n = std::min(kChunk, batch.size() - begin);
    const Tensor part = g.encode_images(batch.subspan(begin, n)).value();
    std::copy(part.data().begin(), part.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * out.cols()));
  }
  return out;
}

std::vector<std::uint32_t> all_class_ids(std::size_t k) {
  std::vector<std::uint32_t> ids(k);
  std::iota(ids.begin(), ids.end(), 0u);
  return ids;
}

}  // namespace pda::enc
