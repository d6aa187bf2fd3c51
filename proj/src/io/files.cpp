#include "pda/io/files.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "pda/errors.hpp"

namespace pda::io {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

const Record& expect(const std::vector<Record>& records, std::size_t i, Section section, const fs::path& path) {
  if (i >= records.size()) {
    throw DataError(path.string() + ": missing " + to_string(section) + " record #" + std::to_string(i));
  }
  if (records[i].section != section) {
    throw DataError(path.string() + ": record #" + std::to_string(i) + " is " + to_string(records[i].section) +
                    ", expected " + to_string(section));
  }
  return records[i];
}

const Tensor& expect_matrix(const std::vector<Record>& records, std::size_t i, Section section,
                            const fs::path& path) {
  const Record& r = expect(records, i, section, path);
  if (r.dtype == DType::u32) throw DataError(path.string() + ": record #" + std::to_string(i) + " is not a matrix");
  return r.values;
}

const std::vector<std::uint32_t>& expect_ids(const std::vector<Record>& records, std::size_t i, Section section,
                                             const fs::path& path) {
  const Record& r = expect(records, i, section, path);
  if (r.dtype != DType::u32) throw DataError(path.string() + ": record #" + std::to_string(i) + " is not integral");
  return r.ids;
}

void assign_checked(Tensor& dst, const Tensor& src, const std::string& what) {
  if (dst.rows() != src.rows() || dst.cols() != src.cols()) {
    throw DataError(what + " is " + src.shape_string() + ", expected " + dst.shape_string());
  }
  dst = src;
}

std::uint32_t lo(std::uint64_t v) { return static_cast<std::uint32_t>(v & 0xFFFFFFFFu); }
std::uint32_t hi(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }
std::uint64_t join(std::uint32_t l, std::uint32_t h) { return static_cast<std::uint64_t>(h) << 32 | l; }

constexpr std::uint32_t kNoSample = 0xFFFFFFFFu;
constexpr std::uint32_t kCheckpointLayout = 1;

void append_bank(std::vector<Record>& out, const align::FeatureBank& bank, Section section) {
  const std::size_t k = bank.classes();
  std::vector<std::uint32_t> meta{static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(bank.shots),
                                  static_cast<std::uint32_t>(bank.domain)};
  out.push_back(Record::integers(section, meta));
  out.push_back(Record::matrix(section, bank.centroids));
  std::vector<std::uint32_t> ids(k * bank.shots, kNoSample);
  std::vector<std::uint32_t> flags(k, 0);
  Tensor conf(k, bank.shots, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    const auto& s = bank.support[c];
    flags[c] = s.fallback ? 1 : 0;
    for (std::size_t j = 0; j < s.sample_ids.size() && j < bank.shots; ++j) {
      ids[c * bank.shots + j] = static_cast<std::uint32_t>(s.sample_ids[j]);
      conf(c, j) = s.confidences[j];
    }
  }
  out.push_back(Record::integers(section, ids, k, bank.shots));
  out.push_back(Record::matrix(section, conf));
  out.push_back(Record::integers(section, flags));
}

align::FeatureBank parse_bank(const std::vector<Record>& records, std::size_t& i, Section section,
                              const fs::path& path) {
  const auto& meta = expect_ids(records, i++, section, path);
  if (meta.size() != 3 || meta[2] > 1) throw DataError(path.string() + ": malformed bank header");
  align::FeatureBank bank;
  const std::size_t k = meta[0];
  bank.shots = meta[1];
  bank.domain = static_cast<align::Domain>(meta[2]);
  bank.centroids = expect_matrix(records, i++, section, path);
  const auto& ids = expect_ids(records, i++, section, path);
  const Tensor& conf = expect_matrix(records, i++, section, path);
  const auto& flags = expect_ids(records, i++, section, path);
  if (bank.centroids.rows() != k || ids.size() != k * bank.shots || conf.rows() != k || conf.cols() != bank.shots ||
      flags.size() != k) {
    throw DataError(path.string() + ": bank records disagree on the class count");
  }
  bank.support.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    bank.support[c].fallback = flags[c] != 0;
    for (std::size_t j = 0; j < bank.shots; ++j) {
      if (ids[c * bank.shots + j] == kNoSample) continue;
      bank.support[c].sample_ids.push_back(ids[c * bank.shots + j]);
      bank.support[c].confidences.push_back(conf(c, j));
    }
  }
  return bank;
}

}  // namespace

void write_embeddings(const fs::path& path, const Tensor& matrix, const std::vector<std::uint32_t>* labels,
                      DType dtype, const std::vector<std::uint32_t>* eval_labels) {
  std::vector<Record> records{Record::matrix(Section::embeddings, matrix, dtype)};
  for (auto [ids, section] : {std::pair{labels, Section::labels}, std::pair{eval_labels, Section::eval_labels}}) {
    if (!ids) continue;
    if (ids->size() != matrix.rows()) throw DataError("label count does not match the embedding rows");
    records.push_back(Record::integers(section, *ids, ids->size(), 1));
  }
  write_file(path, records);
}

EmbeddingSet read_embeddings(const fs::path& path) {
  auto records = read_file(path, [](Section s) { return s != Section::eval_labels; });
  EmbeddingSet out;
  out.matrix = expect_matrix(records, 0, Section::embeddings, path);
  for (std::size_t i = 1; i < records.size(); ++i) {
    const Record& r = records[i];
    if (r.section == Section::eval_labels) continue;
    if (r.section != Section::labels || out.labels) {
      throw DataError(path.string() + ": unexpected " + to_string(r.section) + " record");
    }
    if (r.ids.size() != out.matrix.rows()) {
      throw DataError(path.string() + ": " + std::to_string(r.ids.size()) + " labels for " +
                      std::to_string(out.matrix.rows()) + " rows");
    }
    out.labels = r.ids;
  }
  return out;
}

std::vector<std::uint32_t> read_eval_labels(const fs::path& path) {
  auto records = read_file(path, [](Section s) { return s == Section::eval_labels || s == Section::labels; });
  std::optional<std::uint64_t> rows;
  for (const auto& r : records) {
    if (r.section == Section::embeddings) rows = r.rows;
    if (r.section == Section::eval_labels) {
      if (rows && *rows != r.ids.size()) throw DataError(path.string() + ": evaluation labels do not match rows");
      return r.ids;
    }
  }
  throw DataError(path.string() + " has no evaluation-only labels");
}

Tensor flatten_samples(std::span<const Tensor> samples) {
  if (samples.empty()) throw DataError("no samples to store");
  const std::size_t width = samples[0].size();
  Tensor out(samples.size(), width);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].size() != width) throw DimensionError("samples differ in size");
    std::copy(samples[i].data().begin(), samples[i].data().end(), out.row(i).begin());
  }
  return out;
}

std::vector<Tensor> unflatten_samples(const Tensor& matrix, std::size_t patches) {
  if (patches == 0 || matrix.cols() % patches != 0) {
    throw DataError("rows of width " + std::to_string(matrix.cols()) + " do not split into " +
                    std::to_string(patches) + " patches");
  }
  const std::size_t d = matrix.cols() / patches;
  std::vector<Tensor> out;
  out.reserve(matrix.rows());
  for (std::size_t i = 0; i < matrix.rows(); ++i) {
    auto r = matrix.row(i);
    out.emplace_back(std::vector<std::size_t>{patches, d}, std::vector<double>(r.begin(), r.end()));
  }
  return out;
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& v) {
    fs::path p(v);
    return p.is_absolute() ? p : base / p;
  };
  DatasetManifest m;
  bool have_source = false, have_target = false, have_classes = false;
  std::string line;
  for (std::size_t n = 1; std::getline(f, line); ++n) {
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ":" + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "format_version") {
        m.format_version = static_cast<std::uint32_t>(std::stoul(value));
      } else if (key == "classes") {
        m.class_names.clear();
        std::stringstream ss(value);
        for (std::string name; std::getline(ss, name, ',');) m.class_names.push_back(trim(name));
        have_classes = true;
      } else if (key == "feature_kind") {
        if (value == "raw_patches") m.kind = train::FeatureKind::raw_patches;
        else if (value == "embeddings") m.kind = train::FeatureKind::embeddings;
        else throw DataError("unknown feature_kind " + value);
      } else if (key == "n_patches") {
        m.n_patches = std::stoul(value);
      } else if (key == "source") {
        m.source = resolve(value);
        have_source = true;
      } else if (key == "target") {
        m.target = resolve(value);
        have_target = true;
      } else if (key == "anchors") {
        m.anchors = resolve(value);
      } else {
        throw DataError("unknown manifest key " + key);
      }
    } catch (const std::logic_error&) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": bad value for " + key);
    }
  }
  if (m.format_version != 1) throw DataError("unsupported manifest version " + std::to_string(m.format_version));
  if (!have_classes || !have_source || !have_target) {
    throw DataError(path.string() + ": manifest needs classes, source and target");
  }
  if (m.class_names.size() < 2) throw DataError(path.string() + ": need at least two classes");
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write manifest " + path.string());
  const fs::path base = path.parent_path();
  // Relative paths are already relative to the manifest's directory.
  auto rel = [&](const fs::path& p) {
    if (p.is_relative()) return p.generic_string();
    return fs::relative(p, fs::absolute(base.empty() ? fs::path(".") : base)).generic_string();
  };
  f << "format_version = " << m.format_version << "\n";
  f << "classes = ";
  for (std::size_t k = 0; k < m.class_names.size(); ++k) f << (k ? "," : "") << m.class_names[k];
  f << "\n";
  f << "feature_kind = " << (m.kind == train::FeatureKind::raw_patches ? "raw_patches" : "embeddings") << "\n";
  f << "n_patches = " << m.n_patches << "\n";
  f << "source = " << rel(m.source) << "  # labeled\n";
  f << "target = " << rel(m.target) << "  # unlabeled\n";
  if (m.anchors) f << "anchors = " << rel(*m.anchors) << "\n";
  if (!f) throw DataError("failed writing manifest " + path.string());
}

LoadedDataset load_dataset(const fs::path& manifest_path) {
  LoadedDataset out;
  out.manifest = read_manifest(manifest_path);
  const auto& m = out.manifest;
  const std::size_t k = m.classes();
  auto source = read_embeddings(m.source);
  if (!source.labels) throw DataError(m.source.string() + " has no labels; the source domain must be labeled");
  auto target = read_embeddings(m.target);
  if (target.labels) throw DataError(m.target.string() + " carries training labels; the target must be unlabeled");
  for (auto y : *source.labels) {
    if (y >= k) throw DataError("source label " + std::to_string(y) + " outside the manifest's " + std::to_string(k) +
                                " classes");
  }
  if (source.matrix.cols() != target.matrix.cols()) throw DataError("source and target rows differ in width");
  const std::size_t patches = m.kind == train::FeatureKind::raw_patches ? m.n_patches : 1;
  out.data.classes = k;
  out.data.kind = m.kind;
  out.data.source = unflatten_samples(source.matrix, patches);
  out.data.source_labels = *source.labels;
  out.data.target = unflatten_samples(target.matrix, patches);
  if (m.anchors) {
    auto records = read_file(*m.anchors);
    out.anchors = expect_matrix(records, 0, Section::weights, *m.anchors);
    if (out.anchors->rows() != k) throw DataError("anchor table rows do not match the class count");
  }
  return out;
}

void write_bank(const fs::path& path, const align::FeatureBank& bank) {
  std::vector<Record> records;
  append_bank(records, bank, Section::bank);
  write_file(path, records);
}

align::FeatureBank read_bank(const fs::path& path) {
  auto records = read_file(path);
  std::size_t i = 0;
  auto bank = parse_bank(records, i, Section::bank, path);
  if (i != records.size()) throw DataError(path.string() + ": trailing records after the bank");
  return bank;
}

void write_frozen_weights(const fs::path& path, const enc::FrozenWeights& weights) {
  std::vector<Record> records;
  records.push_back(Record::matrix(Section::weights, Tensor::scalar(weights.temperature)));
  for (const Tensor* t : weights.tensors()) records.push_back(Record::matrix(Section::weights, *t));
  write_file(path, records);
}

enc::FrozenWeights read_frozen_weights(const fs::path& path, const enc::EncoderConfig& config) {
  auto records = read_file(path);
  enc::FrozenWeights w = enc::FrozenWeights::random(config);
  auto slots = w.tensors();
  if (records.size() != slots.size() + 1) {
    throw DataError(path.string() + ": " + std::to_string(records.size()) + " weight records, expected " +
                    std::to_string(slots.size() + 1));
  }
  w.temperature = expect_matrix(records, 0, Section::weights, path).item();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    assign_checked(*slots[i], expect_matrix(records, i + 1, Section::weights, path),
                   path.string() + " weight #" + std::to_string(i));
  }
  return w;
}

void write_checkpoint(const fs::path& path, const train::CheckpointState& ck) {
  const auto& p = ck.state.prompts;
  std::vector<Record> records;
  std::vector<std::uint32_t> meta{kCheckpointLayout,
                                  static_cast<std::uint32_t>(p.text_context.size()),
                                  static_cast<std::uint32_t>(p.deep_visual.size()),
                                  lo(ck.global_step), hi(ck.global_step),
                                  lo(ck.next_epoch), hi(ck.next_epoch),
                                  lo(ck.seed), hi(ck.seed),
                                  lo(ck.config_hash), hi(ck.config_hash)};
  records.push_back(Record::integers(Section::checkpoint, meta));
  for (const Tensor* t : ck.state.tensors()) records.push_back(Record::matrix(Section::checkpoint, *t));
  const auto& ift = ck.state.ift;
  records.push_back(Record::matrix(Section::checkpoint,
                                   Tensor::from_rows({{ift.epsilon, ift.beta_source, ift.beta_target}})));
  append_bank(records, ck.banks.source, Section::checkpoint);
  append_bank(records, ck.banks.target, Section::checkpoint);
  records.push_back(Record::integers(Section::checkpoint, ck.banks.target_fallback));
  write_file(path, records);
}

train::CheckpointState read_checkpoint(const fs::path& path) {
  auto records = read_file(path);
  const auto& meta = expect_ids(records, 0, Section::checkpoint, path);
  if (meta.size() != 11 || meta[0] != kCheckpointLayout) throw DataError(path.string() + ": unknown checkpoint layout");
  train::CheckpointState ck;
  ck.global_step = join(meta[3], meta[4]);
  ck.next_epoch = join(meta[5], meta[6]);
  ck.seed = join(meta[7], meta[8]);
  ck.config_hash = join(meta[9], meta[10]);
  auto& p = ck.state.prompts;
  p.text_context.resize(meta[1]);
  p.deep_visual.resize(meta[2]);
  std::size_t i = 1;
  for (Tensor* t : ck.state.tensors()) *t = expect_matrix(records, i++, Section::checkpoint, path);
  const Tensor& scalars = expect_matrix(records, i++, Section::checkpoint, path);
  if (scalars.size() != 3) throw DataError(path.string() + ": malformed IFT scalars");
  ck.state.ift.epsilon = scalars(0, 0);
  ck.state.ift.beta_source = scalars(0, 1);
  ck.state.ift.beta_target = scalars(0, 2);
  try {
    ck.state.ift.validate();
  } catch (const Error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  ck.banks.source = parse_bank(records, i, Section::checkpoint, path);
  ck.banks.target = parse_bank(records, i, Section::checkpoint, path);
  ck.banks.target_fallback = expect_ids(records, i++, Section::checkpoint, path);
  if (i != records.size()) throw DataError(path.string() + ": trailing records in checkpoint");
  return ck;
}

}  // namespace pda::io
