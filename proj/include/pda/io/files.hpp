#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pda/io/container.hpp"
#include "pda/training/training.hpp"

namespace pda::io {

namespace fs = std::filesystem;

struct EmbeddingSet {
  Tensor matrix;
  std::optional<std::vector<std::uint32_t>> labels;
};

// One embeddings record, then an optional labels record and an optional
// evaluation-only labels record.
void write_embeddings(const fs::path& path, const Tensor& matrix, const std::vector<std::uint32_t>* labels = nullptr,
                      DType dtype = DType::f64, const std::vector<std::uint32_t>* eval_labels = nullptr);
// Never decodes evaluation-only labels.
EmbeddingSet read_embeddings(const fs::path& path);
std::vector<std::uint32_t> read_eval_labels(const fs::path& path);

// Samples of shape p x d are stored as rows of length p * d.
Tensor flatten_samples(std::span<const Tensor> samples);
std::vector<Tensor> unflatten_samples(const Tensor& matrix, std::size_t patches);

struct DatasetManifest {
  std::uint32_t format_version = 1;
  std::vector<std::string> class_names;
  train::FeatureKind kind = train::FeatureKind::raw_patches;
  std::size_t n_patches = 1;
  fs::path source;             // labeled
  fs::path target;             // unlabeled; may carry an evaluation-only section
  std::optional<fs::path> anchors;  // class token table for the text tower

  std::size_t classes() const { return class_names.size(); }
};

// Plain "key = value" text. Relative paths in the file resolve against the
// manifest's directory; the reader returns them joined to it. The writer
// stores relative paths verbatim, so they must already be relative to the
// manifest's directory.
DatasetManifest read_manifest(const fs::path& path);
void write_manifest(const fs::path& path, const DatasetManifest& manifest);

struct LoadedDataset {
  DatasetManifest manifest;
  train::UdaData data;
  std::optional<Tensor> anchors;
};

// Reads the training view: source with labels, target without labels.
// Validates headers, label ranges and sample shapes.
LoadedDataset load_dataset(const fs::path& manifest_path);

void write_bank(const fs::path& path, const align::FeatureBank& bank);
align::FeatureBank read_bank(const fs::path& path);

void write_frozen_weights(const fs::path& path, const enc::FrozenWeights& weights);
// Shapes are checked against the configuration.
enc::FrozenWeights read_frozen_weights(const fs::path& path, const enc::EncoderConfig& config);

void write_checkpoint(const fs::path& path, const train::CheckpointState& checkpoint);
train::CheckpointState read_checkpoint(const fs::path& path);

}  // namespace pda::io
