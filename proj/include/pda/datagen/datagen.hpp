#pragma once

#include <cstdint>
#include <vector>

#include "pda/numerics/tensor.hpp"

namespace pda::data {

using num::Tensor;

struct SyntheticShiftSpec {
  std::size_t classes = 5;
  std::size_t n_source = 40;  // per class
  std::size_t n_target = 40;  // per class
  std::size_t d_in = 32;
  std::size_t n_patches = 9;
  double class_sep = 4.0;
  double domain_shift = 3.0;
  double noise_std = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticDataset {
  Tensor class_means;  // K x d_in, shared by both domains before the transform
  Tensor rotation;     // d_in x d_in, applied to target samples
  Tensor translation;  // 1 x d_in, norm = domain_shift
  std::vector<Tensor> source;  // n_patches x d_in each
  std::vector<std::uint32_t> source_labels;
  std::vector<Tensor> target;
  std::vector<std::uint32_t> target_labels;  // evaluation only
};

// Class means: orthonormal directions scaled so every pair is exactly
// class_sep apart. Source patch = mean + noise; target patch =
// R (mean + noise) + s, where R rotates every plane of a seeded basis by
// domain_shift * 15 degrees and s is a seeded direction of length
// domain_shift. Labels are interleaved (sample i has class i mod K).
SyntheticDataset generate_synthetic(const SyntheticShiftSpec& spec);

// Seeded d x d orthogonal matrix (Gram-Schmidt of a Gaussian matrix).
Tensor random_orthogonal(std::size_t d, num::Rng& rng);

}  // namespace pda::data
