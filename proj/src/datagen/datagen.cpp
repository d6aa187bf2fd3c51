#include "pda/datagen/datagen.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "pda/errors.hpp"

namespace pda::data {
namespace {

constexpr double kDegreesPerShift = 15.0;

num::Rng stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id)};
  return num::Rng(seq);
}

// Rows of `m` become orthonormal; fails on (numerically) dependent rows.
void orthonormalize_rows(Tensor& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto ri = m.row(i);
    for (std::size_t j = 0; j < i; ++j) {
      auto rj = m.row(j);
      double dot = 0.0;
      for (std::size_t c = 0; c < ri.size(); ++c) dot += ri[c] * rj[c];
      for (std::size_t c = 0; c < ri.size(); ++c) ri[c] -= dot * rj[c];
    }
    const double n = num::row_norm(ri);
    if (!(n > 1e-10)) throw DegenerateInputError("random basis is rank deficient");
    for (auto& v : ri) v /= n;
  }
}

Tensor apply_affine(const Tensor& x, const Tensor& rotation, const Tensor& translation) {
  // rows are patches: x R^T + s
  Tensor out = num::matmul_plain(x, num::transpose_plain(rotation));
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += translation(0, c);
  return out;
}

}  // namespace

void SyntheticShiftSpec::validate() const {
  if (classes < 2) throw ParameterError("synthetic data needs at least two classes");
  if (classes > d_in) {
    throw ParameterError("cannot place " + std::to_string(classes) + " orthogonal class means in " +
                         std::to_string(d_in) + " dimensions");
  }
  if (!(class_sep > 0.0)) throw ParameterError("class_sep must be positive");
  if (!(noise_std > 0.0)) throw ParameterError("noise_std must be positive");
  if (!(domain_shift >= 0.0)) throw ParameterError("domain_shift must be non-negative");
  if (n_source == 0) throw ParameterError("need at least one source sample per class");
  if (n_patches == 0) throw ParameterError("need at least one patch");
}

Tensor random_orthogonal(std::size_t d, num::Rng& rng) {
  Tensor q = Tensor::gaussian(d, d, 1.0, rng);
  orthonormalize_rows(q);
  return q;
}

SyntheticDataset generate_synthetic(const SyntheticShiftSpec& spec) {
  spec.validate();
  SyntheticDataset out;
  const std::size_t d = spec.d_in;

  auto mean_rng = stream(spec.seed, 0);
  out.class_means = Tensor::gaussian(spec.classes, d, 1.0, mean_rng);
  orthonormalize_rows(out.class_means);
  out.class_means *= spec.class_sep / std::numbers::sqrt2;

  auto shift_rng = stream(spec.seed, 1);
  const Tensor basis = random_orthogonal(d, shift_rng);
  const double theta = spec.domain_shift * kDegreesPerShift * std::numbers::pi / 180.0;
  Tensor planar = Tensor::identity(d);
  for (std::size_t i = 0; i + 1 < d; i += 2) {
    planar(i, i) = std::cos(theta);
    planar(i, i + 1) = -std::sin(theta);
    planar(i + 1, i) = std::sin(theta);
    planar(i + 1, i + 1) = std::cos(theta);
  }
  out.rotation = num::matmul_plain(num::transpose_plain(basis), num::matmul_plain(planar, basis));
  out.translation = Tensor::gaussian(1, d, 1.0, shift_rng);
  out.translation *= spec.domain_shift / num::row_norm(out.translation.data());

  auto draw = [&](num::Rng& rng, std::size_t k) {
    Tensor x = Tensor::gaussian(spec.n_patches, d, spec.noise_std, rng);
    for (std::size_t p = 0; p < spec.n_patches; ++p)
      for (std::size_t c = 0; c < d; ++c) x(p, c) += out.class_means(k, c);
    return x;
  };
  auto source_rng = stream(spec.seed, 2);
  for (std::size_t i = 0; i < spec.n_source * spec.classes; ++i) {
    const auto k = static_cast<std::uint32_t>(i % spec.classes);
    out.source.push_back(draw(source_rng, k));
    out.source_labels.push_back(k);
  }
  auto target_rng = stream(spec.seed, 3);
  for (std::size_t i = 0; i < spec.n_target * spec.classes; ++i) {
    const auto k = static_cast<std::uint32_t>(i % spec.classes);
    out.target.push_back(apply_affine(draw(target_rng, k), out.rotation, out.translation));
    out.target_labels.push_back(k);
  }
  return out;
}

}  // namespace pda::data
