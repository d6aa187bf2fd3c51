#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pda/numerics/tensor.hpp"

namespace pda::metrics {

using num::Tensor;

double accuracy(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels);

struct ClassDistanceStats {
  double d1 = 0.0;        // mean L2 distance to own-class centroid
  double d2 = 0.0;        // mean L2 distance to other-class centroids
  double variance = 0.0;  // mean squared L2 deviation from own-class centroid
  double r = 0.0;         // d2 / d1
  bool r_infinite = false;
  std::size_t classes_present = 0;
};

// Requires at least two classes with samples.
ClassDistanceStats class_distance_stats(const Tensor& features, std::span<const std::uint32_t> labels);

// Median of pairwise squared distances over the pooled rows; 1 when the
// median is zero.
double median_heuristic_bandwidth(const Tensor& x, const Tensor& y);

// Biased V-statistic MMD^2 with k(a, b) = exp(-|a - b|^2 / h).
double mmd_fixed_bandwidth(const Tensor& x, const Tensor& y, double bandwidth);
double mmd(const Tensor& x, const Tensor& y);

struct DiagonalGaussian {
  std::vector<double> mean;
  std::vector<double> variance;
};

inline constexpr double kVarianceRidge = 1e-6;

// Sample mean and population variance plus ridge, per dimension.
DiagonalGaussian fit_diagonal_gaussian(const Tensor& x, double ridge = kVarianceRidge);
double kl_divergence(const DiagonalGaussian& p, const DiagonalGaussian& q);
double kl_gaussian(const Tensor& x, const Tensor& y);

inline constexpr const char* kMmdEstimator = "mmd2-biased-rbf-median";
inline constexpr const char* kKlEstimator = "kl-diag-gaussian-ridge1e-6";

struct MetricRecord {
  std::string name;
  double value = 0.0;
  std::string estimator;
  std::string inputs;
  bool flagged_infinite = false;
};

// name<TAB>value<TAB>estimator<TAB>inputs; infinite values print as "inf"
// with the "flag=infinite" estimator suffix.
std::string format_record(const MetricRecord& r);

struct DomainFeatures {
  Tensor features;
  std::vector<std::uint32_t> labels;  // may be empty
  std::vector<std::uint32_t> predictions;  // may be empty
};

// Records for every metric computable from the inputs: per-domain
// accuracy and class statistics when labels exist, plus cross-domain mmd
// and kl.
std::vector<MetricRecord> metric_report(const DomainFeatures& source, const DomainFeatures& target,
                                        const std::string& source_name, const std::string& target_name);

}  // namespace pda::metrics
