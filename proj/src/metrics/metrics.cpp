#include "pda/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "pda/errors.hpp"

namespace pda::metrics {
namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void check_pair(const Tensor& x, const Tensor& y, const char* metric, std::size_t min_rows) {
  if (x.rows() < min_rows || y.rows() < min_rows) {
    throw DataError(std::string(metric) + " needs at least " + std::to_string(min_rows) + " rows per input, got " +
                    std::to_string(x.rows()) + " and " + std::to_string(y.rows()));
  }
  if (x.cols() != y.cols()) {
    throw DataError(std::string(metric) + " inputs differ in width: " + x.shape_string() + " vs " + y.shape_string());
  }
}

double mean_kernel(const Tensor& a, const Tensor& b, double h) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) s += std::exp(-squared_distance(a.row(i), b.row(j)) / h);
  return s / static_cast<double>(a.rows() * b.rows());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double accuracy(std::span<const std::uint32_t> predictions, std::span<const std::uint32_t> labels) {
  if (predictions.size() != labels.size()) {
    throw DataError("accuracy over " + std::to_string(predictions.size()) + " predictions and " +
                    std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw DataError("accuracy of an empty set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

ClassDistanceStats class_distance_stats(const Tensor& features, std::span<const std::uint32_t> labels) {
  if (features.rows() != labels.size()) throw DataError("class statistics: features and labels differ in length");
  std::map<std::uint32_t, std::vector<double>> sums;
  std::map<std::uint32_t, std::size_t> counts;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& s = sums[labels[i]];
    s.resize(features.cols(), 0.0);
    auto row = features.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) s[c] += row[c];
    ++counts[labels[i]];
  }
  if (sums.size() < 2) throw DataError("inter-class distance D2 needs at least two classes present");
  for (auto& [k, s] : sums)
    for (auto& v : s) v /= static_cast<double>(counts[k]);

  ClassDistanceStats st;
  st.classes_present = sums.size();
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = features.row(i);
    for (const auto& [k, centroid] : sums) {
      const double sq = squared_distance(row, centroid);
      if (k == labels[i]) {
        st.d1 += std::sqrt(sq);
        st.variance += sq;
      } else {
        st.d2 += std::sqrt(sq);
        ++pairs;
      }
    }
  }
  const auto n = static_cast<double>(labels.size());
  st.d1 /= n;
  st.variance /= n;
  st.d2 /= static_cast<double>(pairs);
  if (st.d1 > 0.0) {
    st.r = st.d2 / st.d1;
  } else {
    st.r = std::numeric_limits<double>::infinity();
    st.r_infinite = true;
  }
  return st;
}

double median_heuristic_bandwidth(const Tensor& x, const Tensor& y) {
  check_pair(x, y, "bandwidth", 1);
  std::vector<std::span<const double>> pooled;
  for (std::size_t i = 0; i < x.rows(); ++i) pooled.push_back(x.row(i));
  for (std::size_t i = 0; i < y.rows(); ++i) pooled.push_back(y.row(i));
  std::vector<double> d;
  d.reserve(pooled.size() * (pooled.size() - 1) / 2);
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j) d.push_back(squared_distance(pooled[i], pooled[j]));
  const std::size_t mid = d.size() / 2;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid), d.end());
  double median = d[mid];
  if (d.size() % 2 == 0) {
    const double lower = *std::max_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  return median > 0.0 ? median : 1.0;
}

double mmd_fixed_bandwidth(const Tensor& x, const Tensor& y, double bandwidth) {
  check_pair(x, y, "mmd", 1);
  if (!(bandwidth > 0.0)) throw ParameterError("mmd bandwidth must be positive");
  const double v = mean_kernel(x, x, bandwidth) + mean_kernel(y, y, bandwidth) - 2.0 * mean_kernel(x, y, bandwidth);
  return std::max(v, 0.0);
}

double mmd(const Tensor& x, const Tensor& y) {
  check_pair(x, y, "mmd", 2);
  return mmd_fixed_bandwidth(x, y, median_heuristic_bandwidth(x, y));
}

DiagonalGaussian fit_diagonal_gaussian(const Tensor& x, double ridge) {
  if (x.rows() < 2) throw DataError("gaussian fit needs at least 2 samples, got " + std::to_string(x.rows()));
  DiagonalGaussian g;
  g.mean.assign(x.cols(), 0.0);
  g.variance.assign(x.cols(), 0.0);
  const auto n = static_cast<double>(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) g.mean[c] += x(i, c);
  for (auto& m : g.mean) m /= n;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) g.variance[c] += (x(i, c) - g.mean[c]) * (x(i, c) - g.mean[c]);
  for (auto& v : g.variance) v = v / n + ridge;
  return g;
}

double kl_divergence(const DiagonalGaussian& p, const DiagonalGaussian& q) {
  if (p.mean.size() != q.mean.size()) throw DataError("kl between gaussians of different dimension");
  double s = 0.0;
  for (std::size_t i = 0; i < p.mean.size(); ++i) {
    if (!(p.variance[i] > 0.0 && q.variance[i] > 0.0)) throw ParameterError("gaussian variances must be positive");
    const double dm = p.mean[i] - q.mean[i];
    s += std::log(q.variance[i] / p.variance[i]) + (p.variance[i] + dm * dm) / q.variance[i] - 1.0;
  }
  return std::max(0.5 * s, 0.0);
}

double kl_gaussian(const Tensor& x, const Tensor& y) {
  check_pair(x, y, "kl", 2);
  return kl_divergence(fit_diagonal_gaussian(x), fit_diagonal_gaussian(y));
}

std::string format_record(const MetricRecord& r) {
  std::string value = r.flagged_infinite ? "inf" : fmt(r.value);
  std::string estimator = r.estimator + (r.flagged_infinite ? ";flag=infinite" : "");
  return r.name + "\t" + value + "\t" + estimator + "\t" + r.inputs;
}

std::vector<MetricRecord> metric_report(const DomainFeatures& source, const DomainFeatures& target,
                                        const std::string& source_name, const std::string& target_name) {
  std::vector<MetricRecord> out;
  auto per_domain = [&](const DomainFeatures& d, const std::string& tag, const std::string& name) {
    if (d.labels.empty()) return;
    if (!d.predictions.empty()) {
      out.push_back({tag + ".accuracy", accuracy(d.predictions, d.labels), "fraction-correct", name});
    }
    auto st = class_distance_stats(d.features, d.labels);
    out.push_back({tag + ".d1", st.d1, "mean-l2-to-own-centroid", name});
    out.push_back({tag + ".d2", st.d2, "mean-l2-to-other-centroids", name});
    out.push_back({tag + ".inner_variance", st.variance, "mean-squared-l2-deviation", name});
    out.push_back({tag + ".r", st.r, "d2/d1", name, st.r_infinite});
  };
  per_domain(source, "source", source_name);
  per_domain(target, "target", target_name);
  const std::string both = source_name + " vs " + target_name;
  out.push_back({"mmd", mmd(source.features, target.features), kMmdEstimator, both});
  out.push_back({"kl", kl_gaussian(source.features, target.features), kKlEstimator, both});
  return out;
}

}  // namespace pda::metrics
