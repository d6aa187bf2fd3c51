#pragma once

// Independent reference implementations used only by tests. They share no
// code with the library beyond the Tensor container.

#include <cmath>
#include <cstdint>
#include <vector>

#include "pda/alignment/alignment.hpp"

namespace oracle {

using pda::num::Tensor;
using Vec = std::vector<double>;

// Repeated linear scan: take the best remaining candidate (highest
// confidence, lowest id on ties) C times, sum in pick order, normalize.
inline Tensor brute_force_bank(const Tensor& features, const std::vector<double>& conf,
                               const std::vector<std::uint32_t>& labels, std::size_t classes, std::size_t shots,
                               std::vector<std::vector<std::size_t>>* picked = nullptr) {
  Tensor out(classes, features.cols());
  if (picked) picked->assign(classes, {});
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<bool> used(labels.size(), false);
    Vec sum(features.cols(), 0.0);
    std::size_t taken = 0;
    for (std::size_t s = 0; s < shots; ++s) {
      long best = -1;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != k || used[i]) continue;
        if (best < 0 || conf[i] > conf[static_cast<std::size_t>(best)]) best = static_cast<long>(i);
      }
      if (best < 0) break;
      used[static_cast<std::size_t>(best)] = true;
      if (picked) (*picked)[k].push_back(static_cast<std::size_t>(best));
      for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += features(static_cast<std::size_t>(best), j);
      ++taken;
    }
    for (auto& v : sum) v /= static_cast<double>(taken);
    double n = 0.0;
    for (double v : sum) n += v * v;
    n = std::sqrt(n);
    for (std::size_t j = 0; j < sum.size(); ++j) out(k, j) = sum[j] / n;
  }
  return out;
}

inline Vec mlp3(const pda::align::Mlp& m, const Vec& x) {
  Vec cur = x;
  for (std::size_t l = 0; l < 3; ++l) {
    Vec next(m.weight[l].cols(), 0.0);
    for (std::size_t j = 0; j < next.size(); ++j) {
      double a = m.bias[l](0, j);
      for (std::size_t i = 0; i < cur.size(); ++i) a += cur[i] * m.weight[l](i, j);
      next[j] = (l < 2 && a < 0.0) ? 0.0 : a;
    }
    cur = std::move(next);
  }
  return cur;
}

// softmax(q . k_j / eps) weighted sum of value rows, then f_post.
inline Vec attend_one(const Vec& q, const std::vector<Vec>& keys, const std::vector<Vec>& values, double eps,
                      const pda::align::Mlp& post) {
  Vec logits(keys.size());
  double mx = -1e300;
  for (std::size_t j = 0; j < keys.size(); ++j) {
    double dot = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) dot += q[i] * keys[j][i];
    logits[j] = dot / eps;
    mx = std::max(mx, logits[j]);
  }
  double z = 0.0;
  for (auto& l : logits) z += (l = std::exp(l - mx));
  Vec mixed(values[0].size(), 0.0);
  for (std::size_t j = 0; j < values.size(); ++j)
    for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] += logits[j] / z * values[j][i];
  return mlp3(post, mixed);
}

inline Vec add_norm(const Vec& a, const Vec& b) {
  Vec s(a.size());
  double n = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s[i] = a[i] + b[i];
    n += s[i] * s[i];
  }
  n = std::sqrt(n);
  for (auto& v : s) v /= n;
  return s;
}

inline Vec row(const Tensor& t, std::size_t r) { return Vec(t.row(r).begin(), t.row(r).end()); }

// projection -> attention -> add&norm -> beta fusion, one image row at a time.
inline Tensor ift(const Tensor& z, const Tensor& source_bank, const Tensor& target_bank,
                  const pda::align::IftParams& p) {
  std::vector<Vec> ks, kt;
  for (std::size_t k = 0; k < source_bank.rows(); ++k) ks.push_back(mlp3(p.pre, row(source_bank, k)));
  for (std::size_t k = 0; k < target_bank.rows(); ++k) kt.push_back(mlp3(p.pre, row(target_bank, k)));
  Tensor out(z.rows(), z.cols());
  for (std::size_t b = 0; b < z.rows(); ++b) {
    Vec zr = row(z, b);
    Vec q = mlp3(p.pre, zr);
    Vec vs = add_norm(attend_one(q, ks, ks, p.epsilon, p.post), zr);
    Vec vt = add_norm(attend_one(q, kt, kt, p.epsilon, p.post), zr);
    for (std::size_t j = 0; j < z.cols(); ++j) out(b, j) = p.beta_source * vs[j] + p.beta_target * vt[j];
  }
  return out;
}

}  // namespace oracle
