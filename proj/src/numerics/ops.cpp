#include "pda/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pda/errors.hpp"

namespace pda::num {
namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimensionError(std::string(op) + " " + a.shape_string() + " and " + b.shape_string());
}

void require_row(const char* op, const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError(std::string(op) + " needs a 1x" + std::to_string(a.cols()) + " row, got " + row.shape_string());
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) throw DimensionError("matmul " + av.shape_string() + " by " + bv.shape_string());
  return tape.record(matmul_plain(av, bv), {a.id, b.id}, [a, b](const Tensor& g, Adjoints& adj) {
    if (adj.wants(a.id)) adj.add(a.id, matmul_plain(g, transpose_plain(b.value())));
    if (adj.wants(b.id)) adj.add(b.id, matmul_plain(transpose_plain(a.value()), g));
  });
}

Var transpose(Var a) {
  return a.tape->record(transpose_plain(a.value()), {a.id},
                        [a](const Tensor& g, Adjoints& adj) { adj.add(a.id, transpose_plain(g)); });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  return tape.record(a.value() + b.value(), {a.id, b.id}, [a, b](const Tensor& g, Adjoints& adj) {
    adj.add(a.id, g);
    adj.add(b.id, g);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  return tape.record(a.value() - b.value(), {a.id, b.id}, [a, b](const Tensor& g, Adjoints& adj) {
    adj.add(a.id, g);
    if (adj.wants(b.id)) adj.add(b.id, g * -1.0);
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape("mul", av, bv);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= bv.data()[i];
  return tape.record(std::move(out), {a.id, b.id}, [a, b](const Tensor& g, Adjoints& adj) {
    if (adj.wants(a.id)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.size(); ++i) ga.data()[i] *= b.value().data()[i];
      adj.add(a.id, ga);
    }
    if (adj.wants(b.id)) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.size(); ++i) gb.data()[i] *= a.value().data()[i];
      adj.add(b.id, gb);
    }
  });
}

Var scale(Var a, double s) {
  return a.tape->record(a.value() * s, {a.id}, [a, s](const Tensor& g, Adjoints& adj) { adj.add(a.id, g * s); });
}

Var add_row(Var a, Var row) {
  Tape& tape = same_tape(a, row);
  const Tensor& av = a.value();
  require_row("add_row", av, row.value());
  Tensor out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += row.value()(0, j);
  return tape.record(std::move(out), {a.id, row.id}, [a, row](const Tensor& g, Adjoints& adj) {
    adj.add(a.id, g);
    if (adj.wants(row.id)) {
      Tensor gr(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
      adj.add(row.id, gr);
    }
  });
}

Var mul_row(Var a, Var row) {
  Tape& tape = same_tape(a, row);
  const Tensor& av = a.value();
  require_row("mul_row", av, row.value());
  Tensor out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= row.value()(0, j);
  return tape.record(std::move(out), {a.id, row.id}, [a, row](const Tensor& g, Adjoints& adj) {
    const Tensor& rv = row.value();
    const Tensor& av = a.value();
    if (adj.wants(a.id)) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.rows(); ++i)
        for (std::size_t j = 0; j < ga.cols(); ++j) ga(i, j) *= rv(0, j);
      adj.add(a.id, ga);
    }
    if (adj.wants(row.id)) {
      Tensor gr(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j) * av(i, j);
      adj.add(row.id, gr);
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  Tape& tape = *parts[0].tape;
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    if (p.tape != &tape) throw ContractError("operands live on different tapes");
    if (p.cols() != cols) {
      throw DimensionError("concat_rows " + parts[0].value().shape_string() + " with " + p.value().shape_string());
    }
    rows += p.rows();
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + offset * cols);
    offset += p.rows();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return tape.record(std::move(out), std::move(ids), [saved](const Tensor& g, Adjoints& adj) {
    std::size_t offset = 0;
    const std::size_t cols = g.cols();
    for (const Var& p : saved) {
      const std::size_t r = p.rows();
      if (adj.wants(p.id)) {
        Tensor part(r, cols);
        auto first = g.data().begin() + static_cast<std::ptrdiff_t>(offset * cols);
        std::copy(first, first + static_cast<std::ptrdiff_t>(r * cols), part.data().begin());
        adj.add(p.id, part);
      }
      offset += r;
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  if (count == 0 || begin + count > av.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") of " +
                         av.shape_string());
  }
  const std::size_t cols = av.cols();
  Tensor out(count, cols);
  auto first = av.data().begin() + static_cast<std::ptrdiff_t>(begin * cols);
  std::copy(first, first + static_cast<std::ptrdiff_t>(count * cols), out.data().begin());
  return a.tape->record(std::move(out), {a.id}, [a, begin](const Tensor& g, Adjoints& adj) {
    Tensor full(a.rows(), a.cols());
    std::copy(g.data().begin(), g.data().end(), full.data().begin() + static_cast<std::ptrdiff_t>(begin * g.cols()));
    adj.add(a.id, full);
  });
}

Var layer_norm_rows(Var a, double eps) {
  const Tensor& av = a.value();
  const std::size_t n = av.cols();
  Tensor out(av.rows(), n);
  std::vector<double> inv_std(av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    auto r = av.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out(i, j) = (r[j] - mean) * inv_std[i];
  }
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(out), {a.id}, [a, self, inv_std](const Tensor& g, Adjoints& adj) {
    const Tensor& y = a.tape->value(self);
    const std::size_t n = g.cols();
    Tensor gx(g.rows(), n);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double mg = 0.0;
      double mgy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mg += g(i, j);
        mgy += g(i, j) * y(i, j);
      }
      mg /= static_cast<double>(n);
      mgy /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) gx(i, j) = inv_std[i] * (g(i, j) - mg - y(i, j) * mgy);
    }
    adj.add(a.id, gx);
  });
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2));
  return a.tape->record(std::move(out), {a.id}, [a](const Tensor& g, Adjoints& adj) {
    Tensor gx = g;
    const auto x = a.value().data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] / std::numbers::sqrt2));
      const double pdf = std::exp(-0.5 * x[i] * x[i]) / std::sqrt(2.0 * std::numbers::pi);
      gx.data()[i] *= cdf + x[i] * pdf;
    }
    adj.add(a.id, gx);
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.tape->record(std::move(out), {a.id}, [a](const Tensor& g, Adjoints& adj) {
    Tensor gx = g;
    const auto x = a.value().data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (!(x[i] > 0.0)) gx.data()[i] = 0.0;
    }
    adj.add(a.id, gx);
  });
}

Var softmax_rows(Var a, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax temperature must be positive, got " + std::to_string(temperature));
  const Tensor& av = a.value();
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    auto r = av.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double total = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      out(i, j) = std::exp((r[j] - mx) / temperature);
      total += out(i, j);
    }
    for (std::size_t j = 0; j < r.size(); ++j) out(i, j) /= total;
  }
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(out), {a.id}, [a, self, temperature](const Tensor& g, Adjoints& adj) {
    const Tensor& y = a.tape->value(self);
    Tensor gx(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) = y(i, j) * (g(i, j) - dot) / temperature;
    }
    adj.add(a.id, gx);
  });
}

Var l2_normalize_rows(Var a, double min_norm) {
  const Tensor& av = a.value();
  Tensor out = av;
  std::vector<double> norms(av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    norms[i] = row_norm(av.row(i));
    if (!(norms[i] >= min_norm)) {
      throw DegenerateInputError("row " + std::to_string(i) + " of " + av.shape_string() + " has norm " +
                                 std::to_string(norms[i]) + ", cannot normalize");
    }
    for (auto& v : out.row(i)) v /= norms[i];
  }
  const std::size_t self = a.tape->size();
  return a.tape->record(std::move(out), {a.id}, [a, self, norms](const Tensor& g, Adjoints& adj) {
    const Tensor& y = a.tape->value(self);
    Tensor gx(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) = (g(i, j) - y(i, j) * dot) / norms[i];
    }
    adj.add(a.id, gx);
  });
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  Tensor out(1, av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out(0, j) += av(i, j);
  const double inv = 1.0 / static_cast<double>(av.rows());
  out *= inv;
  return a.tape->record(std::move(out), {a.id}, [a, inv](const Tensor& g, Adjoints& adj) {
    Tensor gx(a.rows(), a.cols());
    for (std::size_t i = 0; i < gx.rows(); ++i)
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) = g(0, j) * inv;
    adj.add(a.id, gx);
  });
}

Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record(Tensor::scalar(s), {a.id}, [a](const Tensor& g, Adjoints& adj) {
    adj.add(a.id, Tensor(a.value().shape(), std::vector<double>(a.value().size(), g.item())));
  });
}

Var cosine_similarity(Var a, Var b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("cosine_similarity " + a.value().shape_string() + " vs " + b.value().shape_string());
  }
  return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

Var cross_entropy(Var probs, std::span<const std::uint32_t> labels, const std::vector<bool>& keep) {
  const Tensor& p = probs.value();
  if (labels.size() != p.rows() || keep.size() != p.rows()) {
    throw DimensionError("cross_entropy over " + p.shape_string() + " with " + std::to_string(labels.size()) +
                         " labels and " + std::to_string(keep.size()) + " mask entries");
  }
  std::size_t kept = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    if (labels[i] >= p.cols()) {
      throw DataError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(p.cols()) + " classes");
    }
    if (!keep[i]) continue;
    ++kept;
    total -= std::log(p(i, labels[i]));
  }
  if (kept == 0) return probs.tape->constant(Tensor::scalar(0.0));
  const double inv = 1.0 / static_cast<double>(kept);
  std::vector<std::uint32_t> saved_labels(labels.begin(), labels.end());
  return probs.tape->record(Tensor::scalar(total * inv), {probs.id},
                            [probs, saved_labels, keep, inv](const Tensor& g, Adjoints& adj) {
                              const Tensor& p = probs.value();
                              Tensor gp(p.rows(), p.cols());
                              for (std::size_t i = 0; i < p.rows(); ++i) {
                                if (!keep[i]) continue;
                                gp(i, saved_labels[i]) = -g.item() * inv / p(i, saved_labels[i]);
                              }
                              adj.add(probs.id, gp);
                            });
}

}  // namespace pda::num
