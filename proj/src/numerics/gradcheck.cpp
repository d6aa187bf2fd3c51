#include "pda/numerics/gradcheck.hpp"

#include <bit>
#include <cmath>
#include <cstdint>

#include "pda/errors.hpp"

namespace pda::num {
namespace {

double evaluate(const LossGraph& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.constant(p));
  return f(tape, leaves).value().item();
}

void check_step(double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ParameterError("finite-difference step must lie in [1e-7, 1e-3]");
}

}  // namespace

std::pair<double, std::vector<Tensor>> value_and_grad(const LossGraph& f, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.parameter(p));
  Var loss = f(tape, leaves);
  auto grads = tape.backward(loss);
  std::vector<Tensor> out;
  out.reserve(leaves.size());
  for (const Var& leaf : leaves) out.push_back(std::move(grads.at(leaf.id)));
  return {loss.value().item(), std::move(out)};
}

GradCheckResult finite_diff_check(const LossGraph& f, const std::vector<Tensor>& params, double h) {
  check_step(h);
  auto [value, grads] = value_and_grad(f, params);
  const double again = evaluate(f, params);
  if (std::bit_cast<std::uint64_t>(value) != std::bit_cast<std::uint64_t>(again)) {
    throw DeterminismError("loss evaluated twice at the same point gave different values");
  }

  GradCheckResult result;
  std::vector<Tensor> work = params;
  for (std::size_t t = 0; t < work.size(); ++t) {
    for (std::size_t i = 0; i < work[t].size(); ++i) {
      const double saved = work[t].data()[i];
      work[t].data()[i] = saved + h;
      const double up = evaluate(f, work);
      work[t].data()[i] = saved - h;
      const double down = evaluate(f, work);
      work[t].data()[i] = saved;

      const double fd = (up - down) / (2.0 * h);
      const double tape_g = grads[t].data()[i];
      const double err = std::abs(tape_g - fd) / std::max(1.0, std::abs(fd));
      ++result.coordinates;
      if (err > result.max_relative_error || std::isnan(err)) {
        result.max_relative_error = std::isnan(err) ? INFINITY : err;
        result.worst_tensor = t;
        result.worst_index = i;
        result.worst_tape = tape_g;
        result.worst_fd = fd;
      }
    }
  }
  return result;
}

double finite_diff_check(const std::function<double(std::span<const double>)>& f, std::span<const double> theta,
                         std::span<const double> analytic_grad, double h) {
  check_step(h);
  if (theta.size() != analytic_grad.size()) throw DimensionError("gradient length does not match parameter length");
  std::vector<double> work(theta.begin(), theta.end());
  const double a = f(work);
  const double b = f(work);
  if (std::bit_cast<std::uint64_t>(a) != std::bit_cast<std::uint64_t>(b)) {
    throw DeterminismError("function evaluated twice at the same point gave different values");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < work.size(); ++i) {
    const double saved = work[i];
    work[i] = saved + h;
    const double up = f(work);
    work[i] = saved - h;
    const double down = f(work);
    work[i] = saved;
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic_grad[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace pda::num
