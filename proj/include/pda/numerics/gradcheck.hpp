#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "pda/numerics/tape.hpp"

namespace pda::num {

// Builds a scalar loss on `tape` from parameter leaves (one per tensor in the
// parameter list, same order). Must be a pure function of its inputs.
using LossGraph = std::function<Var(Tape& tape, std::span<const Var> params)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  // Location of the worst coordinate.
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_tape = 0.0;
  double worst_fd = 0.0;
};

// Compares tape gradients to central differences (f(θ+h e_i) - f(θ-h e_i)) / 2h
// for every coordinate; error per coordinate is |g_tape - g_fd| / max(1, |g_fd|).
// Throws DeterminismError if two evaluations at θ disagree bit-wise.
GradCheckResult finite_diff_check(const LossGraph& f, const std::vector<Tensor>& params, double h = 1e-6);

// Scalar-function form: g is the analytic gradient supplied by the caller.
double finite_diff_check(const std::function<double(std::span<const double>)>& f, std::span<const double> theta,
                         std::span<const double> analytic_grad, double h = 1e-6);

// Evaluates the loss and its gradients once; parameters are leaves in order.
std::pair<double, std::vector<Tensor>> value_and_grad(const LossGraph& f, const std::vector<Tensor>& params);

}  // namespace pda::num
