#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pda/numerics/tape.hpp"

namespace pda::num {

// Recorded primitives. Each one registers its adjoint on the tape of its
// inputs; all inputs of one op must live on the same tape.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// Adds / multiplies a 1xn row to every row of an mxn matrix.
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);

Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);

Var layer_norm_rows(Var a, double eps = 1e-5);
Var gelu(Var a);
Var relu(Var a);

// Row-wise softmax of a / temperature with per-row max subtraction.
Var softmax_rows(Var a, double temperature);
// Row-wise unit L2 normalization; a row with norm below min_norm is an error.
Var l2_normalize_rows(Var a, double min_norm = 1e-12);
Var mean_rows(Var a);
Var sum_all(Var a);

// m x n matrix of cosine similarities between rows of a and rows of b.
Var cosine_similarity(Var a, Var b);

// Mean over kept rows of -log probs[i, labels[i]]. An empty keep-set yields
// an exact 0 that carries no gradient.
Var cross_entropy(Var probs, std::span<const std::uint32_t> labels, const std::vector<bool>& keep);

}  // namespace pda::num
