#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "kore/rng.hpp"
#include "kore/tensor.hpp"

namespace kore {

// Differentiable ops over 1-D/2-D tensors. Each op computes its forward
// value and, when a tape is active and an input requires grad, records the
// matching backward closure. Shapes must match exactly; the only broadcasts
// are the explicit tile/scalar-tensor ops below.

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Tensor op plain scalar.
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// Tensor op scalar tensor (shape {1}); gradient flows into both.
Tensor mul_bc(const Tensor& a, const Tensor& s);
Tensor sub_bc(const Tensor& a, const Tensor& s);
Tensor div_bc(const Tensor& a, const Tensor& s);

// 2-D linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Broadcast builders: {1,d} -> {n,d} and {n,1} -> {n,d}.
Tensor tile_rows(const Tensor& row, std::size_t n);
Tensor tile_cols(const Tensor& col, std::size_t d);

// Reductions.
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis0(const Tensor& a);  // {n,d} -> {1,d}
Tensor sum_axis1(const Tensor& a);  // {n,d} -> {n,1}

// Row/column surgery.
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx);
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t len);
Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len);
Tensor concat_rows(const std::vector<Tensor>& parts);

// Segment ops keyed by a per-row segment id (GNN neighborhoods). Rows of a
// segment are processed in input order, so callers fix the order up front.
Tensor segment_softmax(const Tensor& scores, const std::vector<std::size_t>& seg,
                       std::size_t n_segments);
Tensor segment_sum(const Tensor& a, const std::vector<std::size_t>& seg,
                   std::size_t n_segments);

// Head folding: {e, g*k} -> {e, g} (sum each block of k columns) and back.
Tensor sum_col_groups(const Tensor& a, std::size_t n_groups);
Tensor repeat_cols(const Tensor& a, std::size_t k);

// Nonlinearities and norms.
Tensor softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor gelu(const Tensor& x);
Tensor rsqrt(const Tensor& x, double eps);

// Mean cross-entropy over masked positions of {t, vocab} logits.
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                            const std::vector<bool>& mask);

// Inverted-dropout on activations; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// Non-differentiating scalar helpers.
double cosine_sim(const std::vector<double>& a, const std::vector<double>& b);
double l2_norm(std::span<const double> v);

// Central-difference gradient oracle. Runs f under a fresh tape, backprops,
// then perturbs every element of every input by +/-h and compares. Relative
// error uses a 1e-4 floor so finite-difference noise on near-zero gradients
// does not register as failure.
double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                  double h = 1e-5);

}  // namespace kore
