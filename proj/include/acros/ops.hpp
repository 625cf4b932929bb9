#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "acros/tensor.hpp"

namespace acros::ops {

// Value-level kernels shared by the measurement and diagnostic modules.
// Training-time differentiable variants live in tensorops.

// Stable softmax along `axis`. An optional boolean mask (same shape, or one
// slice of length shape[axis] applied to every slice) excludes entries, which
// come out exactly zero. A fully masked slice or non-finite input throws.
Tensor softmax(const Tensor& x, int axis, const std::vector<uint8_t>* mask = nullptr);

// Sum_i p_i log(p_i / q_i), with q floored at 1e-12 and p==0 terms dropped.
// Both inputs must be normalized within 1e-6.
double kl_divergence(const Tensor& p, const Tensor& q);

// Unit-normalize slices along `axis`; slices with norm < 1e-12 throw.
Tensor l2_normalize(const Tensor& v, int axis);

// u.v / (|u||v|), clamped to [-1, 1]; zero vectors throw.
double cosine(std::span<const float> u, std::span<const float> v);
double cosine_d(std::span<const double> u, std::span<const double> v);

// Singular values (descending) and cumulative variance fractions of the
// column-centered matrix H [n x d], computed by one-sided Jacobi in double.
// cumvar[k] is the energy fraction captured by the top k+1 values;
// cumvar.back() == 1 within 1e-6.
struct SvdCumvar {
  std::vector<double> singular_values;
  std::vector<double> cumvar;
};
SvdCumvar svd_cumvariance(const std::vector<double>& h, int n, int d);
SvdCumvar svd_cumvariance(const Tensor& h);

// log sum_i exp(x_i), max-subtracted.
double logsumexp(std::span<const float> x);

// softmax of a single row into a double vector.
std::vector<double> softmax_row(std::span<const float> x);

// KL(p || q) for two dense probability rows (no validation; used on softmax
// outputs where normalization holds by construction).
double kl_rows(std::span<const double> p, std::span<const double> q);

int argmax_row(std::span<const float> x);

}  // namespace acros::ops
