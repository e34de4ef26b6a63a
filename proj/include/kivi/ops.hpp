#pragma once

// Differentiable operations on Tensor.
//
// Binary elementwise operations broadcast in two cases only: one operand is a
// scalar (a single element), or one operand's shape is a trailing suffix of
// the other's ("leading-axis" broadcasting, e.g. [n, d] + [d]). Anything else
// is a ShapeError.

#include <vector>

#include "kivi/rng.hpp"
#include "kivi/tensor.hpp"

namespace kivi {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);
Tensor operator/(const Tensor& a, const Tensor& b);
Tensor operator+(const Tensor& a, double b);
Tensor operator+(double a, const Tensor& b);
Tensor operator-(const Tensor& a, double b);
Tensor operator-(double a, const Tensor& b);
Tensor operator*(const Tensor& a, double b);
Tensor operator*(double a, const Tensor& b);
Tensor operator/(const Tensor& a, double b);
Tensor operator-(const Tensor& a);

Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // DomainError on x <= 0
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);  // DomainError on x < 0
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor digamma(const Tensor& x);  // DomainError on x <= 0
Tensor lgamma(const Tensor& x);   // DomainError on x <= 0
/// max(x, floor); gradient is zero where the floor is active.
Tensor clamp_min(const Tensor& x, double floor);

/// [n, k] x [k, m] -> [n, m]
Tensor matmul(const Tensor& a, const Tensor& b);
/// [s, n, k] x [s, k, m] -> [s, n, m]. Either operand may be a plain matrix,
/// shared across the batch.
Tensor batched_matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces one axis; the axis is removed from the result shape.
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Elements [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& x, Shape shape);
/// Row `i` of a matrix as a vector.
Tensor row(const Tensor& x, std::size_t i);

/// Standard normal draws as a constant.
Tensor standard_normal(const Shape& shape, Rng& rng);

enum class StdPolicy { strictly_positive, allow_zero };

/// mean + std * eps with eps ~ N(0, I) drawn from rng. mean and std broadcast
/// to `shape` under the leading-axis rule. Gradients flow to mean and std.
Tensor gaussian_sample(const Shape& shape, const Tensor& mean, const Tensor& std, Rng& rng,
                       StdPolicy policy = StdPolicy::strictly_positive);

}  // namespace kivi
