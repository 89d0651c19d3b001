#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "abmll/numerics/tensor.hpp"

namespace abmll::num {

// Binary elementwise ops accept equal shapes or a one-element operand on
// either side, which broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // DomainError on non-positive input
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);  // DomainError on non-positive input
Tensor softplus(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor gelu(const Tensor& a);  // tanh approximation

// Elementwise op with a caller-supplied derivative. Used for extensions and
// for fault-injection tests of the gradient checker.
Tensor map_unary(const Tensor& a, const std::function<double(double)>& f,
                 const std::function<double(double)>& df);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

Tensor matmul(const Tensor& a, const Tensor& b);
// x[n×in] · w[out×in]ᵀ → [n×out], i.e. z = W x applied row-wise.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

// Rows of `table` selected by `indices`.
Tensor embedding(const Tensor& table, std::span<const std::size_t> indices);
// x / rms(x) * gain, per row.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-5);
// Multi-head causal self-attention over [n×d] projections; position t attends
// to positions ≤ t only.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads);

Tensor softmax_rows(const Tensor& logits);
// Mean over rows of −log softmax(logits[r])[targets[r]], max-subtracted.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);

// Plain softmax over a vector of scores.
std::vector<double> softmax(std::span<const double> scores);

}  // namespace abmll::num
