#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dvit/tensor.hpp"

namespace dvit {

// Differentiable tensor ops. Each records its backward onto the active tape
// when one exists and any input requires grad. Binary ops accept operands of
// equal shape, or a right operand whose shape is a suffix of the left's
// (leading axes broadcast, e.g. bias [d] onto [B,N,d] or pos-embed [1,N,d]
// onto [B,N,d]); the broadcast side's gradient sums over the leading axes.

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c);

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T c);

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape);

/// Swap two axes (copying transpose).
template <typename T>
TensorT<T> transpose(const TensorT<T>& a, std::int64_t axis_a, std::int64_t axis_b);

template <typename T>
TensorT<T> concat(const TensorT<T>& a, const TensorT<T>& b, std::int64_t axis);

template <typename T>
TensorT<T> slice(const TensorT<T>& a, std::int64_t axis, std::int64_t start, std::int64_t len);

/// Batched matrix product [..,m,k] x [..,k,n] -> [..,m,n]. Leading batch
/// dims must match, or one operand may omit them / use extent 1.
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

/// x @ w + bias, with x [..,k], w [k,n], bias [n] (bias optional).
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias);

template <typename T>
TensorT<T> gelu(const TensorT<T>& x);

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x);

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, std::int64_t axis);

template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-6));

/// Normalize each last-axis vector to unit length; vectors with norm < eps
/// are divided by eps instead (the zero vector maps to itself).
template <typename T>
TensorT<T> l2_normalize(const TensorT<T>& x, T eps = T(1e-12));

template <typename T>
TensorT<T> sum(const TensorT<T>& a);

template <typename T>
TensorT<T> mean(const TensorT<T>& a);

/// Mean negative log-softmax probability of the target class. logits are
/// [B,C] or [B,C,spatial...]; targets are row-major over [B,spatial...] and
/// must lie in [0,C) or equal ignore_index.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::int64_t>& targets,
                         std::int64_t ignore_index = -100);

/// Transposed 2-d convolution, kernel 3x3, stride 2, pad 1, output pad 1:
/// doubles the spatial extent. x [B,Cin,H,W], w [Cin,Cout,3,3], bias [Cout].
template <typename T>
TensorT<T> conv_transpose2d_s2(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias);

/// Bilinear upsample of [B,C,H,W] to [B,C,out_h,out_w] (half-pixel centers).
template <typename T>
TensorT<T> bilinear_upsample(const TensorT<T>& x, std::int64_t out_h, std::int64_t out_w);

/// Escape hatch for one-off ops: y_i = fwd(x_i); backward uses
/// gx_i = bwd(x_i, y_i) * gy_i. Exists mainly so tests can register an op
/// with a deliberately wrong derivative.
template <typename T>
TensorT<T> custom_unary(const TensorT<T>& x, std::function<T(T)> fwd, std::function<T(T, T)> bwd);

}  // namespace dvit
