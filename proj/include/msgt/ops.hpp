#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "msgt/tensor.hpp"

namespace msgt {

// Differentiable kernels over channel-last tensors. Every function is a pure
// function of its inputs; when grad mode is on and an input requires a
// gradient, the result carries a backward closure on the graph.

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

// General axis permutation: out.shape[i] == x.shape[perm[i]].
template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& perm);

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x, int axis0, int axis1);

// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n]; leading
// batch extents broadcast numpy-style.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// x[..., in] * weight[in, out] + bias[out]. bias may be undefined.
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias);

// Broadcasting elementwise arithmetic.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor);

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return mul(a, b);
}

// Max-subtracted softmax along `axis`.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis);

// Normalizes over the last axis, then applies gamma/beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5));

// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x);

// Cross-correlation on x[B, H, W, Cin] with weight[K, K, Cin, Cout].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias, int stride,
                      int padding);

Index conv_output_extent(Index in, int kernel, int stride, int padding);

using IndexTable = std::shared_ptr<const std::vector<Index>>;

// out.flat[k] = x.flat[(*index)[k]]; gradients scatter-add back.
template <typename Scalar>
Tensor<Scalar> gather(const Tensor<Scalar>& x, IndexTable index, Shape out_shape);

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis);

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index start, Index length);

// Zero-pads axis 1 at the end by pad_h and axis 2 at the end by pad_w.
template <typename Scalar>
Tensor<Scalar> pad_bottom_right(const Tensor<Scalar>& x, Index pad_h, Index pad_w);

// Mean over one axis; the axis is removed from the shape.
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis);

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> mean_all(const Tensor<Scalar>& x);

// Mean softmax cross-entropy over logits[B, K] with label smoothing.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& labels, Scalar smoothing = 0);

}  // namespace msgt
