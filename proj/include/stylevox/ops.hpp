#pragma once

#include <array>
#include <vector>

#include "stylevox/tensor.hpp"

// Differentiable tensor primitives. Every op validates shapes, computes the
// forward result, and (when recording) attaches a vjp expressed in terms of
// other ops so the backward pass supports one extra level of differentiation.
// No implicit broadcasting: shapes must match exactly except where an op says
// otherwise (broadcast_axes, scalar ops).
namespace sv::ops {

// elementwise, same shape and dtype
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // errors on zero divisor

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);  // errors on negative input
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
// overflow-safe: max(x,0) + log1p(exp(-|x|))
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double alpha);

// shape manipulation
Tensor reshape(const Tensor& a, std::vector<int64_t> shape);
// expand axes whose input extent is 1 up to the target extent
Tensor broadcast_axes(const Tensor& a, const std::vector<int64_t>& to_shape);
// reductions keep reduced axes at extent 1
Tensor sum_axes(const Tensor& a, const std::vector<int>& axes);
Tensor mean_axes(const Tensor& a, const std::vector<int>& axes);
Tensor sum_all(const Tensor& a);   // -> shape [1]
Tensor mean_all(const Tensor& a);  // -> shape [1]
Tensor l2_norm_all(const Tensor& a);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len);
Tensor transpose01(const Tensor& a);  // swap axes 0 and 1
Tensor flip_spatial(const Tensor& a);  // reverse the last 3 axes of a rank-5 tensor

// zero-insertion upsampling of the last 3 axes: extent S -> (S-1)*stride + 1
Tensor dilate3d(const Tensor& a, int stride);
Tensor undilate3d(const Tensor& a, int stride);  // adjoint of dilate3d
Tensor crop3d(const Tensor& a, std::array<int64_t, 3> lo, std::array<int64_t, 3> size);
Tensor pad3d(const Tensor& a, std::array<int64_t, 3> lo, std::array<int64_t, 3> hi);

Tensor matmul(const Tensor& a, const Tensor& b);  // [N,K] x [K,M] -> [N,M]

// 3D cross-correlation with zero padding. input [N,C,D,H,W], weight
// [K,C,kd,kh,kw] (odd kernels), optional bias [K]. In f64 the accumulation
// order per output voxel is exactly (c, kd, kh, kw) followed by the bias, so
// results are bit-comparable against a nested-loop reference.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int pad);
inline Tensor conv3d(const Tensor& input, const Tensor& weight, int stride, int pad) {
  return conv3d(input, weight, Tensor(), stride, pad);
}

Tensor upsample_nearest3d(const Tensor& a, int factor);
Tensor avgpool3d(const Tensor& a, int factor);

// equalized-learning-rate dense layer:
// y = x * (w^T * lr_mul * sqrt(2/F_in)) + b * lr_mul
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b, double lr_mul = 1.0);

// z / sqrt(mean(z^2, axis=1) + eps) for z of shape [N, F]
Tensor pixel_norm(const Tensor& z, double eps = 1e-8);

}  // namespace sv::ops
