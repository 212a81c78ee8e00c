#pragma once

#include <span>
#include <vector>

#include "ccm/autograd.hpp"

namespace ccm {

enum class DistanceKind { L1, L2 };

// Elementwise and structural ops. Image tensors are [B, C, H, W]; feature
// tensors are [B, F]. Every op validates shapes and throws ShapeError.

template <class T> BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b);
template <class T> BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b);
template <class T> BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b);
template <class T> BasicVar<T> scale(const BasicVar<T>& a, T s);
template <class T> BasicVar<T> silu(const BasicVar<T>& a);
template <class T> BasicVar<T> reshape(const BasicVar<T>& a, Shape s);

// y[b, ...] = coef[b] * x[b, ...] with constant coefficients.
template <class T>
BasicVar<T> mul_per_sample(const BasicVar<T>& x, std::span<const T> coef);

// Stride-1 convolution with symmetric zero padding; w is [Co, Ci, k, k].
template <class T>
BasicVar<T> conv2d(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias, int pad);

template <class T> BasicVar<T> avg_pool2(const BasicVar<T>& x);
template <class T> BasicVar<T> upsample_nearest2(const BasicVar<T>& x);

// Concatenation along dim 1 (channels or features).
template <class T> BasicVar<T> concat1(const BasicVar<T>& a, const BasicVar<T>& b);

template <class T>
BasicVar<T> group_norm(const BasicVar<T>& x, const BasicVar<T>& gamma, const BasicVar<T>& beta,
                       int groups, T eps);

// x [B, In], w [Out, In], bias [Out].
template <class T>
BasicVar<T> linear(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias);

// table [V, D] gathered by labels -> [B, D].
template <class T>
BasicVar<T> embedding(const BasicVar<T>& table, std::span<const int> labels);

// x [B, C, ...] modulated by ss [B, 2C]: x * (1 + ss[:, :C]) + ss[:, C:].
template <class T> BasicVar<T> scale_shift(const BasicVar<T>& x, const BasicVar<T>& ss);

template <class T> BasicVar<T> sum(const BasicVar<T>& a);
template <class T> BasicVar<T> mean(const BasicVar<T>& a);
template <class T> BasicVar<T> mse(const BasicVar<T>& a, const BasicVar<T>& b);

// Per-sample distance averaged over that sample's elements -> [B].
template <class T>
BasicVar<T> distance_per_sample(const BasicVar<T>& a, const BasicVar<T>& b, DistanceKind kind);

// sum_b w[b] * v[b] / B for v of shape [B].
template <class T>
BasicVar<T> weighted_mean(const BasicVar<T>& v, std::span<const T> w);

}  // namespace ccm
