#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "fever/ndgrad/array.hpp"
#include "fever/ndgrad/tape.hpp"

// Differentiable primitives. Every op checks shapes (ShapeError naming the op and
// the offending shapes), rejects non-finite outputs (NumericError) and, in train
// mode, records an analytic backward closure on the inputs' tape.
namespace fever::ndgrad {

using Rng = std::mt19937_64;

enum class Padding { same, valid };

inline constexpr double kNormEpsilon = 1e-12;

// Elementwise, identical shapes.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T factor);
template <typename T> Var<T> add_scalar(const Var<T>& x, T offset);
template <typename T> Var<T> relu(const Var<T>& x);

// x[..., d] + bias[d]
template <typename T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias);

// a[m,k] @ b[k,n]
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> transpose(const Var<T>& a);
// x[n,in] @ weight[out,in]^T + bias[out]
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

// NCHW input, OIHW weight, no bias. "same" pads so that out = ceil(in / stride).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, std::size_t stride, Padding padding);

// Per-channel batch normalisation over (N, H, W). In train mode uses biased batch
// statistics and updates the running estimates in place (unbiased variance);
// in eval mode uses the running estimates only.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Array<T>& running_mean,
                   Array<T>& running_var, T momentum = T(0.1), T eps = T(1e-5));

// [N,C,H,W] -> [N,C]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);

// Inverted dropout: train mode zeroes each element with probability rate and
// scales survivors by 1/(1-rate); eval mode is the identity.
template <typename T> Var<T> dropout(const Var<T>& x, double rate, Rng& rng);

// Along the last axis. Rows with norm <= eps map to zero with zero gradient.
template <typename T> Var<T> l2_normalize(const Var<T>& x, double eps = kNormEpsilon);
template <typename T> Var<T> softmax(const Var<T>& x);
template <typename T> Var<T> log_softmax(const Var<T>& x);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);
// Reduces the last axis.
template <typename T> Var<T> sum_last(const Var<T>& x);

// x[n,d] -> [n,n] with out[i,j] = |x_i - x_j|^2
template <typename T> Var<T> pairwise_sq_dist(const Var<T>& x);
// x[n,d] -> [n,n,d] with out[j,i,:] = x_i - x_j
template <typename T> Var<T> pairwise_diff(const Var<T>& x);
// a[B,m,k], b[B,n,k] -> [B,m,n] with out[b] = a[b] @ b[b]^T
template <typename T> Var<T> bmm_nt(const Var<T>& a, const Var<T>& b);

// sqrt(x) where x > eps, else 0 (zero gradient there too).
template <typename T> Var<T> safe_sqrt(const Var<T>& x, double eps = kNormEpsilon);
// x / s for a one-element s; yields zeros (and no gradient into s) when s <= eps.
template <typename T> Var<T> div_scalar(const Var<T>& x, const Var<T>& s, double eps = kNormEpsilon);
// Elementwise Huber (smooth L1) of a - b.
template <typename T> Var<T> huber(const Var<T>& a, const Var<T>& b, double delta = 1.0);

// Axis-0 selection / assembly; trailing dims are carried along.
template <typename T> Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> rows);
template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T> Var<T> slice_rows(const Var<T>& x, std::size_t begin, std::size_t end);
// 2-D concatenation along the last axis.
template <typename T> Var<T> concat_cols(const std::vector<Var<T>>& parts);
// x[n,k] -> [n] with out[i] = x[i, index[i]]
template <typename T> Var<T> pick(const Var<T>& x, std::span<const std::size_t> index);
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);

}  // namespace fever::ndgrad
