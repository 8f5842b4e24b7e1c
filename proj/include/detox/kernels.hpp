#pragma once

// Dense kernels shared by the forward pass, backprop and the analysis tools.
//
// Every kernel exists twice: `serial::` is the plain reference loop nest and
// `omp::` splits the outermost independent loop across OpenMP threads. Each
// output element is reduced in the same fixed order in both variants, so the
// two are bit-identical regardless of thread count. The unqualified names in
// `detox::kernels` forward to the OpenMP variants.

#include <cstddef>
#include <span>

namespace detox::kernels {

// Fixed-order dot product (eight interleaved partial sums). Used everywhere a
// row-times-row reduction appears so that incremental decoding, full-sequence
// forward passes and analysis tools agree bit-for-bit.
template <class T>
T dot(const T* a, const T* b, std::size_t n);

template <class T>
T dot(std::span<const T> a, std::span<const T> b);

namespace serial {

// y[n,m] = x[n,k] * w[m,k]^T
template <class T>
void matmul_nt(const T* x, const T* w, T* y, std::size_t n, std::size_t k, std::size_t m);

// dx[n,k] += dy[n,m] * w[m,k]
template <class T>
void matmul_nn_acc(const T* dy, const T* w, T* dx, std::size_t n, std::size_t m, std::size_t k);

// dw[m,k] += dy[n,m]^T * x[n,k]
template <class T>
void matmul_tn_acc(const T* dy, const T* x, T* dw, std::size_t n, std::size_t m, std::size_t k);

}  // namespace serial

namespace omp {

template <class T>
void matmul_nt(const T* x, const T* w, T* y, std::size_t n, std::size_t k, std::size_t m);

template <class T>
void matmul_nn_acc(const T* dy, const T* w, T* dx, std::size_t n, std::size_t m, std::size_t k);

template <class T>
void matmul_tn_acc(const T* dy, const T* x, T* dw, std::size_t n, std::size_t m, std::size_t k);

}  // namespace omp

using omp::matmul_nn_acc;
using omp::matmul_nt;
using omp::matmul_tn_acc;

// tanh-approximated GELU and its derivative.
template <class T>
T gelu(T x);

template <class T>
T gelu_grad(T x);

// Gain-only layer norm over one row. Writes the normalized (pre-gain) row to
// `xhat` when non-null and returns 1/sqrt(var + eps).
template <class T>
T layer_norm_row(const T* x, const T* gain, T* y, T* xhat, std::size_t d);

inline constexpr double layer_norm_eps = 1e-5;

// In-place numerically stable softmax; returns log of the partition sum
// (max-shifted) so callers can form log-probabilities.
template <class T>
T softmax_inplace(T* x, std::size_t n);

// log(sum(exp(x)))
template <class T>
T log_sum_exp(const T* x, std::size_t n);

}  // namespace detox::kernels
