#include "detox/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace detox::kernels {

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
    T s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0;
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        s4 += a[i + 4] * b[i + 4];
        s5 += a[i + 5] * b[i + 5];
        s6 += a[i + 6] * b[i + 6];
        s7 += a[i + 7] * b[i + 7];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7));
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
    return dot(a.data(), b.data(), std::min(a.size(), b.size()));
}

namespace serial {

template <class T>
void matmul_nt(const T* x, const T* w, T* y, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) y[i * m + j] = dot(x + i * k, w + j * k, k);
}

template <class T>
void matmul_nn_acc(const T* dy, const T* w, T* dx, std::size_t n, std::size_t m, std::size_t k) {
    for (std::size_t i = 0; i < n; ++i) {
        T* out = dx + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const T g = dy[i * m + j];
            if (g == T(0)) continue;
            const T* row = w + j * k;
            for (std::size_t c = 0; c < k; ++c) out[c] += g * row[c];
        }
    }
}

template <class T>
void matmul_tn_acc(const T* dy, const T* x, T* dw, std::size_t n, std::size_t m, std::size_t k) {
    for (std::size_t j = 0; j < m; ++j) {
        T* out = dw + j * k;
        for (std::size_t i = 0; i < n; ++i) {
            const T g = dy[i * m + j];
            if (g == T(0)) continue;
            const T* row = x + i * k;
            for (std::size_t c = 0; c < k; ++c) out[c] += g * row[c];
        }
    }
}

}  // namespace serial

namespace omp {

template <class T>
void matmul_nt(const T* x, const T* w, T* y, std::size_t n, std::size_t k, std::size_t m) {
    const auto total = static_cast<std::ptrdiff_t>(n * m);
#pragma omp parallel for schedule(static) if (total * static_cast<std::ptrdiff_t>(k) > 32768)
    for (std::ptrdiff_t idx = 0; idx < total; ++idx) {
        const auto i = static_cast<std::size_t>(idx) / m;
        const auto j = static_cast<std::size_t>(idx) % m;
        y[i * m + j] = dot(x + i * k, w + j * k, k);
    }
}

template <class T>
void matmul_nn_acc(const T* dy, const T* w, T* dx, std::size_t n, std::size_t m, std::size_t k) {
    const auto rows = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (n * m * k > 32768)
    for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        T* out = dx + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const T g = dy[i * m + j];
            if (g == T(0)) continue;
            const T* row = w + j * k;
            for (std::size_t c = 0; c < k; ++c) out[c] += g * row[c];
        }
    }
}

template <class T>
void matmul_tn_acc(const T* dy, const T* x, T* dw, std::size_t n, std::size_t m, std::size_t k) {
    const auto cols = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (n * m * k > 32768)
    for (std::ptrdiff_t jj = 0; jj < cols; ++jj) {
        const auto j = static_cast<std::size_t>(jj);
        T* out = dw + j * k;
        for (std::size_t i = 0; i < n; ++i) {
            const T g = dy[i * m + j];
            if (g == T(0)) continue;
            const T* row = x + i * k;
            for (std::size_t c = 0; c < k; ++c) out[c] += g * row[c];
        }
    }
}

}  // namespace omp

template <class T>
T gelu(T x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
    constexpr T c = T(0.7978845608028654);
    const T inner = c * (x + T(0.044715) * x * x * x);
    const T t = std::tanh(inner);
    const T dinner = c * (T(1) + T(3 * 0.044715) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * dinner;
}

template <class T>
T layer_norm_row(const T* x, const T* gain, T* y, T* xhat, std::size_t d) {
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += x[c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) {
        const T dv = x[c] - mean;
        var += dv * dv;
    }
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + static_cast<T>(layer_norm_eps));
    for (std::size_t c = 0; c < d; ++c) {
        const T h = (x[c] - mean) * rstd;
        if (xhat) xhat[c] = h;
        y[c] = h * gain[c];
    }
    return rstd;
}

template <class T>
T softmax_inplace(T* x, std::size_t n) {
    const T mx = *std::max_element(x, x + n);
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - mx);
        sum += x[i];
    }
    const T inv = T(1) / sum;
    for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
    return std::log(sum) + mx;
}

template <class T>
T log_sum_exp(const T* x, std::size_t n) {
    const T mx = *std::max_element(x, x + n);
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
    return std::log(sum) + mx;
}

#define DETOX_KERNELS_INSTANTIATE(T)                                                              \
    template T dot<T>(const T*, const T*, std::size_t);                                           \
    template T dot<T>(std::span<const T>, std::span<const T>);                                    \
    template void serial::matmul_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);     \
    template void serial::matmul_nn_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t); \
    template void serial::matmul_tn_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t); \
    template void omp::matmul_nt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);        \
    template void omp::matmul_nn_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);    \
    template void omp::matmul_tn_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);    \
    template T gelu<T>(T);                                                                        \
    template T gelu_grad<T>(T);                                                                   \
    template T layer_norm_row<T>(const T*, const T*, T*, T*, std::size_t);                        \
    template T softmax_inplace<T>(T*, std::size_t);                                               \
    template T log_sum_exp<T>(const T*, std::size_t);

DETOX_KERNELS_INSTANTIATE(float)
DETOX_KERNELS_INSTANTIATE(double)

}  // namespace detox::kernels
