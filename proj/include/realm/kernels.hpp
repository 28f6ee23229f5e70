// Scalar and small-vector math shared by the batched (tape) forward and the
// streaming single-step runtime. Both paths must call these same functions so
// step-by-step inference reproduces full-window outputs within precision.

#pragma once

#include <Eigen/Core>
#include <cmath>

#include "realm/tensor.hpp"

namespace realm::kern {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// y(R,out) = x(R,in) * W(out,in)^T
template <typename T>
void gemm_xwt(const T* x, const T* w, T* y, int64_t rows, int64_t in, int64_t out) {
    ConstMatMap<T> xm(x, rows, in);
    ConstMatMap<T> wm(w, out, in);
    MatMap<T> ym(y, rows, out);
    ym.noalias() = xm * wm.transpose();
}

// y(R,out) += x(R,in) * W(in,out)  [W given row-major as (in,out)]
template <typename T>
void gemm_accum_xw(const T* x, const T* w, T* y, int64_t rows, int64_t in, int64_t out) {
    ConstMatMap<T> xm(x, rows, in);
    ConstMatMap<T> wm(w, in, out);
    MatMap<T> ym(y, rows, out);
    ym.noalias() += xm * wm;
}

// dW(out,in) += dy(R,out)^T * x(R,in)
template <typename T>
void gemm_accum_dw(const T* dy, const T* x, T* dw, int64_t rows, int64_t in, int64_t out) {
    ConstMatMap<T> dym(dy, rows, out);
    ConstMatMap<T> xm(x, rows, in);
    MatMap<T> dwm(dw, out, in);
    dwm.noalias() += dym.transpose() * xm;
}

// bulk activations over contiguous spans, SIMD via Eigen's vectorized exp
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
void sigmoid_bulk(const T* x, T* y, int64_t n) {
    ConstArrMap<T> xm(x, n);
    ArrMap<T> ym(y, n);
    ym = T(1) / (T(1) + (-xm).exp());
}

template <typename T>
void silu_bulk(const T* x, T* y, int64_t n) {
    ConstArrMap<T> xm(x, n);
    ArrMap<T> ym(y, n);
    ym = xm / (T(1) + (-xm).exp());
}

// d/dx silu = s(x) (1 + x (1 - s(x)))
template <typename T>
void silu_grad_bulk(const T* x, T* y, int64_t n) {
    ConstArrMap<T> xm(x, n);
    ArrMap<T> ym(y, n);
    ym = T(1) / (T(1) + (-xm).exp());
    ym = ym * (T(1) + xm * (T(1) - ym));
}

template <typename T>
void exp_bulk(const T* x, T* y, int64_t n) {
    ConstArrMap<T> xm(x, n);
    ArrMap<T> ym(y, n);
    ym = xm.exp();
}

template <typename T>
void softplus_bulk(const T* x, T* y, int64_t n) {
    ConstArrMap<T> xm(x, n);
    ArrMap<T> ym(y, n);
    ym = (xm > T(30)).select(xm, (T(1) + xm.min(T(30)).exp()).log());
}

template <typename T>
inline T sigmoid(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
inline T silu(T x) { return x * sigmoid(x); }

template <typename T>
inline T silu_grad(T x) {
    T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}

// exact erf-based GELU
template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
inline T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
    return cdf + x * pdf;
}

template <typename T>
inline T softplus(T x) {
    if (x > T(30)) return x;
    if (x < T(-30)) return std::exp(x);
    return std::log1p(std::exp(x));
}

// inverse of softplus, used for Δ-bias initialization
template <typename T>
inline T softplus_inverse(T y) {
    return std::log(std::expm1(static_cast<double>(y)));
}

template <typename T>
inline void layernorm_1d(const T* x, const T* g, const T* b, T* y, int64_t d, T eps,
                         T* out_mean = nullptr, T* out_rstd = nullptr) {
    T mean = T(0);
    for (int64_t i = 0; i < d; ++i) mean += x[i];
    mean /= T(d);
    T var = T(0);
    for (int64_t i = 0; i < d; ++i) {
        T c = x[i] - mean;
        var += c * c;
    }
    var /= T(d);
    T rstd = T(1) / std::sqrt(var + eps);
    for (int64_t i = 0; i < d; ++i) y[i] = (x[i] - mean) * rstd * g[i] + b[i];
    if (out_mean) *out_mean = mean;
    if (out_rstd) *out_rstd = rstd;
}

// pair rotation angles: theta_i = base^(-2i/N), applied at position pos
template <typename T>
inline void rope_rotate_1d(const T* v, T* y, int64_t n, int64_t pos, T base) {
    for (int64_t i = 0; i < n / 2; ++i) {
        T theta = std::pow(base, T(-2) * T(i) / T(n));
        T a = T(pos) * theta;
        T c = std::cos(a), s = std::sin(a);
        y[2 * i] = c * v[2 * i] - s * v[2 * i + 1];
        y[2 * i + 1] = s * v[2 * i] + c * v[2 * i + 1];
    }
}

// One SSD recurrence step for a single head.
//   S(N,P) <- abar * S + bk (N) ⊗ u (P);   y(P) = S^T ck + D_h * u
template <typename T>
inline void ssd_step_head(T* __restrict S, const T* __restrict u, T abar, const T* __restrict bk,
                          const T* __restrict ck, T d_skip, T* __restrict y, int64_t n_state,
                          int64_t p_width) {
    for (int64_t p = 0; p < p_width; ++p) y[p] = d_skip * u[p];
    for (int64_t n = 0; n < n_state; ++n) {
        T* __restrict srow = S + n * p_width;
        const T bn = bk[n];
        const T cn = ck[n];
        for (int64_t p = 0; p < p_width; ++p) {
            T s = abar * srow[p] + bn * u[p];
            srow[p] = s;
            y[p] += cn * s;
        }
    }
}

}  // namespace realm::kern
