// Loss heads. Targets arrive as plain tensors (detached by construction),
// so no gradient ever flows toward teacher representations or labels.

#pragma once

#include "realm/ops.hpp"

namespace realm {

// masked reconstruction MSE: (1/B) sum_b (1/|M_b|) sum_{t in M_b} ||xhat - x||^2.
// Gradients at unmasked positions are exactly zero.
template <typename T>
NodePtr<T> cmae_loss(Tape<T>& tp, NodePtr<T> xhat, const Tensor<T>& target, const Tensor<uint8_t>& mask) {
    if (xhat->value.rank() != 3) fail("cmae_loss: expected (B,T,C)");
    const int64_t B = xhat->value.dim(0), Tn = xhat->value.dim(1), C = xhat->value.dim(2);
    if (!xhat->value.same_shape(target)) fail("cmae_loss: target shape mismatch");
    if (mask.rank() != 2 || mask.dim(0) != B || mask.dim(1) != Tn) fail("cmae_loss: mask must be (B,T)");
    std::vector<int64_t> m_count(static_cast<size_t>(B), 0);
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t t = 0; t < Tn; ++t) m_count[static_cast<size_t>(b)] += mask.at(b, t) ? 1 : 0;
        if (m_count[static_cast<size_t>(b)] == 0) fail("cmae_loss: empty mask in batch row " + std::to_string(b));
    }
    T loss = T(0);
    for (int64_t b = 0; b < B; ++b) {
        T acc = T(0);
        for (int64_t t = 0; t < Tn; ++t) {
            if (!mask.at(b, t)) continue;
            for (int64_t c = 0; c < C; ++c) {
                const T r = xhat->value.at(b, t, c) - target.at(b, t, c);
                acc += r * r;
            }
        }
        loss += acc / T(m_count[static_cast<size_t>(b)]);
    }
    loss /= T(B);
    Tensor<T> tgt = target;
    Tensor<uint8_t> m = mask;
    return tp.make(Tensor<T>::scalar(loss), "cmae_loss", {xhat},
                   [tgt = std::move(tgt), m = std::move(m), m_count = std::move(m_count), B, Tn, C](Tape<T>& t, auto& n) {
                       auto& gx = t.grad_of(n.parent[0]);
                       const T g = n.grad[0] / T(B);
                       for (int64_t b = 0; b < B; ++b) {
                           const T s = T(2) * g / T(m_count[static_cast<size_t>(b)]);
                           for (int64_t tt = 0; tt < Tn; ++tt) {
                               if (!m.at(b, tt)) continue;
                               for (int64_t c = 0; c < C; ++c)
                                   gx[(b * Tn + tt) * C + c] +=
                                       s * (n.parent[0]->value.at(b, tt, c) - tgt.at(b, tt, c));
                           }
                       }
                   });
}

// representation alignment: 1 - (1/T) sum_t cos(zs_t, zt_t), averaged over batch;
// norms clamped below at 1e-8. Teacher side is a plain tensor.
template <typename T>
NodePtr<T> cosine_align_loss(Tape<T>& tp, NodePtr<T> zs, const Tensor<T>& zt) {
    if (zs->value.rank() != 3) fail("cosine_align_loss: expected (B,T,d)");
    if (!zs->value.same_shape(zt)) fail("cosine_align_loss: teacher shape mismatch");
    const int64_t B = zs->value.dim(0), Tn = zs->value.dim(1), d = zs->value.dim(2);
    const T eps = T(1e-8);
    T acc = T(0);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < Tn; ++t) {
            const T* s = zs->value.ptr() + (b * Tn + t) * d;
            const T* w = zt.ptr() + (b * Tn + t) * d;
            T dot = T(0), ns = T(0), nt = T(0);
            for (int64_t j = 0; j < d; ++j) {
                dot += s[j] * w[j];
                ns += s[j] * s[j];
                nt += w[j] * w[j];
            }
            ns = std::max(std::sqrt(ns), eps);
            nt = std::max(std::sqrt(nt), eps);
            acc += dot / (ns * nt);
        }
    const T loss = T(1) - acc / T(B * Tn);
    Tensor<T> teach = zt;
    return tp.make(Tensor<T>::scalar(loss), "cosine_align_loss", {zs},
                   [teach = std::move(teach), B, Tn, d, eps](Tape<T>& t, auto& n) {
                       auto& gz = t.grad_of(n.parent[0]);
                       const T g = -n.grad[0] / T(B * Tn);  // d(1 - mean cos)/dcos = -1/(B T)
                       for (int64_t b = 0; b < B; ++b)
                           for (int64_t tt = 0; tt < Tn; ++tt) {
                               const T* s = n.parent[0]->value.ptr() + (b * Tn + tt) * d;
                               const T* w = teach.ptr() + (b * Tn + tt) * d;
                               T dot = T(0), ns2 = T(0), nt2 = T(0);
                               for (int64_t j = 0; j < d; ++j) {
                                   dot += s[j] * w[j];
                                   ns2 += s[j] * s[j];
                                   nt2 += w[j] * w[j];
                               }
                               const T ns = std::max(std::sqrt(ns2), eps);
                               const T nt = std::max(std::sqrt(nt2), eps);
                               const T inv = T(1) / (ns * nt);
                               const T cos_v = dot * inv;
                               // dcos/ds_j = w_j/(ns nt) - cos * s_j/ns^2
                               for (int64_t j = 0; j < d; ++j)
                                   gz[(b * Tn + tt) * d + j] += g * (w[j] * inv - cos_v * s[j] / (ns * ns));
                           }
                   });
}

// velocity task term: (1/B) sum_b (1/(2T)) sum_t ||v_t - vhat_t||^2
template <typename T>
NodePtr<T> velocity_mse(Tape<T>& tp, NodePtr<T> vhat, const Tensor<T>& v) {
    if (vhat->value.rank() != 3 || vhat->value.dim(2) != 2) fail("velocity_mse: expected (B,T,2)");
    if (!vhat->value.same_shape(v)) fail("velocity_mse: target shape mismatch");
    const int64_t B = vhat->value.dim(0), Tn = vhat->value.dim(1);
    T acc = T(0);
    for (int64_t i = 0; i < vhat->value.numel(); ++i) {
        const T r = vhat->value[i] - v[i];
        acc += r * r;
    }
    const T loss = acc / (T(2) * T(Tn) * T(B));
    Tensor<T> tgt = v;
    return tp.make(Tensor<T>::scalar(loss), "velocity_mse", {vhat}, [tgt = std::move(tgt), B, Tn](Tape<T>& t, auto& n) {
        auto& gv = t.grad_of(n.parent[0]);
        const T s = n.grad[0] / (T(Tn) * T(B));
        for (int64_t i = 0; i < gv.numel(); ++i) gv[i] += s * (n.parent[0]->value[i] - tgt[i]);
    });
}

// reconstruction term: (1/B) sum_b (1/T) sum_t ||x_t - xhat_t||^2
template <typename T>
NodePtr<T> recon_mse(Tape<T>& tp, NodePtr<T> xhat, const Tensor<T>& x) {
    if (xhat->value.rank() != 3) fail("recon_mse: expected (B,T,C)");
    if (!xhat->value.same_shape(x)) fail("recon_mse: target shape mismatch");
    const int64_t B = xhat->value.dim(0), Tn = xhat->value.dim(1);
    T acc = T(0);
    for (int64_t i = 0; i < xhat->value.numel(); ++i) {
        const T r = xhat->value[i] - x[i];
        acc += r * r;
    }
    const T loss = acc / (T(Tn) * T(B));
    Tensor<T> tgt = x;
    return tp.make(Tensor<T>::scalar(loss), "recon_mse", {xhat}, [tgt = std::move(tgt), B, Tn](Tape<T>& t, auto& n) {
        auto& gx = t.grad_of(n.parent[0]);
        const T s = T(2) * n.grad[0] / (T(Tn) * T(B));
        for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += s * (n.parent[0]->value[i] - tgt[i]);
    });
}

// plain row MSE for probes: (1/R) sum_r ||pred_r - tgt_r||^2
template <typename T>
NodePtr<T> mse_rows(Tape<T>& tp, NodePtr<T> pred, const Tensor<T>& target) {
    if (!pred->value.same_shape(target)) fail("mse_rows: shape mismatch");
    const int64_t d = pred->value.shape.back();
    const int64_t rows = pred->value.numel() / d;
    T acc = T(0);
    for (int64_t i = 0; i < pred->value.numel(); ++i) {
        const T r = pred->value[i] - target[i];
        acc += r * r;
    }
    const T loss = acc / T(rows);
    Tensor<T> tgt = target;
    return tp.make(Tensor<T>::scalar(loss), "mse_rows", {pred}, [tgt = std::move(tgt), rows](Tape<T>& t, auto& n) {
        auto& gp = t.grad_of(n.parent[0]);
        const T s = T(2) * n.grad[0] / T(rows);
        for (int64_t i = 0; i < gp.numel(); ++i) gp[i] += s * (n.parent[0]->value[i] - tgt[i]);
    });
}

}  // namespace realm
