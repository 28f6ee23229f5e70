// Structured signal ops: the tokenizer convolutions and channel attention,
// the depthwise causal conv, RoPE key rotation, and the SSD scan with its
// hand-derived backward through the unrolled recurrence.

#pragma once

#include <memory>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "realm/ops.hpp"

namespace realm {

// ---------------------------------------------------------------------------
// Per-channel temporal conv: X (B,C,T) -> (B,C,dch,T), weights (dch,K) shared
// across channels. centered: taps t-K/2 .. t+K/2; causal: taps t-K+1 .. t.
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t conv_offset(int64_t K, bool causal) { return causal ? K - 1 : K / 2; }

}  // namespace detail

template <typename T>
NodePtr<T> tcn_conv(Tape<T>& tp, NodePtr<T> x, NodePtr<T> w, NodePtr<T> b, bool causal) {
    if (x->value.rank() != 3) fail("tcn_conv: expected X (B,C,T)");
    if (w->value.rank() != 2) fail("tcn_conv: expected W (dch,K)");
    const int64_t B = x->value.dim(0), C = x->value.dim(1), Tn = x->value.dim(2);
    const int64_t dch = w->value.dim(0), K = w->value.dim(1);
    if (b->value.numel() != dch) fail("tcn_conv: bias size mismatch");
    const int64_t off = detail::conv_offset(K, causal);
    Tensor<T> out({B, C, dch, Tn});
#pragma omp parallel for schedule(static) if (B * C > 1)
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* xr = x->value.ptr() + bc * Tn;
        T* orow = out.ptr() + bc * dch * Tn;
        for (int64_t d = 0; d < dch; ++d)
            for (int64_t t = 0; t < Tn; ++t) {
                T acc = b->value[d];
                for (int64_t k = 0; k < K; ++k) {
                    const int64_t ti = t + k - off;
                    if (ti >= 0 && ti < Tn) acc += w->value.at(d, k) * xr[ti];
                }
                orow[d * Tn + t] = acc;
            }
    }
    return tp.make(std::move(out), "tcn_conv", {x, w, b}, [B, C, Tn, dch, K, off](Tape<T>& t, auto& n) {
        NodePtr<T> x = n.parent[0], w = n.parent[1], b = n.parent[2];
        Tensor<T>* gx = x->needs_grad ? &t.grad_of(x) : nullptr;
        Tensor<T>* gw = w->needs_grad ? &t.grad_of(w) : nullptr;
        Tensor<T>* gb = b->needs_grad ? &t.grad_of(b) : nullptr;
        for (int64_t bc = 0; bc < B * C; ++bc) {
            const T* xr = x->value.ptr() + bc * Tn;
            const T* grow = n.grad.ptr() + bc * dch * Tn;
            for (int64_t d = 0; d < dch; ++d)
                for (int64_t tt = 0; tt < Tn; ++tt) {
                    const T g = grow[d * Tn + tt];
                    if (gb) (*gb)[d] += g;
                    for (int64_t k = 0; k < K; ++k) {
                        const int64_t ti = tt + k - off;
                        if (ti < 0 || ti >= Tn) continue;
                        if (gw) (*gw)[d * K + k] += g * xr[ti];
                        if (gx) (*gx)[bc * Tn + ti] += g * w->value.at(d, k);
                    }
                }
        }
    });
}

// ---------------------------------------------------------------------------
// 1D conv over the channel axis (ECA attention), zero-padded. e is (B,C) or
// (B,C,Tt); the conv mixes neighbouring channels identically per trailing t.
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> chan_conv(Tape<T>& tp, NodePtr<T> e, NodePtr<T> w) {
    const int rank = e->value.rank();
    if (rank != 2 && rank != 3) fail("chan_conv: expected (B,C) or (B,C,T)");
    const int64_t B = e->value.dim(0), C = e->value.dim(1);
    const int64_t Tt = rank == 3 ? e->value.dim(2) : 1;
    const int64_t k = w->value.numel(), off = k / 2;
    Tensor<T> out(e->value.shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t t = 0; t < Tt; ++t) {
                T acc = T(0);
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t ci = c + j - off;
                    if (ci >= 0 && ci < C) acc += w->value[j] * e->value[(b * C + ci) * Tt + t];
                }
                out[(b * C + c) * Tt + t] = acc;
            }
    return tp.make(std::move(out), "chan_conv", {e, w}, [B, C, Tt, k, off](Tape<T>& t, auto& n) {
        NodePtr<T> e = n.parent[0], w = n.parent[1];
        Tensor<T>* ge = e->needs_grad ? &t.grad_of(e) : nullptr;
        Tensor<T>* gw = w->needs_grad ? &t.grad_of(w) : nullptr;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t tt = 0; tt < Tt; ++tt) {
                    const T g = n.grad[(b * C + c) * Tt + tt];
                    for (int64_t j = 0; j < k; ++j) {
                        const int64_t ci = c + j - off;
                        if (ci < 0 || ci >= C) continue;
                        if (gw) (*gw)[j] += g * e->value[(b * C + ci) * Tt + tt];
                        if (ge) (*ge)[(b * C + ci) * Tt + tt] += g * w->value[j];
                    }
                }
    });
}

// ---------------------------------------------------------------------------
// ECA channel-energy descriptor. Bidirectional: mean over (dch, T) -> (B,C).
// Causal: running mean over steps 1..t -> (B,C,T), accumulated sequentially
// so the streaming runtime reproduces it exactly.
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> eca_energy(Tape<T>& tp, NodePtr<T> h, bool causal) {
    if (h->value.rank() != 4) fail("eca_energy: expected (B,C,dch,T)");
    const int64_t B = h->value.dim(0), C = h->value.dim(1), dch = h->value.dim(2), Tn = h->value.dim(3);
    if (!causal) {
        Tensor<T> out({B, C});
        const T inv = T(1) / T(dch * Tn);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                T acc = T(0);
                const T* base = h->value.ptr() + (b * C + c) * dch * Tn;
                for (int64_t i = 0; i < dch * Tn; ++i) acc += base[i];
                out.at(b, c) = acc * inv;
            }
        return tp.make(std::move(out), "eca_energy", {h}, [B, C, dch, Tn, inv](Tape<T>& t, auto& n) {
            auto& gh = t.grad_of(n.parent[0]);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    const T g = n.grad.at(b, c) * inv;
                    T* base = gh.ptr() + (b * C + c) * dch * Tn;
                    for (int64_t i = 0; i < dch * Tn; ++i) base[i] += g;
                }
        });
    }
    Tensor<T> out({B, C, Tn});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
            const T* base = h->value.ptr() + (b * C + c) * dch * Tn;
            T run = T(0);
            for (int64_t t = 0; t < Tn; ++t) {
                T step = T(0);
                for (int64_t d = 0; d < dch; ++d) step += base[d * Tn + t];
                run += step;
                out.at(b, c, t) = run / (T(dch) * T(t + 1));
            }
        }
    return tp.make(std::move(out), "eca_energy_causal", {h}, [B, C, dch, Tn](Tape<T>& t, auto& n) {
        auto& gh = t.grad_of(n.parent[0]);
        // dH[.,tau] receives sum over t >= tau of de_t / (dch*(t+1)): a suffix scan
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                T* base = gh.ptr() + (b * C + c) * dch * Tn;
                T suffix = T(0);
                for (int64_t tt = Tn - 1; tt >= 0; --tt) {
                    suffix += n.grad.at(b, c, tt) / (T(dch) * T(tt + 1));
                    for (int64_t d = 0; d < dch; ++d) base[d * Tn + tt] += suffix;
                }
            }
    });
}

// H~ = a ⊙ H, a broadcast over (dch[,T]); a is (B,C) or (B,C,T)
template <typename T>
NodePtr<T> scale_channels(Tape<T>& tp, NodePtr<T> h, NodePtr<T> a) {
    if (h->value.rank() != 4) fail("scale_channels: expected H (B,C,dch,T)");
    const int64_t B = h->value.dim(0), C = h->value.dim(1), dch = h->value.dim(2), Tn = h->value.dim(3);
    const bool per_step = a->value.rank() == 3;
    if (per_step) {
        if (a->value.dim(0) != B || a->value.dim(1) != C || a->value.dim(2) != Tn) fail("scale_channels: a shape");
    } else if (a->value.rank() != 2 || a->value.dim(0) != B || a->value.dim(1) != C) {
        fail("scale_channels: a must be (B,C) or (B,C,T)");
    }
    Tensor<T> out(h->value.shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < dch; ++d)
                for (int64_t t = 0; t < Tn; ++t) {
                    const T av = per_step ? a->value.at(b, c, t) : a->value.at(b, c);
                    out.at(b, c, d, t) = av * h->value.at(b, c, d, t);
                }
    return tp.make(std::move(out), "scale_channels", {h, a}, [B, C, dch, Tn, per_step](Tape<T>& t, auto& n) {
        NodePtr<T> h = n.parent[0], a = n.parent[1];
        Tensor<T>* gh = h->needs_grad ? &t.grad_of(h) : nullptr;
        Tensor<T>* ga = a->needs_grad ? &t.grad_of(a) : nullptr;
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t d = 0; d < dch; ++d)
                    for (int64_t tt = 0; tt < Tn; ++tt) {
                        const T g = n.grad.at(b, c, d, tt);
                        const T av = per_step ? a->value.at(b, c, tt) : a->value.at(b, c);
                        if (gh) gh->at(b, c, d, tt) += g * av;
                        if (ga) {
                            const int64_t ai = per_step ? (b * C + c) * Tn + tt : b * C + c;
                            (*ga)[ai] += g * h->value.at(b, c, d, tt);
                        }
                    }
    });
}

// (B,C,dch,T) -> (B,T,C*dch) with feature index c*dch + d
template <typename T>
NodePtr<T> flatten_cd(Tape<T>& tp, NodePtr<T> h) {
    if (h->value.rank() != 4) fail("flatten_cd: expected (B,C,dch,T)");
    const int64_t B = h->value.dim(0), C = h->value.dim(1), dch = h->value.dim(2), Tn = h->value.dim(3);
    Tensor<T> out({B, Tn, C * dch});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < dch; ++d)
                for (int64_t t = 0; t < Tn; ++t) out.at(b, t, c * dch + d) = h->value.at(b, c, d, t);
    return tp.make(std::move(out), "flatten_cd", {h}, [B, C, dch, Tn](Tape<T>& t, auto& n) {
        auto& gh = t.grad_of(n.parent[0]);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t d = 0; d < dch; ++d)
                    for (int64_t tt = 0; tt < Tn; ++tt) gh.at(b, c, d, tt) += n.grad.at(b, tt, c * dch + d);
    });
}

// ---------------------------------------------------------------------------
// Fused tokenizer front-end: TCN -> GELU -> ECA -> flatten, producing
// (B,T,C*dch) without materializing the (B,C,dch,T) intermediates on the
// tape. Backward recomputes them from the raw input; at training batch sizes
// the composed path would hold ~1 GB of activations, the fused op ~50 MB.
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> tokenizer_frontend(Tape<T>& tp, NodePtr<T> x, NodePtr<T> wt, NodePtr<T> bt, NodePtr<T> we,
                              bool causal) {
    if (x->value.rank() != 3) fail("tokenizer_frontend: expected X (B,C,T)");
    const int64_t B = x->value.dim(0), C = x->value.dim(1), Tn = x->value.dim(2);
    const int64_t dch = wt->value.dim(0), K = wt->value.dim(1);
    const int64_t k = we->value.numel(), koff = k / 2;
    const int64_t off = detail::conv_offset(K, causal);

    // shared forward: fills H (C,dch,T), e ((C) or (C,T)), a per sample; out rows optional
    auto run_sample = [C, Tn, dch, K, k, koff, off, causal](const T* xb, const T* wtv, const T* btv,
                                                            const T* wev, T* Hb, T* eb, T* ab, T* outb) {
        for (int64_t c = 0; c < C; ++c) {
            const T* xr = xb + c * Tn;
            for (int64_t d = 0; d < dch; ++d)
                for (int64_t t = 0; t < Tn; ++t) {
                    T acc = btv[d];
                    for (int64_t kk = 0; kk < K; ++kk) {
                        const int64_t ti = t + kk - off;
                        if (ti >= 0 && ti < Tn) acc += wtv[d * K + kk] * xr[ti];
                    }
                    Hb[(c * dch + d) * Tn + t] = kern::gelu(acc);
                }
        }
        if (!causal) {
            const T inv = T(1) / T(dch * Tn);
            for (int64_t c = 0; c < C; ++c) {
                T acc = T(0);
                for (int64_t i = 0; i < dch * Tn; ++i) acc += Hb[c * dch * Tn + i];
                eb[c] = acc * inv;
            }
            for (int64_t c = 0; c < C; ++c) {
                T acc = T(0);
                for (int64_t j = 0; j < k; ++j) {
                    const int64_t ci = c + j - koff;
                    if (ci >= 0 && ci < C) acc += wev[j] * eb[ci];
                }
                ab[c] = kern::sigmoid(acc);
            }
            if (outb)
                for (int64_t t = 0; t < Tn; ++t)
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t d = 0; d < dch; ++d)
                            outb[t * C * dch + c * dch + d] = ab[c] * Hb[(c * dch + d) * Tn + t];
        } else {
            // e (C,T) running mean, a (C,T)
            for (int64_t c = 0; c < C; ++c) {
                T run = T(0);
                for (int64_t t = 0; t < Tn; ++t) {
                    T step = T(0);
                    for (int64_t d = 0; d < dch; ++d) step += Hb[(c * dch + d) * Tn + t];
                    run += step;
                    eb[c * Tn + t] = run / (T(dch) * T(t + 1));
                }
            }
            for (int64_t c = 0; c < C; ++c)
                for (int64_t t = 0; t < Tn; ++t) {
                    T acc = T(0);
                    for (int64_t j = 0; j < k; ++j) {
                        const int64_t ci = c + j - koff;
                        if (ci >= 0 && ci < C) acc += wev[j] * eb[ci * Tn + t];
                    }
                    ab[c * Tn + t] = kern::sigmoid(acc);
                }
            if (outb)
                for (int64_t t = 0; t < Tn; ++t)
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t d = 0; d < dch; ++d)
                            outb[t * C * dch + c * dch + d] = ab[c * Tn + t] * Hb[(c * dch + d) * Tn + t];
        }
    };

    const int64_t e_sz = causal ? C * Tn : C;
    Tensor<T> out({B, Tn, C * dch});
#pragma omp parallel if (B > 1)
    {
        std::vector<T> Hb(static_cast<size_t>(C * dch * Tn));
        std::vector<T> eb(static_cast<size_t>(e_sz)), ab(static_cast<size_t>(e_sz));
#pragma omp for schedule(static)
        for (int64_t b = 0; b < B; ++b)
            run_sample(x->value.ptr() + b * C * Tn, wt->value.ptr(), bt->value.ptr(), we->value.ptr(),
                       Hb.data(), eb.data(), ab.data(), out.ptr() + b * Tn * C * dch);
    }

    return tp.make(
        std::move(out), "tokenizer_frontend", {x, wt, bt, we},
        [run_sample, B, C, Tn, dch, K, k, koff, off, e_sz, causal](Tape<T>& t, auto& n) {
            NodePtr<T> x = n.parent[0], wt = n.parent[1], bt = n.parent[2], we = n.parent[3];
            Tensor<T>* gx = x->needs_grad ? &t.grad_of(x) : nullptr;
            const bool want_wt = wt->needs_grad, want_bt = bt->needs_grad, want_we = we->needs_grad;
            const int n_threads =
#ifdef _OPENMP
                B > 1 ? omp_get_max_threads() : 1;
#else
                1;
#endif
            // per-thread partials for the (tiny) weight grads; rows reduced in order
            Tensor<T> wt_part({n_threads, dch * K}), bt_part({n_threads, dch}), we_part({n_threads, k});
#pragma omp parallel num_threads(n_threads) if (n_threads > 1)
            {
#ifdef _OPENMP
                const int tid = omp_get_thread_num();
#else
                const int tid = 0;
#endif
            T* gwt_loc = want_wt ? wt_part.ptr() + tid * dch * K : nullptr;
            T* gbt_loc = want_bt ? bt_part.ptr() + tid * dch : nullptr;
            T* gwe_loc = want_we ? we_part.ptr() + tid * k : nullptr;
            std::vector<T> Hb(static_cast<size_t>(C * dch * Tn)), pre(static_cast<size_t>(C * dch * Tn));
            std::vector<T> eb(static_cast<size_t>(e_sz)), ab(static_cast<size_t>(e_sz));
            std::vector<T> dH(static_cast<size_t>(C * dch * Tn)), da(static_cast<size_t>(e_sz)),
                de(static_cast<size_t>(e_sz));
#pragma omp for schedule(static)
            for (int64_t b = 0; b < B; ++b) {
                const T* xb = x->value.ptr() + b * C * Tn;
                // recompute H, e, a and the conv pre-activations
                run_sample(xb, wt->value.ptr(), bt->value.ptr(), we->value.ptr(), Hb.data(), eb.data(),
                           ab.data(), nullptr);
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t d = 0; d < dch; ++d)
                        for (int64_t tt = 0; tt < Tn; ++tt) {
                            T acc = bt->value[d];
                            for (int64_t kk = 0; kk < K; ++kk) {
                                const int64_t ti = tt + kk - off;
                                if (ti >= 0 && ti < Tn) acc += wt->value[d * K + kk] * xb[c * Tn + ti];
                            }
                            pre[(c * dch + d) * Tn + tt] = acc;
                        }
                const T* gout = n.grad.ptr() + b * Tn * C * dch;
                std::fill(dH.begin(), dH.end(), T(0));
                std::fill(da.begin(), da.end(), T(0));
                std::fill(de.begin(), de.end(), T(0));
                // out[t,c,d] = a * H: split grad into dH and da
                if (!causal) {
                    for (int64_t tt = 0; tt < Tn; ++tt)
                        for (int64_t c = 0; c < C; ++c)
                            for (int64_t d = 0; d < dch; ++d) {
                                const T g = gout[tt * C * dch + c * dch + d];
                                dH[(c * dch + d) * Tn + tt] += g * ab[c];
                                da[c] += g * Hb[(c * dch + d) * Tn + tt];
                            }
                    // a = sigmoid(chan_conv(e))
                    for (int64_t c = 0; c < C; ++c) {
                        const T gpre = da[c] * ab[c] * (T(1) - ab[c]);
                        for (int64_t j = 0; j < k; ++j) {
                            const int64_t ci = c + j - koff;
                            if (ci < 0 || ci >= C) continue;
                            if (gwe_loc) gwe_loc[j] += gpre * eb[ci];
                            de[ci] += gpre * we->value[j];
                        }
                    }
                    const T inv = T(1) / T(dch * Tn);
                    for (int64_t c = 0; c < C; ++c) {
                        const T g = de[c] * inv;
                        for (int64_t i = 0; i < dch * Tn; ++i) dH[c * dch * Tn + i] += g;
                    }
                } else {
                    for (int64_t tt = 0; tt < Tn; ++tt)
                        for (int64_t c = 0; c < C; ++c)
                            for (int64_t d = 0; d < dch; ++d) {
                                const T g = gout[tt * C * dch + c * dch + d];
                                dH[(c * dch + d) * Tn + tt] += g * ab[c * Tn + tt];
                                da[c * Tn + tt] += g * Hb[(c * dch + d) * Tn + tt];
                            }
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t tt = 0; tt < Tn; ++tt) {
                            const T av = ab[c * Tn + tt];
                            const T gpre = da[c * Tn + tt] * av * (T(1) - av);
                            for (int64_t j = 0; j < k; ++j) {
                                const int64_t ci = c + j - koff;
                                if (ci < 0 || ci >= C) continue;
                                if (gwe_loc) gwe_loc[j] += gpre * eb[ci * Tn + tt];
                                de[ci * Tn + tt] += gpre * we->value[j];
                            }
                        }
                    for (int64_t c = 0; c < C; ++c) {
                        T suffix = T(0);
                        for (int64_t tt = Tn - 1; tt >= 0; --tt) {
                            suffix += de[c * Tn + tt] / (T(dch) * T(tt + 1));
                            for (int64_t d = 0; d < dch; ++d) dH[(c * dch + d) * Tn + tt] += suffix;
                        }
                    }
                }
                // H = GELU(pre); pre = conv(x)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t d = 0; d < dch; ++d)
                        for (int64_t tt = 0; tt < Tn; ++tt) {
                            const T g = dH[(c * dch + d) * Tn + tt] * kern::gelu_grad(pre[(c * dch + d) * Tn + tt]);
                            if (gbt_loc) gbt_loc[d] += g;
                            for (int64_t kk = 0; kk < K; ++kk) {
                                const int64_t ti = tt + kk - off;
                                if (ti < 0 || ti >= Tn) continue;
                                if (gwt_loc) gwt_loc[d * K + kk] += g * xb[c * Tn + ti];
                                if (gx) (*gx)[(b * C + c) * Tn + ti] += g * wt->value[d * K + kk];
                            }
                        }
            }
            }  // omp parallel
            if (want_wt) {
                auto& gwt = t.grad_of(wt);
                for (int tid = 0; tid < n_threads; ++tid)
                    for (int64_t i = 0; i < dch * K; ++i) gwt[i] += wt_part.at(tid, i);
            }
            if (want_bt) {
                auto& gbt = t.grad_of(bt);
                for (int tid = 0; tid < n_threads; ++tid)
                    for (int64_t i = 0; i < dch; ++i) gbt[i] += bt_part.at(tid, i);
            }
            if (want_we) {
                auto& gwe = t.grad_of(we);
                for (int tid = 0; tid < n_threads; ++tid)
                    for (int64_t i = 0; i < k; ++i) gwe[i] += we_part.at(tid, i);
            }
        });
}

// ---------------------------------------------------------------------------
// depthwise causal conv over time: x (B,T,D), W (D,K), taps t-K+1..t
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> dwconv_causal(Tape<T>& tp, NodePtr<T> x, NodePtr<T> w, NodePtr<T> b) {
    if (x->value.rank() != 3) fail("dwconv_causal: expected (B,T,D)");
    const int64_t B = x->value.dim(0), Tn = x->value.dim(1), D = x->value.dim(2);
    if (w->value.rank() != 2 || w->value.dim(0) != D) fail("dwconv_causal: W must be (D,K)");
    const int64_t K = w->value.dim(1);
    if (b->value.numel() != D) fail("dwconv_causal: bias size mismatch");
    // tap-major weight copy so the channel loops are contiguous
    Tensor<T> wt({K, D});
    for (int64_t d = 0; d < D; ++d)
        for (int64_t k = 0; k < K; ++k) wt.at(k, d) = w->value.at(d, k);
    Tensor<T> out({B, Tn, D});
#pragma omp parallel for schedule(static) if (B > 1)
    for (int64_t bb = 0; bb < B; ++bb)
        for (int64_t t = 0; t < Tn; ++t) {
            T* __restrict orow = out.ptr() + (bb * Tn + t) * D;
            std::memcpy(orow, b->value.ptr(), sizeof(T) * static_cast<size_t>(D));
            for (int64_t k = 0; k < K; ++k) {
                const int64_t ti = t - (K - 1) + k;
                if (ti < 0) continue;
                const T* __restrict xrow = x->value.ptr() + (bb * Tn + ti) * D;
                const T* __restrict wrow = wt.ptr() + k * D;
                for (int64_t d = 0; d < D; ++d) orow[d] += wrow[d] * xrow[d];
            }
        }
    return tp.make(std::move(out), "dwconv_causal", {x, w, b},
                   [B, Tn, D, K, wt = std::move(wt)](Tape<T>& t, auto& n) {
                       NodePtr<T> x = n.parent[0], w = n.parent[1], b = n.parent[2];
                       Tensor<T>* gx = x->needs_grad ? &t.grad_of(x) : nullptr;
                       const bool want_gw = w->needs_grad, want_gb = b->needs_grad;
                       const int n_threads =
#ifdef _OPENMP
                           B > 1 ? omp_get_max_threads() : 1;
#else
                           1;
#endif
                       Tensor<T> gw_part({n_threads, K * D}), gb_part({n_threads, D});
#pragma omp parallel num_threads(n_threads) if (n_threads > 1)
                       {
#ifdef _OPENMP
                           const int tid = omp_get_thread_num();
#else
                           const int tid = 0;
#endif
                           T* __restrict gw_loc = gw_part.ptr() + tid * K * D;
                           T* __restrict gb_loc = gb_part.ptr() + tid * D;
#pragma omp for schedule(static)
                           for (int64_t bb = 0; bb < B; ++bb)
                               for (int64_t tt = 0; tt < Tn; ++tt) {
                                   const T* __restrict grow = n.grad.ptr() + (bb * Tn + tt) * D;
                                   if (want_gb)
                                       for (int64_t d = 0; d < D; ++d) gb_loc[d] += grow[d];
                                   for (int64_t k = 0; k < K; ++k) {
                                       const int64_t ti = tt - (K - 1) + k;
                                       if (ti < 0) continue;
                                       const T* __restrict xrow = x->value.ptr() + (bb * Tn + ti) * D;
                                       if (want_gw) {
                                           T* __restrict gwk = gw_loc + k * D;
                                           for (int64_t d = 0; d < D; ++d) gwk[d] += grow[d] * xrow[d];
                                       }
                                       if (gx) {
                                           T* __restrict gxr = gx->ptr() + (bb * Tn + ti) * D;
                                           const T* __restrict wrow = wt.ptr() + k * D;
                                           for (int64_t d = 0; d < D; ++d) gxr[d] += grow[d] * wrow[d];
                                       }
                                   }
                               }
                       }
                       if (want_gw) {
                           auto& gw = t.grad_of(w);
                           for (int tid = 0; tid < n_threads; ++tid)
                               for (int64_t k = 0; k < K; ++k)
                                   for (int64_t d = 0; d < D; ++d) gw[d * K + k] += gw_part.at(tid, k * D + d);
                       }
                       if (want_gb) {
                           auto& gb = t.grad_of(b);
                           for (int tid = 0; tid < n_threads; ++tid)
                               for (int64_t d = 0; d < D; ++d) gb[d] += gb_part.at(tid, d);
                       }
                   });
}

// ---------------------------------------------------------------------------
// RoPE on SSD keys: x (B,T,N), pair i rotated by (t0+t)*base^(-2i/N)
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> rope(Tape<T>& tp, NodePtr<T> x, int64_t t0, T base) {
    if (x->value.rank() != 3) fail("rope: expected (B,T,N)");
    const int64_t B = x->value.dim(0), Tn = x->value.dim(1), N = x->value.dim(2);
    if (N % 2 != 0) fail("rope: N must be even");
    Tensor<T> out(x->value.shape);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < Tn; ++t)
            kern::rope_rotate_1d(x->value.ptr() + (b * Tn + t) * N, out.ptr() + (b * Tn + t) * N, N, t0 + t, base);
    return tp.make(std::move(out), "rope", {x}, [B, Tn, N, t0, base](Tape<T>& t, auto& n) {
        auto& gx = t.grad_of(n.parent[0]);
        std::vector<T> tmp(static_cast<size_t>(N));
        for (int64_t b = 0; b < B; ++b)
            for (int64_t tt = 0; tt < Tn; ++tt) {
                // transpose of a rotation = rotation by the negated angle
                kern::rope_rotate_1d(n.grad.ptr() + (b * Tn + tt) * N, tmp.data(), N, -(t0 + tt), base);
                for (int64_t i = 0; i < N; ++i) gx[(b * Tn + tt) * N + i] += tmp[i];
            }
    });
}

// ---------------------------------------------------------------------------
// SSD scan. u (B,T,H*P), abar (B,T,H), bk/ck (B,T,N) shared across heads,
// d_skip (H). Per head: S_t = abar_t S_{t-1} + bk_t u_t^T, y_t = S_t^T ck_t
// + D_h u_t. Backward recomputes states from segment checkpoints instead of
// storing the full (B,T,H,N,P) state history.
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> ssd_scan(Tape<T>& tp, NodePtr<T> u, NodePtr<T> abar, NodePtr<T> bk, NodePtr<T> ck, NodePtr<T> d_skip,
                    int64_t heads, int64_t n_state) {
    if (u->value.rank() != 3) fail("ssd_scan: u must be (B,T,H*P)");
    const int64_t B = u->value.dim(0), Tn = u->value.dim(1), HP = u->value.dim(2);
    if (HP % heads != 0) fail("ssd_scan: H*P not divisible by heads");
    const int64_t P = HP / heads, N = n_state, H = heads;
    if (abar->value.rank() != 3 || abar->value.dim(2) != H) fail("ssd_scan: abar must be (B,T,H)");
    if (bk->value.dim(2) != N || ck->value.dim(2) != N) fail("ssd_scan: keys must be (B,T,N)");
    if (d_skip->value.numel() != H) fail("ssd_scan: D must be (H)");

    const int64_t seg = 64;  // checkpoint interval for the backward recomputation
    const int64_t n_ckpt = (Tn + seg - 1) / seg;
    Tensor<T> y({B, Tn, HP});
    // checkpoints: state before each segment, laid out (B, n_ckpt, H, N, P)
    auto ckpt = std::make_shared<Tensor<T>>(std::vector<int64_t>{B, n_ckpt, H, N, P});

#pragma omp parallel for schedule(static) if (B > 1)
    for (int64_t b = 0; b < B; ++b) {
        std::vector<T> S(static_cast<size_t>(H * N * P), T(0));
        for (int64_t t = 0; t < Tn; ++t) {
            if (t % seg == 0)
                std::memcpy(ckpt->ptr() + (b * n_ckpt + t / seg) * H * N * P, S.data(),
                            sizeof(T) * S.size());
            for (int64_t h = 0; h < H; ++h)
                kern::ssd_step_head(S.data() + h * N * P, u->value.ptr() + (b * Tn + t) * HP + h * P,
                                    abar->value.at(b, t, h), bk->value.ptr() + (b * Tn + t) * N,
                                    ck->value.ptr() + (b * Tn + t) * N, d_skip->value[h],
                                    y.ptr() + (b * Tn + t) * HP + h * P, N, P);
        }
    }

    return tp.make(
        std::move(y), "ssd_scan", {u, abar, bk, ck, d_skip},
        [ckpt, B, Tn, H, N, P, HP, seg, n_ckpt](Tape<T>& t, auto& n) {
            NodePtr<T> u = n.parent[0], abar = n.parent[1], bk = n.parent[2], ck = n.parent[3];
            NodePtr<T> d_node = n.parent[4];
            Tensor<T>* gu = u->needs_grad ? &t.grad_of(u) : nullptr;
            Tensor<T>* gab = abar->needs_grad ? &t.grad_of(abar) : nullptr;
            Tensor<T>* gbk = bk->needs_grad ? &t.grad_of(bk) : nullptr;
            Tensor<T>* gck = ck->needs_grad ? &t.grad_of(ck) : nullptr;
            Tensor<T>* gd = d_node->needs_grad ? &t.grad_of(d_node) : nullptr;
            std::vector<T> gd_acc(static_cast<size_t>(H), T(0));
#pragma omp parallel if (B > 1)
            {
                std::vector<T> G(static_cast<size_t>(H * N * P));          // adjoint of S_t
                std::vector<T> states(static_cast<size_t>((seg + 1) * H * N * P));  // segment state history
                std::vector<T> gd_local(static_cast<size_t>(H), T(0));
                std::vector<T> ytmp(static_cast<size_t>(P));
#pragma omp for schedule(static)
                for (int64_t b = 0; b < B; ++b) {
                    std::fill(G.begin(), G.end(), T(0));
                    for (int64_t s0 = ((Tn - 1) / seg) * seg; s0 >= 0; s0 -= seg) {
                        const int64_t s1 = std::min(s0 + seg, Tn);
                        // recompute S_{s0-1}..S_{s1-1} into states[0..s1-s0]
                        std::memcpy(states.data(), ckpt->ptr() + (b * n_ckpt + s0 / seg) * H * N * P,
                                    sizeof(T) * static_cast<size_t>(H * N * P));
                        for (int64_t tt = s0; tt < s1; ++tt) {
                            T* Sprev = states.data() + (tt - s0) * H * N * P;
                            T* Scur = states.data() + (tt - s0 + 1) * H * N * P;
                            std::memcpy(Scur, Sprev, sizeof(T) * static_cast<size_t>(H * N * P));
                            for (int64_t h = 0; h < H; ++h)
                                kern::ssd_step_head(Scur + h * N * P, u->value.ptr() + (b * Tn + tt) * HP + h * P,
                                                    abar->value.at(b, tt, h), bk->value.ptr() + (b * Tn + tt) * N,
                                                    ck->value.ptr() + (b * Tn + tt) * N, d_node->value[h],
                                                    ytmp.data(), N, P);
                        }
                        // adjoint sweep within the segment
                        for (int64_t tt = s1 - 1; tt >= s0; --tt) {
                            const T* dy = n.grad.ptr() + (b * Tn + tt) * HP;
                            const T* ut = u->value.ptr() + (b * Tn + tt) * HP;
                            const T* bkt = bk->value.ptr() + (b * Tn + tt) * N;
                            const T* ckt = ck->value.ptr() + (b * Tn + tt) * N;
                            const T* Scur = states.data() + (tt - s0 + 1) * H * N * P;
                            const T* Sprev = states.data() + (tt - s0) * H * N * P;
                            for (int64_t h = 0; h < H; ++h) {
                                T* __restrict Gh = G.data() + h * N * P;
                                const T* __restrict Sc = Scur + h * N * P;
                                const T* __restrict Sp = Sprev + h * N * P;
                                const T* __restrict dyh = dy + h * P;
                                const T* __restrict uh = ut + h * P;
                                const kern::ConstArrMap<T> dy_v(dyh, P), u_v(uh, P);
                                // G_t = ck ⊗ dy + abar_{t+1} G_{t+1}; the decay was applied when
                                // stepping down from t+1, so just add the readout term here.
                                for (int64_t nn = 0; nn < N; ++nn)
                                    kern::ArrMap<T>(Gh + nn * P, P) += ckt[nn] * dy_v;
                                // row reductions through Eigen's SIMD dot products
                                T da = T(0);
                                for (int64_t nn = 0; nn < N; ++nn) {
                                    const kern::ConstArrMap<T> gr(Gh + nn * P, P);
                                    da += gr.matrix().dot(kern::ConstArrMap<T>(Sp + nn * P, P).matrix());
                                    // threads are split over b, so (b,t,n) slots are private
                                    if (gbk) (*gbk)[(b * Tn + tt) * N + nn] += gr.matrix().dot(u_v.matrix());
                                    if (gck)
                                        (*gck)[(b * Tn + tt) * N + nn] +=
                                            kern::ConstArrMap<T>(Sc + nn * P, P).matrix().dot(dy_v.matrix());
                                }
                                if (gu) {
                                    kern::ArrMap<T> gup(gu->ptr() + (b * Tn + tt) * HP + h * P, P);
                                    gup += d_node->value[h] * dy_v;
                                    for (int64_t nn = 0; nn < N; ++nn)
                                        gup += bkt[nn] * kern::ConstArrMap<T>(Gh + nn * P, P);
                                }
                                gd_local[static_cast<size_t>(h)] += dy_v.matrix().dot(u_v.matrix());
                                if (gab) gab->at(b, tt, h) += da;
                                // decay the adjoint down to step t-1
                                kern::ArrMap<T>(Gh, N * P) *= abar->value.at(b, tt, h);
                            }
                        }
                    }
                }
#pragma omp critical
                {
                    for (int64_t h = 0; h < H; ++h) gd_acc[static_cast<size_t>(h)] += gd_local[static_cast<size_t>(h)];
                }
            }
            if (gd)
                for (int64_t h = 0; h < H; ++h) (*gd)[h] += gd_acc[static_cast<size_t>(h)];
        });
}

}  // namespace realm
