// Tape operations: elementwise arithmetic, activations, reductions, linear
// layers, LayerNorm, shape plumbing, embeddings, dropout. Each op records a
// hand-written backward closure. Structured signal ops (convs, ECA, scan)
// live in ops_signal.hpp, loss heads in ops_loss.hpp.
//
// Parallel loops only ever write disjoint slices and reduce through
// fixed-order partials, so results are independent of the thread count.

#pragma once

#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "realm/kernels.hpp"
#include "realm/tape.hpp"

namespace realm {

namespace detail {

// below this many elements a parallel region costs more than it saves
constexpr int64_t kParGrain = 1 << 15;

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
NodePtr<T> binary_elementwise(Tape<T>& tp, NodePtr<T> a, NodePtr<T> b, const char* name, FwdFn fwd,
                              BwdFn bwd) {
    detail::check_same_shape(a->value, b->value, name);
    const int64_t n = a->value.numel();
    Tensor<T> out(a->value.shape);
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(a->value[i], b->value[i]);
    return tp.make(std::move(out), name, {a, b}, [bwd, n](Tape<T>& t, auto& node) {
        NodePtr<T> a = node.parent[0], b = node.parent[1];
        Tensor<T>* ga = a->needs_grad ? &t.grad_of(a) : nullptr;
        Tensor<T>* gb = b->needs_grad ? &t.grad_of(b) : nullptr;
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
        for (int64_t i = 0; i < n; ++i) {
            T da = T(0), db = T(0);
            bwd(node.grad[i], a->value[i], b->value[i], da, db);
            if (ga) (*ga)[i] += da;
            if (gb) (*gb)[i] += db;
        }
    });
}

template <typename T>
NodePtr<T> add(Tape<T>& tp, NodePtr<T> a, NodePtr<T> b) {
    return binary_elementwise(
        tp, a, b, "add", [](T x, T y) { return x + y; },
        [](T g, T, T, T& da, T& db) {
            da = g;
            db = g;
        });
}

template <typename T>
NodePtr<T> sub(Tape<T>& tp, NodePtr<T> a, NodePtr<T> b) {
    return binary_elementwise(
        tp, a, b, "sub", [](T x, T y) { return x - y; },
        [](T g, T, T, T& da, T& db) {
            da = g;
            db = -g;
        });
}

template <typename T>
NodePtr<T> mul(Tape<T>& tp, NodePtr<T> a, NodePtr<T> b) {
    return binary_elementwise(
        tp, a, b, "mul", [](T x, T y) { return x * y; },
        [](T g, T x, T y, T& da, T& db) {
            da = g * y;
            db = g * x;
        });
}

namespace detail {

// parallel chunked application of a bulk span kernel
template <typename T, typename Fn>
void bulk_apply(const T* x, T* y, int64_t n, Fn fn) {
#pragma omp parallel if (n > kParGrain)
    {
#ifdef _OPENMP
        const int nt = omp_get_num_threads(), tid = omp_get_thread_num();
#else
        const int nt = 1, tid = 0;
#endif
        const int64_t chunk = (n + nt - 1) / nt;
        const int64_t lo = std::min<int64_t>(n, tid * chunk);
        const int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (hi > lo) fn(x + lo, y + lo, hi - lo);
    }
}

}  // namespace detail

// gated = a * silu(b), fused: one pass instead of two ops on block-sized tensors
template <typename T>
NodePtr<T> silu_gate(Tape<T>& tp, NodePtr<T> a, NodePtr<T> b) {
    detail::check_same_shape(a->value, b->value, "silu_gate");
    const int64_t n = a->value.numel();
    Tensor<T> out(a->value.shape);
    detail::bulk_apply(b->value.ptr(), out.ptr(), n, [](const T* x, T* y, int64_t m) { kern::silu_bulk(x, y, m); });
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
    for (int64_t i = 0; i < n; ++i) out[i] *= a->value[i];
    return tp.make(std::move(out), "silu_gate", {a, b}, [n](Tape<T>& t, auto& node) {
        NodePtr<T> a = node.parent[0], b = node.parent[1];
        Tensor<T>* ga = a->needs_grad ? &t.grad_of(a) : nullptr;
        Tensor<T>* gb = b->needs_grad ? &t.grad_of(b) : nullptr;
        Tensor<T> tmp(a->value.shape);
        if (ga) {
            detail::bulk_apply(b->value.ptr(), tmp.ptr(), n,
                               [](const T* x, T* y, int64_t m) { kern::silu_bulk(x, y, m); });
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += node.grad[i] * tmp[i];
        }
        if (gb) {
            detail::bulk_apply(b->value.ptr(), tmp.ptr(), n,
                               [](const T* x, T* y, int64_t m) { kern::silu_grad_bulk(x, y, m); });
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
            for (int64_t i = 0; i < n; ++i) (*gb)[i] += node.grad[i] * a->value[i] * tmp[i];
        }
    });
}

template <typename T>
NodePtr<T> scale(Tape<T>& tp, NodePtr<T> a, T c) {
    const int64_t n = a->value.numel();
    Tensor<T> out(a->value.shape);
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
    for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] * c;
    return tp.make(std::move(out), "scale", {a}, [c, n](Tape<T>& t, auto& node) {
        auto& ga = t.grad_of(node.parent[0]);
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
        for (int64_t i = 0; i < n; ++i) ga[i] += node.grad[i] * c;
    });
}

// broadcast v over the last dimension: out[..., j] = x[..., j] * v[j]
template <typename T>
NodePtr<T> mul_lastdim(Tape<T>& tp, NodePtr<T> x, NodePtr<T> v) {
    const int64_t d = v->value.numel();
    if (x->value.shape.empty() || x->value.shape.back() != d)
        fail("mul_lastdim: last dim of x must equal len(v)");
    Tensor<T> out(x->value.shape);
    const int64_t rows = x->value.numel() / d;
#pragma omp parallel for schedule(static) if (rows * d > detail::kParGrain)
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out[r * d + j] = x->value[r * d + j] * v->value[j];
    return tp.make(std::move(out), "mul_lastdim", {x, v}, [d, rows](Tape<T>& t, auto& n) {
        NodePtr<T> x = n.parent[0], v = n.parent[1];
        if (x->needs_grad) {
            auto& gx = t.grad_of(x);
#pragma omp parallel for schedule(static) if (rows * d > detail::kParGrain)
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) gx[r * d + j] += n.grad[r * d + j] * v->value[j];
        }
        if (v->needs_grad) {
            auto& gv = t.grad_of(v);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) gv[j] += n.grad[r * d + j] * x->value[r * d + j];
        }
    });
}

template <typename T>
NodePtr<T> add_bias(Tape<T>& tp, NodePtr<T> x, NodePtr<T> b) {
    const int64_t d = b->value.numel();
    if (x->value.shape.empty() || x->value.shape.back() != d) fail("add_bias: last dim mismatch");
    Tensor<T> out(x->value.shape);
    const int64_t rows = x->value.numel() / d;
#pragma omp parallel for schedule(static) if (rows * d > detail::kParGrain)
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out[r * d + j] = x->value[r * d + j] + b->value[j];
    return tp.make(std::move(out), "add_bias", {x, b}, [d, rows](Tape<T>& t, auto& n) {
        if (n.parent[0]->needs_grad) {
            auto& gx = t.grad_of(n.parent[0]);
            const int64_t total = rows * d;
#pragma omp parallel for schedule(static) if (total > detail::kParGrain)
            for (int64_t i = 0; i < total; ++i) gx[i] += n.grad[i];
        }
        if (n.parent[1]->needs_grad) {
            auto& gb = t.grad_of(n.parent[1]);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) gb[j] += n.grad[r * d + j];
        }
    });
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

template <typename T, typename FwdFn, typename BwdFn>
NodePtr<T> unary_elementwise(Tape<T>& tp, NodePtr<T> a, const char* name, FwdFn fwd, BwdFn grad_from_input) {
    const int64_t n = a->value.numel();
    Tensor<T> out(a->value.shape);
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(a->value[i]);
    return tp.make(std::move(out), name, {a}, [grad_from_input, n](Tape<T>& t, auto& node) {
        auto& ga = t.grad_of(node.parent[0]);
        const auto& x = node.parent[0]->value;
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
        for (int64_t i = 0; i < n; ++i) ga[i] += node.grad[i] * grad_from_input(x[i]);
    });
}

template <typename T>
NodePtr<T> neg(Tape<T>& tp, NodePtr<T> a) {
    return unary_elementwise(
        tp, a, "neg", [](T x) { return -x; }, [](T) { return T(-1); });
}

// bulk-kernel unary op: fwd/bwd_from_input are span kernels (SIMD inside)
template <typename T, typename FwdBulk, typename BwdBulk>
NodePtr<T> unary_bulk(Tape<T>& tp, NodePtr<T> a, const char* name, FwdBulk fwd, BwdBulk bwd_from_input) {
    const int64_t n = a->value.numel();
    Tensor<T> out(a->value.shape);
    detail::bulk_apply(a->value.ptr(), out.ptr(), n, fwd);
    return tp.make(std::move(out), name, {a}, [bwd_from_input, n](Tape<T>& t, auto& node) {
        auto& ga = t.grad_of(node.parent[0]);
        Tensor<T> dg(node.parent[0]->value.shape);
        detail::bulk_apply(node.parent[0]->value.ptr(), dg.ptr(), n, bwd_from_input);
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
        for (int64_t i = 0; i < n; ++i) ga[i] += node.grad[i] * dg[i];
    });
}

template <typename T>
NodePtr<T> exp_op(Tape<T>& tp, NodePtr<T> a) {
    auto k = [](const T* x, T* y, int64_t m) { kern::exp_bulk(x, y, m); };
    return unary_bulk(tp, a, "exp", k, k);
}

template <typename T>
NodePtr<T> sigmoid_op(Tape<T>& tp, NodePtr<T> a) {
    return unary_bulk(
        tp, a, "sigmoid", [](const T* x, T* y, int64_t m) { kern::sigmoid_bulk(x, y, m); },
        [](const T* x, T* y, int64_t m) {
            kern::sigmoid_bulk(x, y, m);
            for (int64_t i = 0; i < m; ++i) y[i] = y[i] * (T(1) - y[i]);
        });
}

template <typename T>
NodePtr<T> silu_op(Tape<T>& tp, NodePtr<T> a) {
    return unary_bulk(
        tp, a, "silu", [](const T* x, T* y, int64_t m) { kern::silu_bulk(x, y, m); },
        [](const T* x, T* y, int64_t m) { kern::silu_grad_bulk(x, y, m); });
}

template <typename T>
NodePtr<T> gelu_op(Tape<T>& tp, NodePtr<T> a) {
    return unary_elementwise(
        tp, a, "gelu", [](T x) { return kern::gelu(x); }, [](T x) { return kern::gelu_grad(x); });
}

template <typename T>
NodePtr<T> softplus_op(Tape<T>& tp, NodePtr<T> a) {
    return unary_bulk(
        tp, a, "softplus", [](const T* x, T* y, int64_t m) { kern::softplus_bulk(x, y, m); },
        [](const T* x, T* y, int64_t m) { kern::sigmoid_bulk(x, y, m); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> sum_all(Tape<T>& tp, NodePtr<T> a) {
    T s = T(0);
    for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    return tp.make(Tensor<T>::scalar(s), "sum", {a}, [](Tape<T>& t, auto& n) {
        auto& ga = t.grad_of(n.parent[0]);
        const T g = n.grad[0];
        const int64_t m = ga.numel();
#pragma omp parallel for schedule(static) if (m > detail::kParGrain)
        for (int64_t i = 0; i < m; ++i) ga[i] += g;
    });
}

template <typename T>
NodePtr<T> mean_all(Tape<T>& tp, NodePtr<T> a) {
    const int64_t m = a->value.numel();
    T s = T(0);
    for (int64_t i = 0; i < m; ++i) s += a->value[i];
    return tp.make(Tensor<T>::scalar(s / T(m)), "mean", {a}, [m](Tape<T>& t, auto& n) {
        auto& ga = t.grad_of(n.parent[0]);
        const T g = n.grad[0] / T(m);
#pragma omp parallel for schedule(static) if (m > detail::kParGrain)
        for (int64_t i = 0; i < m; ++i) ga[i] += g;
    });
}

// ---------------------------------------------------------------------------
// linear: y(..., out) = x(..., in) @ W(out,in)^T [+ b]
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> linear(Tape<T>& tp, NodePtr<T> x, NodePtr<T> w, NodePtr<T> b = nullptr) {
    if (w->value.rank() != 2) fail("linear: W must be rank 2");
    const int64_t in = w->value.dim(1), out_dim = w->value.dim(0);
    if (x->value.shape.empty() || x->value.shape.back() != in)
        fail("linear: x last dim " + shape_str(x->value.shape) + " != W in dim " + std::to_string(in));
    const int64_t rows = x->value.numel() / in;
    std::vector<int64_t> oshape = x->value.shape;
    oshape.back() = out_dim;
    Tensor<T> y(oshape);
    kern::gemm_xwt(x->value.ptr(), w->value.ptr(), y.ptr(), rows, in, out_dim);
    if (b) {
        if (b->value.numel() != out_dim) fail("linear: bias size mismatch");
#pragma omp parallel for schedule(static) if (rows * out_dim > detail::kParGrain)
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < out_dim; ++j) y[r * out_dim + j] += b->value[j];
    }
    auto back = [rows, in, out_dim](Tape<T>& t, auto& n) {
        NodePtr<T> x = n.parent[0], w = n.parent[1];
        NodePtr<T> b = n.n_parent > 2 ? n.parent[2] : nullptr;
        if (x->needs_grad) {
            auto& gx = t.grad_of(x);
            kern::gemm_accum_xw(n.grad.ptr(), w->value.ptr(), gx.ptr(), rows, out_dim, in);
        }
        if (w->needs_grad) {
            auto& gw = t.grad_of(w);
            kern::gemm_accum_dw(n.grad.ptr(), x->value.ptr(), gw.ptr(), rows, in, out_dim);
        }
        if (b && b->needs_grad) {
            auto& gb = t.grad_of(b);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < out_dim; ++j) gb[j] += n.grad[r * out_dim + j];
        }
    };
    if (b) return tp.make(std::move(y), "linear", {x, w, b}, back);
    return tp.make(std::move(y), "linear", {x, w}, back);
}

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension with affine (g, b)
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> layer_norm(Tape<T>& tp, NodePtr<T> x, NodePtr<T> g, NodePtr<T> b, T eps) {
    const int64_t d = g->value.numel();
    if (x->value.shape.empty() || x->value.shape.back() != d) fail("layer_norm: last dim mismatch");
    if (b->value.numel() != d) fail("layer_norm: beta size mismatch");
    const int64_t rows = x->value.numel() / d;
    Tensor<T> y(x->value.shape);
    Tensor<T> mean({rows}), rstd({rows});
#pragma omp parallel for schedule(static) if (rows * d > detail::kParGrain)
    for (int64_t r = 0; r < rows; ++r)
        kern::layernorm_1d(x->value.ptr() + r * d, g->value.ptr(), b->value.ptr(), y.ptr() + r * d, d, eps,
                           &mean[r], &rstd[r]);
    return tp.make(std::move(y), "layer_norm", {x, g, b},
                   [rows, d, mean = std::move(mean), rstd = std::move(rstd)](Tape<T>& t, auto& n) {
                       NodePtr<T> x = n.parent[0], g = n.parent[1], b = n.parent[2];
                       Tensor<T>* gx = x->needs_grad ? &t.grad_of(x) : nullptr;
                       const bool want_gg = g->needs_grad, want_gb = b->needs_grad;
                       const int n_threads =
#ifdef _OPENMP
                           rows * d > detail::kParGrain ? omp_get_max_threads() : 1;
#else
                           1;
#endif
                       // per-thread partials for the affine grads, reduced in thread order
                       Tensor<T> gg_part({n_threads, d}), gb_part({n_threads, d});
#pragma omp parallel num_threads(n_threads) if (n_threads > 1)
                       {
#ifdef _OPENMP
                           const int tid = omp_get_thread_num();
#else
                           const int tid = 0;
#endif
                           std::vector<T> xhat(static_cast<size_t>(d));
#pragma omp for schedule(static)
                           for (int64_t r = 0; r < rows; ++r) {
                               const T* xr = x->value.ptr() + r * d;
                               const T* dy = n.grad.ptr() + r * d;
                               const T m = mean[r], rs = rstd[r];
                               for (int64_t j = 0; j < d; ++j) xhat[j] = (xr[j] - m) * rs;
                               if (want_gb)
                                   for (int64_t j = 0; j < d; ++j) gb_part.at(tid, j) += dy[j];
                               if (want_gg)
                                   for (int64_t j = 0; j < d; ++j) gg_part.at(tid, j) += dy[j] * xhat[j];
                               if (gx) {
                                   T sum_dyh = T(0), sum_dyh_x = T(0);
                                   for (int64_t j = 0; j < d; ++j) {
                                       const T dyh = dy[j] * g->value[j];
                                       sum_dyh += dyh;
                                       sum_dyh_x += dyh * xhat[j];
                                   }
                                   const T inv_d = T(1) / T(d);
                                   for (int64_t j = 0; j < d; ++j) {
                                       const T dyh = dy[j] * g->value[j];
                                       (*gx)[r * d + j] +=
                                           rs * (dyh - inv_d * sum_dyh - xhat[j] * inv_d * sum_dyh_x);
                                   }
                               }
                           }
                       }
                       if (want_gg) {
                           auto& gg = t.grad_of(g);
                           for (int tid = 0; tid < n_threads; ++tid)
                               for (int64_t j = 0; j < d; ++j) gg[j] += gg_part.at(tid, j);
                       }
                       if (want_gb) {
                           auto& gb = t.grad_of(b);
                           for (int tid = 0; tid < n_threads; ++tid)
                               for (int64_t j = 0; j < d; ++j) gb[j] += gb_part.at(tid, j);
                       }
                   });
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> slice_last(Tape<T>& tp, NodePtr<T> x, int64_t lo, int64_t hi) {
    const int64_t d = x->value.shape.back();
    if (lo < 0 || hi > d || lo >= hi) fail("slice_last: bad range");
    const int64_t w = hi - lo, rows = x->value.numel() / d;
    std::vector<int64_t> oshape = x->value.shape;
    oshape.back() = w;
    Tensor<T> out(oshape);
#pragma omp parallel for schedule(static) if (rows * w > detail::kParGrain)
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.ptr() + r * w, x->value.ptr() + r * d + lo, sizeof(T) * static_cast<size_t>(w));
    return tp.make(std::move(out), "slice_last", {x}, [lo, w, d, rows](Tape<T>& t, auto& n) {
        auto& gx = t.grad_of(n.parent[0]);
#pragma omp parallel for schedule(static) if (rows * w > detail::kParGrain)
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j) gx[r * d + lo + j] += n.grad[r * w + j];
    });
}

template <typename T>
NodePtr<T> concat_last(Tape<T>& tp, NodePtr<T> a, NodePtr<T> b) {
    if (a->value.rank() != b->value.rank()) fail("concat_last: rank mismatch");
    for (int i = 0; i + 1 < a->value.rank(); ++i)
        if (a->value.dim(i) != b->value.dim(i)) fail("concat_last: leading dims mismatch");
    const int64_t da = a->value.shape.back(), db = b->value.shape.back();
    const int64_t rows = a->value.numel() / da;
    std::vector<int64_t> oshape = a->value.shape;
    oshape.back() = da + db;
    Tensor<T> out(oshape);
#pragma omp parallel for schedule(static) if (rows * (da + db) > detail::kParGrain)
    for (int64_t r = 0; r < rows; ++r) {
        std::memcpy(out.ptr() + r * (da + db), a->value.ptr() + r * da, sizeof(T) * static_cast<size_t>(da));
        std::memcpy(out.ptr() + r * (da + db) + da, b->value.ptr() + r * db, sizeof(T) * static_cast<size_t>(db));
    }
    return tp.make(std::move(out), "concat_last", {a, b}, [da, db, rows](Tape<T>& t, auto& n) {
        if (n.parent[0]->needs_grad) {
            auto& ga = t.grad_of(n.parent[0]);
#pragma omp parallel for schedule(static) if (rows * da > detail::kParGrain)
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < da; ++j) ga[r * da + j] += n.grad[r * (da + db) + j];
        }
        if (n.parent[1]->needs_grad) {
            auto& gb = t.grad_of(n.parent[1]);
#pragma omp parallel for schedule(static) if (rows * db > detail::kParGrain)
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < db; ++j) gb[r * db + j] += n.grad[r * (da + db) + da + j];
        }
    });
}

// reverse the time axis of (B,T,F)
template <typename T>
NodePtr<T> flip_time(Tape<T>& tp, NodePtr<T> x) {
    if (x->value.rank() != 3) fail("flip_time: expected (B,T,F)");
    const int64_t B = x->value.dim(0), Tn = x->value.dim(1), F = x->value.dim(2);
    Tensor<T> out(x->value.shape);
#pragma omp parallel for schedule(static) if (B * Tn * F > detail::kParGrain)
    for (int64_t bt = 0; bt < B * Tn; ++bt) {
        const int64_t b = bt / Tn, t = bt % Tn;
        std::memcpy(out.ptr() + (b * Tn + t) * F, x->value.ptr() + (b * Tn + (Tn - 1 - t)) * F,
                    sizeof(T) * static_cast<size_t>(F));
    }
    return tp.make(std::move(out), "flip_time", {x}, [B, Tn, F](Tape<T>& t, auto& n) {
        auto& gx = t.grad_of(n.parent[0]);
#pragma omp parallel for schedule(static) if (B * Tn * F > detail::kParGrain)
        for (int64_t bt = 0; bt < B * Tn; ++bt) {
            const int64_t b = bt / Tn, tt = bt % Tn;
            for (int64_t f = 0; f < F; ++f)
                gx[(b * Tn + (Tn - 1 - tt)) * F + f] += n.grad[(b * Tn + tt) * F + f];
        }
    });
}

// embedding lookup: rows of table (S,d) selected by ids -> (B,d)
template <typename T>
NodePtr<T> rows_embed(Tape<T>& tp, NodePtr<T> table, std::vector<int64_t> ids) {
    if (table->value.rank() != 2) fail("rows_embed: table must be rank 2");
    const int64_t S = table->value.dim(0), d = table->value.dim(1);
    const int64_t B = static_cast<int64_t>(ids.size());
    for (int64_t id : ids)
        if (id < 0 || id >= S)
            fail("rows_embed: session id " + std::to_string(id) + " out of range [0," + std::to_string(S) + ")");
    Tensor<T> out({B, d});
    for (int64_t b = 0; b < B; ++b)
        std::memcpy(out.ptr() + b * d, table->value.ptr() + ids[static_cast<size_t>(b)] * d,
                    sizeof(T) * static_cast<size_t>(d));
    return tp.make(std::move(out), "rows_embed", {table}, [ids = std::move(ids), d](Tape<T>& t, auto& n) {
        auto& gt = t.grad_of(n.parent[0]);
        for (size_t b = 0; b < ids.size(); ++b)
            for (int64_t j = 0; j < d; ++j) gt[ids[b] * d + j] += n.grad[static_cast<int64_t>(b) * d + j];
    });
}

// x (B,T,d) + r (B,d) broadcast over T
template <typename T>
NodePtr<T> add_rows_over_time(Tape<T>& tp, NodePtr<T> x, NodePtr<T> r) {
    if (x->value.rank() != 3 || r->value.rank() != 2) fail("add_rows_over_time: bad ranks");
    const int64_t B = x->value.dim(0), Tn = x->value.dim(1), d = x->value.dim(2);
    if (r->value.dim(0) != B || r->value.dim(1) != d) fail("add_rows_over_time: shape mismatch");
    Tensor<T> out(x->value.shape);
#pragma omp parallel for schedule(static) if (B * Tn * d > detail::kParGrain)
    for (int64_t bt = 0; bt < B * Tn; ++bt) {
        const int64_t b = bt / Tn;
        for (int64_t j = 0; j < d; ++j) out[bt * d + j] = x->value[bt * d + j] + r->value[b * d + j];
    }
    return tp.make(std::move(out), "add_rows_over_time", {x, r}, [B, Tn, d](Tape<T>& t, auto& n) {
        if (n.parent[0]->needs_grad) {
            auto& gx = t.grad_of(n.parent[0]);
            const int64_t total = B * Tn * d;
#pragma omp parallel for schedule(static) if (total > detail::kParGrain)
            for (int64_t i = 0; i < total; ++i) gx[i] += n.grad[i];
        }
        if (n.parent[1]->needs_grad) {
            auto& gr = t.grad_of(n.parent[1]);
#pragma omp parallel for schedule(static) if (B > 1)
            for (int64_t b = 0; b < B; ++b)
                for (int64_t tt = 0; tt < Tn; ++tt)
                    for (int64_t j = 0; j < d; ++j) gr[b * d + j] += n.grad[(b * Tn + tt) * d + j];
        }
    });
}

// ---------------------------------------------------------------------------
// regularization
// ---------------------------------------------------------------------------

// inverted dropout; identity when rate <= 0 or not training. The mask comes
// from a counter-based hash of one RNG draw, so generation parallelizes
// without losing determinism.
template <typename T>
NodePtr<T> dropout(Tape<T>& tp, NodePtr<T> x, double rate, Rng* rng) {
    if (rate <= 0.0 || rng == nullptr) return x;
    if (rate >= 1.0) fail("dropout: rate must be < 1");
    const T inv_keep = T(1.0 / (1.0 - rate));
    const uint64_t base = rng->next_u64();
    const auto threshold = static_cast<uint64_t>(rate * 18446744073709551615.0);
    const int64_t n = x->value.numel();
    Tensor<T> mask(x->value.shape);
    Tensor<T> out(x->value.shape);
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
    for (int64_t i = 0; i < n; ++i) {
        const T m = splitmix64(base + static_cast<uint64_t>(i)) < threshold ? T(0) : inv_keep;
        mask[i] = m;
        out[i] = x->value[i] * m;
    }
    return tp.make(std::move(out), "dropout", {x}, [mask = std::move(mask), n](Tape<T>& t, auto& node) {
        auto& gx = t.grad_of(node.parent[0]);
#pragma omp parallel for schedule(static) if (n > detail::kParGrain)
        for (int64_t i = 0; i < n; ++i) gx[i] += node.grad[i] * mask[i];
    });
}

// stochastic depth on a residual branch: whole samples dropped, survivors rescaled
template <typename T>
NodePtr<T> drop_path(Tape<T>& tp, NodePtr<T> x, double rate, Rng* rng) {
    if (rate <= 0.0 || rng == nullptr) return x;
    if (x->value.rank() < 1) fail("drop_path: needs a batch dim");
    const int64_t B = x->value.dim(0), per = x->value.numel() / B;
    const T inv_keep = T(1.0 / (1.0 - rate));
    Tensor<T> keep({B});
    for (int64_t b = 0; b < B; ++b) keep[b] = rng->bernoulli(rate) ? T(0) : inv_keep;
    Tensor<T> out(x->value.shape);
#pragma omp parallel for schedule(static) if (B * per > detail::kParGrain)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < per; ++i) out[b * per + i] = x->value[b * per + i] * keep[b];
    return tp.make(std::move(out), "drop_path", {x}, [keep = std::move(keep), B, per](Tape<T>& t, auto& n) {
        auto& gx = t.grad_of(n.parent[0]);
#pragma omp parallel for schedule(static) if (B * per > detail::kParGrain)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < per; ++i) gx[b * per + i] += n.grad[b * per + i] * keep[b];
    });
}

// replace token rows where mask=1 with the learnable mask token (d,)
template <typename T>
NodePtr<T> masked_replace(Tape<T>& tp, NodePtr<T> z, const Tensor<uint8_t>& mask, NodePtr<T> token) {
    if (z->value.rank() != 3) fail("masked_replace: expected (B,T,d)");
    const int64_t B = z->value.dim(0), Tn = z->value.dim(1), d = z->value.dim(2);
    if (mask.rank() != 2 || mask.dim(0) != B || mask.dim(1) != Tn) fail("masked_replace: mask must be (B,T)");
    if (token->value.numel() != d) fail("masked_replace: token width mismatch");
    Tensor<T> out(z->value.shape);
#pragma omp parallel for schedule(static) if (B * Tn * d > detail::kParGrain)
    for (int64_t bt = 0; bt < B * Tn; ++bt) {
        const T* src = mask[bt] ? token->value.ptr() : z->value.ptr() + bt * d;
        std::memcpy(out.ptr() + bt * d, src, sizeof(T) * static_cast<size_t>(d));
    }
    Tensor<uint8_t> m = mask;
    return tp.make(std::move(out), "masked_replace", {z, token}, [m = std::move(m), B, Tn, d](Tape<T>& t, auto& n) {
        NodePtr<T> z = n.parent[0], token = n.parent[1];
        Tensor<T>* gz = z->needs_grad ? &t.grad_of(z) : nullptr;
        Tensor<T>* gt = token->needs_grad ? &t.grad_of(token) : nullptr;
        for (int64_t bt = 0; bt < B * Tn; ++bt) {
            if (m[bt]) {
                if (gt)
                    for (int64_t j = 0; j < d; ++j) (*gt)[j] += n.grad[bt * d + j];
            } else if (gz) {
                for (int64_t j = 0; j < d; ++j) (*gz)[bt * d + j] += n.grad[bt * d + j];
            }
        }
    });
}

}  // namespace realm
