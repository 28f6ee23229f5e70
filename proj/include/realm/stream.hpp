// Real-time causal inference runtime.
//
// StreamRuntime mirrors the causal batch forward step by step with
// preallocated buffers: one sample in, one velocity estimate out. All scalar
// math goes through the same kernels as the tape ops, so streaming outputs
// equal the full-window forward within precision. INT8 dynamic quantization
// swaps dense linears for per-row-quantized ones; convs, norms and the SSD
// state update stay in floating point.
//
// Weights are read-only after construction; every mutable buffer lives in
// StreamState, so independent streams on separate threads may share one
// dense runtime. Quantized runtimes keep a per-call activation buffer in the
// state as well, so the same holds.

#pragma once

#include <chrono>
#include <cmath>

#include "realm/model.hpp"

namespace realm::stream {

// ---------------------------------------------------------------------------
// linear layer: dense, or int8 weights + per-row scale with dynamic
// per-tensor activation quantization
// ---------------------------------------------------------------------------

template <typename T>
struct Linear {
    int64_t in = 0, out = 0;
    Tensor<T> w;  // (out,in), dense path
    Tensor<T> b;  // (out) or empty
    bool quantized = false;
    std::vector<int8_t> wq;    // row-major int8 weights
    std::vector<T> row_scale;  // absmax/127 per output row

    void init(const Tensor<T>& weight, const Tensor<T>* bias, bool int8_quant) {
        if (weight.rank() != 2) fail("stream linear: weight must be rank 2");
        out = weight.dim(0);
        in = weight.dim(1);
        w = weight;
        if (bias) b = *bias;
        quantized = int8_quant;
        if (quantized) {
            wq.resize(static_cast<size_t>(out * in));
            row_scale.resize(static_cast<size_t>(out));
            for (int64_t r = 0; r < out; ++r) {
                T absmax = T(0);
                for (int64_t c = 0; c < in; ++c) absmax = std::max(absmax, std::abs(w.at(r, c)));
                const T scale = absmax > T(0) ? absmax / T(127) : T(1);
                row_scale[static_cast<size_t>(r)] = scale;
                for (int64_t c = 0; c < in; ++c) {
                    const double q = std::nearbyint(static_cast<double>(w.at(r, c) / scale));
                    wq[static_cast<size_t>(r * in + c)] = static_cast<int8_t>(std::clamp(q, -127.0, 127.0));
                }
            }
        }
    }

    void apply(const T* x, T* y, std::vector<int8_t>& qscratch) const {
        if (!quantized) {
            kern::gemm_xwt(x, w.ptr(), y, 1, in, out);
            if (!b.data.empty())
                for (int64_t r = 0; r < out; ++r) y[r] += b[r];
            return;
        }
        if (static_cast<int64_t>(qscratch.size()) < in) fail("stream linear: quant scratch too small");
        T absmax = T(0);
        for (int64_t c = 0; c < in; ++c) absmax = std::max(absmax, std::abs(x[c]));
        if (absmax == T(0)) {
            for (int64_t r = 0; r < out; ++r) y[r] = b.data.empty() ? T(0) : b[r];
            return;
        }
        const T sx = absmax / T(127);
        for (int64_t c = 0; c < in; ++c) {
            const double q = std::nearbyint(static_cast<double>(x[c] / sx));
            qscratch[static_cast<size_t>(c)] = static_cast<int8_t>(std::clamp(q, -127.0, 127.0));
        }
        for (int64_t r = 0; r < out; ++r) {
            int32_t acc = 0;
            const int8_t* wr = wq.data() + r * in;
            for (int64_t c = 0; c < in; ++c) acc += static_cast<int32_t>(wr[c]) * static_cast<int32_t>(qscratch[c]);
            y[r] = static_cast<T>(acc) * row_scale[static_cast<size_t>(r)] * sx + (b.data.empty() ? T(0) : b[r]);
        }
    }
};

// ---------------------------------------------------------------------------
// per-stream state: recurrence state + all step scratch (no allocation in step)
// ---------------------------------------------------------------------------

template <typename T>
struct LayerState {
    std::vector<T> conv_ring;  // (Kc-1, I) past content-stream inputs, oldest first
    std::vector<T> ssd;        // (H,N,P) hidden state
};

template <typename T>
struct StreamState {
    int64_t t = 0;           // samples consumed; also the RoPE phase
    std::vector<T> tcn_ctx;  // (C, K-1) raw-sample left context
    std::vector<T> eca_sum;  // (C) running channel-energy sums
    std::vector<LayerState<T>> layers;

    // scratch
    std::vector<T> h, e, feat, d0, d1, d2, proj, u, y, keys, dt;
    std::vector<int8_t> q8;

    void reset() {
        t = 0;
        std::fill(tcn_ctx.begin(), tcn_ctx.end(), T(0));
        std::fill(eca_sum.begin(), eca_sum.end(), T(0));
        for (auto& l : layers) {
            std::fill(l.conv_ring.begin(), l.conv_ring.end(), T(0));
            std::fill(l.ssd.begin(), l.ssd.end(), T(0));
        }
    }
};

// ---------------------------------------------------------------------------
// runtime
// ---------------------------------------------------------------------------

template <typename T>
struct LayerWeights {
    Tensor<T> norm_g, norm_b;
    Linear<T> in_proj, dt, out_proj;
    Tensor<T> conv_w, conv_b;  // (I,Kc), (I)
    Tensor<T> a_neg;           // -exp(A_log), (H)
    Tensor<T> d_skip;          // (H)
};

template <typename T>
class StreamRuntime {
public:
    StreamRuntime(const ParamStore<T>& ps, const model::ModelConfig& cfg, int64_t session_id,
                  bool int8_quant = false)
        : cfg_(cfg) {
        cfg_.validate();
        if (cfg_.bidirectional)
            fail("stream runtime: bidirectional checkpoint cannot run single-step streaming; use a causal student");
        if (session_id < 0 || session_id >= cfg_.n_sessions) fail("stream runtime: session id out of range");
        tcn_w_ = ps.value("tokenizer.tcn.w");
        tcn_b_ = ps.value("tokenizer.tcn.b");
        eca_w_ = ps.value("tokenizer.eca.w");
        value_.init(ps.value("tokenizer.value.w"), &ps.value("tokenizer.value.b"), int8_quant);
        ln_g_ = ps.value("tokenizer.ln.g");
        ln_b_ = ps.value("tokenizer.ln.b");
        const auto& sess = ps.value("tokenizer.sess");
        sess_row_.resize(static_cast<size_t>(cfg_.d_model));
        for (int64_t j = 0; j < cfg_.d_model; ++j) sess_row_[static_cast<size_t>(j)] = sess.at(session_id, j);
        layers_.resize(static_cast<size_t>(cfg_.depth));
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "encoder.layer" + std::to_string(i) + ".";
            auto& L = layers_[static_cast<size_t>(i)];
            L.norm_g = ps.value(p + "norm.g");
            L.norm_b = ps.value(p + "norm.b");
            L.in_proj.init(ps.value(p + "in_proj.w"), &ps.value(p + "in_proj.b"), int8_quant);
            L.dt.init(ps.value(p + "dt.w"), &ps.value(p + "dt.b"), int8_quant);
            L.out_proj.init(ps.value(p + "out_proj.w"), &ps.value(p + "out_proj.b"), int8_quant);
            L.conv_w = ps.value(p + "conv.w");
            L.conv_b = ps.value(p + "conv.b");
            const auto& alog = ps.value(p + "A_log");
            L.a_neg = Tensor<T>({alog.numel()});
            for (int64_t h = 0; h < alog.numel(); ++h) L.a_neg[h] = -std::exp(alog[h]);
            L.d_skip = ps.value(p + "D");
        }
        vel_.init(ps.value("head.vel.w"), &ps.value("head.vel.b"), int8_quant);
    }

    const model::ModelConfig& config() const { return cfg_; }
    bool quantized() const { return value_.quantized; }

    StreamState<T> make_state() const {
        StreamState<T> s;
        const int64_t I = cfg_.inner(), N = cfg_.n_state;
        s.tcn_ctx.assign(static_cast<size_t>(cfg_.channels * (cfg_.tcn_kernel - 1)), T(0));
        s.eca_sum.assign(static_cast<size_t>(cfg_.channels), T(0));
        s.layers.resize(static_cast<size_t>(cfg_.depth));
        for (auto& l : s.layers) {
            l.conv_ring.assign(static_cast<size_t>((cfg_.conv_kernel - 1) * I), T(0));
            l.ssd.assign(static_cast<size_t>(cfg_.heads() * N * cfg_.head_width()), T(0));
        }
        s.h.resize(static_cast<size_t>(cfg_.channels * cfg_.d_ch));
        s.e.resize(static_cast<size_t>(cfg_.channels));
        s.feat.resize(static_cast<size_t>(cfg_.flat_features()));
        s.d0.resize(static_cast<size_t>(cfg_.d_model));
        s.d1.resize(static_cast<size_t>(cfg_.d_model));
        s.d2.resize(static_cast<size_t>(cfg_.d_model));
        s.proj.resize(static_cast<size_t>(2 * I + 2 * N));
        s.u.resize(static_cast<size_t>(I));
        s.y.resize(static_cast<size_t>(I));
        s.keys.resize(static_cast<size_t>(2 * N));
        s.dt.resize(static_cast<size_t>(cfg_.heads()));
        s.q8.resize(static_cast<size_t>(std::max<int64_t>(cfg_.flat_features(), 2 * I + 2 * N)));
        return s;
    }

    // one sample in (C raw floats), one velocity estimate out (2 floats)
    void step(StreamState<T>& st, const T* x_t, T* v_out) const {
        tokenize_step(st, x_t, st.d0.data());
        T* a = st.d0.data();
        T* b = st.d1.data();
        for (size_t li = 0; li < layers_.size(); ++li) {
            layer_step(layers_[li], st, st.layers[li], st.t, a, b);
            std::swap(a, b);
        }
        vel_.apply(a, v_out, st.q8);
        ++st.t;
    }

private:
    void tokenize_step(StreamState<T>& st, const T* x_t, T* z_out) const {
        const int64_t C = cfg_.channels, dch = cfg_.d_ch, K = cfg_.tcn_kernel, k = cfg_.eca_kernel;
        const int64_t koff = k / 2;
        std::vector<T>& ctx = st.tcn_ctx;
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t d = 0; d < dch; ++d) {
                T acc = tcn_b_[d];
                for (int64_t kk = 0; kk < K; ++kk) {
                    const T xv = kk == K - 1 ? x_t[c] : ctx[static_cast<size_t>(c * (K - 1) + kk)];
                    acc += tcn_w_.at(d, kk) * xv;
                }
                st.h[static_cast<size_t>(c * dch + d)] = kern::gelu(acc);
            }
            T step_energy = T(0);
            for (int64_t d = 0; d < dch; ++d) step_energy += st.h[static_cast<size_t>(c * dch + d)];
            st.eca_sum[static_cast<size_t>(c)] += step_energy;
            st.e[static_cast<size_t>(c)] = st.eca_sum[static_cast<size_t>(c)] / (T(dch) * T(st.t + 1));
        }
        for (int64_t c = 0; c < C; ++c) {
            T acc = T(0);
            for (int64_t j = 0; j < k; ++j) {
                const int64_t ci = c + j - koff;
                if (ci >= 0 && ci < C) acc += eca_w_[j] * st.e[static_cast<size_t>(ci)];
            }
            const T a = kern::sigmoid(acc);
            for (int64_t d = 0; d < dch; ++d)
                st.feat[static_cast<size_t>(c * dch + d)] = a * st.h[static_cast<size_t>(c * dch + d)];
        }
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t kk = 0; kk + 1 < K - 1; ++kk)
                ctx[static_cast<size_t>(c * (K - 1) + kk)] = ctx[static_cast<size_t>(c * (K - 1) + kk + 1)];
            if (K > 1) ctx[static_cast<size_t>(c * (K - 1) + (K - 2))] = x_t[c];
        }
        value_.apply(st.feat.data(), st.d2.data(), st.q8);
        kern::layernorm_1d(st.d2.data(), ln_g_.ptr(), ln_b_.ptr(), z_out, cfg_.d_model, static_cast<T>(cfg_.ln_eps));
        for (int64_t j = 0; j < cfg_.d_model; ++j) z_out[j] += sess_row_[static_cast<size_t>(j)];
    }

    void layer_step(const LayerWeights<T>& L, StreamState<T>& st, LayerState<T>& ls, int64_t t,
                    const T* x_in, T* x_out) const {
        const int64_t d = cfg_.d_model, I = cfg_.inner(), N = cfg_.n_state, H = cfg_.heads(),
                      P = cfg_.head_width(), Kc = cfg_.conv_kernel;
        kern::layernorm_1d(x_in, L.norm_g.ptr(), L.norm_b.ptr(), st.d2.data(), d, static_cast<T>(cfg_.ln_eps));
        L.in_proj.apply(st.d2.data(), st.proj.data(), st.q8);
        const T* u0 = st.proj.data();
        const T* z0 = st.proj.data() + I;
        const T* bk0 = st.proj.data() + 2 * I;
        const T* ck0 = st.proj.data() + 2 * I + N;
        for (int64_t dd = 0; dd < I; ++dd) {
            T acc = L.conv_b[dd];
            for (int64_t kk = 0; kk < Kc - 1; ++kk)
                acc += L.conv_w.at(dd, kk) * ls.conv_ring[static_cast<size_t>(kk * I + dd)];
            acc += L.conv_w.at(dd, Kc - 1) * u0[dd];
            st.u[static_cast<size_t>(dd)] = kern::silu(acc);
        }
        for (int64_t kk = 0; kk + 1 < Kc - 1; ++kk)
            std::memcpy(ls.conv_ring.data() + kk * I, ls.conv_ring.data() + (kk + 1) * I,
                        sizeof(T) * static_cast<size_t>(I));
        if (Kc > 1) std::memcpy(ls.conv_ring.data() + (Kc - 2) * I, u0, sizeof(T) * static_cast<size_t>(I));

        L.dt.apply(st.u.data(), st.dt.data(), st.q8);
        kern::rope_rotate_1d(bk0, st.keys.data(), N, t, static_cast<T>(cfg_.rope_base));
        kern::rope_rotate_1d(ck0, st.keys.data() + N, N, t, static_cast<T>(cfg_.rope_base));
        for (int64_t h = 0; h < H; ++h) {
            const T dt = kern::softplus(st.dt[static_cast<size_t>(h)]);
            const T abar = std::exp(L.a_neg[h] * dt);
            kern::ssd_step_head(ls.ssd.data() + h * N * P, st.u.data() + h * P, abar, st.keys.data(),
                                st.keys.data() + N, L.d_skip[h], st.y.data() + h * P, N, P);
        }
        for (int64_t dd = 0; dd < I; ++dd) st.y[static_cast<size_t>(dd)] *= kern::silu(z0[dd]);
        L.out_proj.apply(st.y.data(), x_out, st.q8);
        for (int64_t j = 0; j < d; ++j) x_out[j] += x_in[j];
    }

    model::ModelConfig cfg_;
    Tensor<T> tcn_w_, tcn_b_, eca_w_, ln_g_, ln_b_;
    Linear<T> value_, vel_;
    std::vector<T> sess_row_;
    std::vector<LayerWeights<T>> layers_;
};

// stream a full (C,T) window from a fresh state; returns (T,2) predictions
template <typename T>
Tensor<T> stream_decode_window(const StreamRuntime<T>& rt, const Tensor<T>& window) {
    if (window.rank() != 2) fail("stream_decode_window: expected (C,T)");
    const int64_t C = window.dim(0), Tn = window.dim(1);
    auto st = rt.make_state();
    Tensor<T> out({Tn, 2});
    std::vector<T> x(static_cast<size_t>(C));
    for (int64_t t = 0; t < Tn; ++t) {
        for (int64_t c = 0; c < C; ++c) x[static_cast<size_t>(c)] = window.at(c, t);
        rt.step(st, x.data(), out.ptr() + t * 2);
    }
    return out;
}

// ---------------------------------------------------------------------------
// fold-batched ensemble: K homogeneous models advanced in one call per step,
// folds run in parallel over cores, output = mean of the K predictions. The
// sequential baseline (sequential_step) replays the folds one by one on the
// calling thread; both produce identical numbers.
// ---------------------------------------------------------------------------

template <typename T>
class EnsembleRuntime {
public:
    explicit EnsembleRuntime(std::vector<StreamRuntime<T>> models) : models_(std::move(models)) {
        if (models_.empty()) fail("ensemble: no models");
        const auto& c0 = models_[0].config();
        for (const auto& m : models_) {
            const auto& c = m.config();
            if (c.d_model != c0.d_model || c.depth != c0.depth || c.channels != c0.channels ||
                c.expand != c0.expand || c.n_state != c0.n_state)
                fail("ensemble: heterogeneous architectures");
        }
        for (const auto& m : models_) states_.push_back(m.make_state());
        v_buf_.resize(models_.size() * 2);
    }

    int64_t folds() const { return static_cast<int64_t>(models_.size()); }
    void reset() {
        for (auto& s : states_) s.reset();
    }

    void step(const T* x_t, T* v_out) {
        const int64_t K = folds();
#pragma omp parallel for schedule(static) if (K > 1)
        for (int64_t f = 0; f < K; ++f)
            models_[static_cast<size_t>(f)].step(states_[static_cast<size_t>(f)], x_t,
                                                 v_buf_.data() + 2 * f);
        reduce(v_out);
    }

    void sequential_step(const T* x_t, T* v_out) {
        const int64_t K = folds();
        for (int64_t f = 0; f < K; ++f)
            models_[static_cast<size_t>(f)].step(states_[static_cast<size_t>(f)], x_t,
                                                 v_buf_.data() + 2 * f);
        reduce(v_out);
    }

    std::vector<StreamRuntime<T>>& models() { return models_; }
    std::vector<StreamState<T>>& states() { return states_; }

private:
    void reduce(T* v_out) const {
        T vx = T(0), vy = T(0);
        for (size_t f = 0; f < models_.size(); ++f) {
            vx += v_buf_[2 * f];
            vy += v_buf_[2 * f + 1];
        }
        v_out[0] = vx / T(models_.size());
        v_out[1] = vy / T(models_.size());
    }

    std::vector<StreamRuntime<T>> models_;
    std::vector<StreamState<T>> states_;
    std::vector<T> v_buf_;
};

// ---------------------------------------------------------------------------
// latency benchmark
// ---------------------------------------------------------------------------

struct LatencyReport {
    int64_t n_steps = 0;
    double mean_ms = 0.0;
    double p50_ms = 0.0;
    double p95_ms = 0.0;
    double fps = 0.0;
    double deadline_ms = 10.0;
    int64_t miss_count = 0;
};

// nearest-rank percentile: ceil(p/100 * N)-th smallest value, 1-indexed
double percentile_nearest_rank(std::vector<double> samples, double p);

LatencyReport summarize_latencies(const std::vector<double>& step_ms, double deadline_ms);

// protocol: 50..100 warm-up invocations, then >= 500 timed single steps
template <typename StepFn>
LatencyReport bench_run(StepFn&& step_fn, int64_t n_warmup, int64_t n_steps, double deadline_ms = 10.0) {
    if (n_warmup < 50 || n_warmup > 100)
        fail("bench_run: warm-up count must be in [50,100], got " + std::to_string(n_warmup));
    if (n_steps < 500) fail("bench_run: need at least 500 timed steps, got " + std::to_string(n_steps));
    using clock = std::chrono::steady_clock;
    for (int64_t i = 0; i < n_warmup; ++i) step_fn();
    std::vector<double> step_ms(static_cast<size_t>(n_steps));
    for (int64_t i = 0; i < n_steps; ++i) {
        const auto t0 = clock::now();
        step_fn();
        const auto t1 = clock::now();
        step_ms[static_cast<size_t>(i)] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    return summarize_latencies(step_ms, deadline_ms);
}

}  // namespace realm::stream
