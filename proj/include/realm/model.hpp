// Parameter initialization and the forward graph: neural tokenizer, causal
// Mamba-2 blocks, BiMamba-2 wrappers, encoder stacks, the CMAE predictor and
// the decoding heads. The same graph serves training (grads on) and batch
// evaluation (grads off); the streaming runtime in stream.hpp mirrors the
// causal path step by step.

#pragma once

#include "realm/checkpoint.hpp"
#include "realm/model_config.hpp"
#include "realm/ops_loss.hpp"
#include "realm/ops_signal.hpp"

namespace realm::model {

struct RunCtx {
    bool training = false;
    Rng* rng = nullptr;  // dropout / drop-path stream; null in eval

    Rng* dropout_rng() { return training ? rng : nullptr; }
};

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

template <typename T>
void init_linear(ParamStore<T>& ps, const std::string& prefix, int64_t out, int64_t in, Rng& rng,
                 bool bias = true) {
    const double std = 1.0 / std::sqrt(static_cast<double>(in));
    ps.add(prefix + ".w", randn<T>({out, in}, rng, std));
    if (bias) ps.add(prefix + ".b", Tensor<T>::zeros({out}));
}

template <typename T>
void init_block_params(ParamStore<T>& ps, const ModelConfig& cfg, const std::string& prefix, Rng& rng,
                       int inner_width) {
    const int64_t d = cfg.d_model, I = inner_width, N = cfg.n_state, H = cfg.heads(), Kc = cfg.conv_kernel;
    ps.add(prefix + "norm.g", Tensor<T>::full({d}, T(1)));
    ps.add(prefix + "norm.b", Tensor<T>::zeros({d}));
    init_linear(ps, prefix + "in_proj", 2 * I + 2 * N, d, rng);
    {
        // B/C key rows scaled by 1/sqrt(N): a persistent head integrates
        // ~1/(1-abar^2) unit-variance writes, so unit-scale keys blow the scan
        // output up to O(10) std at init
        auto& w = ps.value(prefix + "in_proj.w");
        const T s = T(1) / std::sqrt(static_cast<T>(N));
        for (int64_t r = 2 * I; r < 2 * I + 2 * N; ++r)
            for (int64_t c = 0; c < d; ++c) w.at(r, c) *= s;
    }
    ps.add(prefix + "conv.w", randn<T>({I, Kc}, rng, 1.0 / std::sqrt(static_cast<double>(Kc))));
    ps.add(prefix + "conv.b", Tensor<T>::zeros({I}));
    // dt head: bias-dominated at init so softplus(W_dt u + b) starts in the
    // [1e-3, 1e-1] timescale band; a hot W_dt makes every head forgetful
    ps.add(prefix + "dt.w", randn<T>({H, I}, rng, 0.1 / std::sqrt(static_cast<double>(I))));
    ps.add(prefix + "dt.b", Tensor<T>::zeros({H}));
    {
        // softplus(dt.b) spread across [1e-3, 1e-1], the usual Mamba timescale init
        Tensor<T> dtb({H});
        for (int64_t h = 0; h < H; ++h) {
            const double target = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            dtb[h] = static_cast<T>(kern::softplus_inverse(target));
        }
        ps.value(prefix + "dt.b") = std::move(dtb);
    }
    {
        Tensor<T> a_log({H});
        for (int64_t h = 0; h < H; ++h) a_log[h] = static_cast<T>(std::log(rng.uniform(1.0, 16.0)));
        ps.add(prefix + "A_log", std::move(a_log));
    }
    ps.add(prefix + "D", Tensor<T>::full({H}, T(1)));
    init_linear(ps, prefix + "out_proj", d, I, rng);
    {
        // residual-branch scaling so depth stacks keep the stream near token scale
        auto& w = ps.value(prefix + "out_proj.w");
        const T s = T(1) / std::sqrt(T(2) * static_cast<T>(std::max(cfg.depth, 1)));
        for (auto& v : w.data) v *= s;
    }
}

template <typename T>
void init_bilayer_params(ParamStore<T>& ps, const ModelConfig& cfg, const std::string& prefix, Rng& rng,
                         int inner_width) {
    init_block_params(ps, cfg, prefix + "fwd.", rng, inner_width);
    init_block_params(ps, cfg, prefix + "bwd.", rng, inner_width);
    const int64_t d = cfg.d_model;
    ps.add(prefix + "fuse.w", randn<T>({d, 2 * d}, rng, 1.0 / std::sqrt(2.0 * d)));
    ps.add(prefix + "fuse_ln.g", Tensor<T>::full({d}, T(1)));
    ps.add(prefix + "fuse_ln.b", Tensor<T>::zeros({d}));
}

template <typename T>
void init_tokenizer_params(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    const int64_t d = cfg.d_model;
    ps.add("tokenizer.tcn.w", randn<T>({cfg.d_ch, cfg.tcn_kernel}, rng,
                                       1.0 / std::sqrt(static_cast<double>(cfg.tcn_kernel))));
    ps.add("tokenizer.tcn.b", Tensor<T>::zeros({cfg.d_ch}));
    ps.add("tokenizer.eca.w", randn<T>({cfg.eca_kernel}, rng, 1.0 / std::sqrt(static_cast<double>(cfg.eca_kernel))));
    init_linear(ps, "tokenizer.value", d, cfg.flat_features(), rng);
    ps.add("tokenizer.ln.g", Tensor<T>::full({d}, T(1)));
    ps.add("tokenizer.ln.b", Tensor<T>::zeros({d}));
    ps.add("tokenizer.sess", randn<T>({cfg.n_sessions, d}, rng, 0.02));
    ps.add("tokenizer.mask_token", randn<T>({d}, rng, 0.02));
}

// full model parameter set; predictor and heads are optional components
template <typename T>
ParamStore<T> init_model_params(const ModelConfig& cfg, uint64_t seed, bool with_predictor = false,
                                bool with_vel_head = true, bool with_recon_head = false) {
    cfg.validate();
    Rng rng(hash_seed(seed, 0x4D4F44454CULL));
    ParamStore<T> ps;
    init_tokenizer_params(ps, cfg, rng);
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string prefix = "encoder.layer" + std::to_string(i) + ".";
        if (cfg.bidirectional)
            init_bilayer_params(ps, cfg, prefix, rng, cfg.inner());
        else
            init_block_params(ps, cfg, prefix, rng, cfg.inner());
    }
    if (with_predictor) {
        for (int i = 0; i < cfg.predictor_layers; ++i)
            init_bilayer_params(ps, cfg, "predictor.layer" + std::to_string(i) + ".", rng, cfg.pred_inner());
        init_linear(ps, "predictor.mlp.fc1", cfg.d_model, cfg.d_model, rng);
        init_linear(ps, "predictor.mlp.fc2", cfg.d_model, cfg.d_model, rng);
        init_linear(ps, "predictor.head", cfg.channels, cfg.d_model, rng);
    }
    if (with_vel_head) init_linear(ps, "head.vel", 2, cfg.d_model, rng);
    if (with_recon_head) init_linear(ps, "head.recon", cfg.channels, cfg.d_model, rng);
    return ps;
}

// mean-of-trained-rows initialization for a held-out session's embedding row
template <typename T>
void mean_init_session_row(ParamStore<T>& ps, const ModelConfig& cfg, int64_t new_id,
                           const std::vector<int64_t>& trained_ids) {
    if (trained_ids.empty()) fail("mean_init_session_row: no trained session rows");
    auto& table = ps.value("tokenizer.sess");
    if (new_id < 0 || new_id >= cfg.n_sessions) fail("mean_init_session_row: id out of range");
    for (int64_t j = 0; j < cfg.d_model; ++j) {
        double acc = 0.0;
        for (int64_t id : trained_ids) acc += table.at(id, j);
        table.at(new_id, j) = static_cast<T>(acc / static_cast<double>(trained_ids.size()));
    }
}

// ---------------------------------------------------------------------------
// forward graph
// ---------------------------------------------------------------------------

// raw window (B,C,T) + session ids -> tokens Z (B,T,d_model)
template <typename T>
NodePtr<T> tokenize(Tape<T>& tp, BoundParams<T>& P, const ModelConfig& cfg, const Tensor<T>& x,
                    const std::vector<int64_t>& session_ids, bool causal) {
    if (x.rank() != 3 || x.dim(1) != cfg.channels) fail("tokenize: expected X (B,C,T)");
    if (static_cast<int64_t>(session_ids.size()) != x.dim(0)) fail("tokenize: one session id per batch row");
    auto xn = tp.leaf(x, false, "input");
    auto f = tokenizer_frontend(tp, xn, P["tokenizer.tcn.w"], P["tokenizer.tcn.b"], P["tokenizer.eca.w"], causal);
    auto v = layer_norm(tp, linear(tp, f, P["tokenizer.value.w"], P["tokenizer.value.b"]), P["tokenizer.ln.g"],
                        P["tokenizer.ln.b"], static_cast<T>(cfg.ln_eps));
    auto s = rows_embed(tp, P["tokenizer.sess"], session_ids);
    return add_rows_over_time(tp, v, s);
}

// one causal Mamba-2 block with pre-norm residual
template <typename T>
NodePtr<T> mamba_block(Tape<T>& tp, BoundParams<T>& P, const ModelConfig& cfg, const std::string& prefix,
                       NodePtr<T> x, RunCtx& ctx, int inner_width) {
    const int64_t I = inner_width, N = cfg.n_state, H = cfg.heads();
    auto xn = layer_norm(tp, x, P[prefix + "norm.g"], P[prefix + "norm.b"], static_cast<T>(cfg.ln_eps));
    auto p = linear(tp, xn, P[prefix + "in_proj.w"], P[prefix + "in_proj.b"]);
    auto u0 = slice_last(tp, p, 0, I);
    auto z0 = slice_last(tp, p, I, 2 * I);
    auto bk0 = slice_last(tp, p, 2 * I, 2 * I + N);
    auto ck0 = slice_last(tp, p, 2 * I + N, 2 * I + 2 * N);
    auto uc = silu_op(tp, dwconv_causal(tp, u0, P[prefix + "conv.w"], P[prefix + "conv.b"]));
    auto dt = softplus_op(tp, linear(tp, uc, P[prefix + "dt.w"], P[prefix + "dt.b"]));
    auto a_neg = neg(tp, exp_op(tp, P[prefix + "A_log"]));  // A = -exp(A_log) < 0
    auto abar = exp_op(tp, mul_lastdim(tp, dt, a_neg));     // in (0,1]
    auto bk = rope(tp, bk0, 0, static_cast<T>(cfg.rope_base));
    auto ck = rope(tp, ck0, 0, static_cast<T>(cfg.rope_base));
    auto ys = ssd_scan(tp, uc, abar, bk, ck, P[prefix + "D"], H, N);
    auto gated = silu_gate(tp, ys, z0);
    auto o = linear(tp, gated, P[prefix + "out_proj.w"], P[prefix + "out_proj.b"]);
    o = dropout(tp, o, cfg.dropout, ctx.dropout_rng());
    o = drop_path(tp, o, cfg.drop_path, ctx.dropout_rng());
    return add(tp, x, o);
}

// BiMamba-2: fuse forward and time-reversed streams, then LayerNorm
template <typename T>
NodePtr<T> bimamba_layer(Tape<T>& tp, BoundParams<T>& P, const ModelConfig& cfg, const std::string& prefix,
                         NodePtr<T> x, RunCtx& ctx, int inner_width) {
    auto hf = mamba_block(tp, P, cfg, prefix + "fwd.", x, ctx, inner_width);
    auto hb = flip_time(tp, mamba_block(tp, P, cfg, prefix + "bwd.", flip_time(tp, x), ctx, inner_width));
    auto fused = linear(tp, concat_last(tp, hf, hb), P[prefix + "fuse.w"]);
    return layer_norm(tp, fused, P[prefix + "fuse_ln.g"], P[prefix + "fuse_ln.b"], static_cast<T>(cfg.ln_eps));
}

// encoder stack; returns tokens plus every layer output (L+1 tensors)
template <typename T>
std::vector<NodePtr<T>> encode(Tape<T>& tp, BoundParams<T>& P, const ModelConfig& cfg, NodePtr<T> z,
                               RunCtx& ctx) {
    std::vector<NodePtr<T>> reps;
    reps.reserve(cfg.depth + 1);
    reps.push_back(z);
    NodePtr<T> x = z;
    for (int i = 0; i < cfg.depth; ++i) {
        const std::string prefix = "encoder.layer" + std::to_string(i) + ".";
        x = cfg.bidirectional ? bimamba_layer(tp, P, cfg, prefix, x, ctx, cfg.inner())
                              : mamba_block(tp, P, cfg, prefix, x, ctx, cfg.inner());
        reps.push_back(x);
    }
    return reps;
}

// asymmetric predictor: BiMamba-2 layer(s) + 2-layer MLP + linear head to C
template <typename T>
NodePtr<T> predictor_forward(Tape<T>& tp, BoundParams<T>& P, const ModelConfig& cfg, NodePtr<T> x, RunCtx& ctx) {
    NodePtr<T> h = x;
    for (int i = 0; i < cfg.predictor_layers; ++i)
        h = bimamba_layer(tp, P, cfg, "predictor.layer" + std::to_string(i) + ".", h, ctx, cfg.pred_inner());
    auto m = linear(tp, gelu_op(tp, linear(tp, h, P["predictor.mlp.fc1.w"], P["predictor.mlp.fc1.b"])),
                    P["predictor.mlp.fc2.w"], P["predictor.mlp.fc2.b"]);
    return linear(tp, m, P["predictor.head.w"], P["predictor.head.b"]);
}

template <typename T>
NodePtr<T> velocity_head(Tape<T>& tp, BoundParams<T>& P, NodePtr<T> z) {
    return linear(tp, z, P["head.vel.w"], P["head.vel.b"]);
}

template <typename T>
NodePtr<T> recon_head(Tape<T>& tp, BoundParams<T>& P, NodePtr<T> z) {
    return linear(tp, z, P["head.recon.w"], P["head.recon.b"]);
}

// ---------------------------------------------------------------------------
// batch evaluation forward (no gradients)
// ---------------------------------------------------------------------------

template <typename T>
struct EvalOut {
    std::vector<Tensor<T>> reps;  // tokens + every layer output, when requested
    Tensor<T> vel;                // (B,T,2), when requested
};

template <typename T>
EvalOut<T> eval_forward(ParamStore<T>& ps, const ModelConfig& cfg, const Tensor<T>& x,
                        const std::vector<int64_t>& session_ids, bool want_vel, bool want_reps) {
    Tape<T> tape(false);
    BoundParams<T> P(tape, ps);
    RunCtx ctx;  // eval mode
    auto z = tokenize(tape, P, cfg, x, session_ids, !cfg.bidirectional);
    auto reps = encode(tape, P, cfg, z, ctx);
    EvalOut<T> out;
    if (want_reps)
        for (auto* r : reps) out.reps.push_back(r->value);
    if (want_vel) out.vel = velocity_head(tape, P, reps.back())->value;
    return out;
}

// ---------------------------------------------------------------------------
// save / load with the JSON manifest sidecar
// ---------------------------------------------------------------------------

template <typename T>
void save_model(const std::string& path, const ParamStore<T>& ps, const ModelManifest& manifest) {
    write_checkpoint(path, ps);
    nlohmann::json j = manifest;
    std::ofstream os(path + ".json");
    if (!os) fail("save_model: cannot write manifest for '" + path + "'");
    os << j.dump(2) << "\n";
}

template <typename T>
std::pair<ParamStore<T>, ModelManifest> load_model(const std::string& path) {
    auto ps = read_checkpoint<T>(path);
    std::ifstream is(path + ".json");
    if (!is) fail("load_model: missing manifest '" + path + ".json'");
    nlohmann::json j;
    is >> j;
    ModelManifest m = j.get<ModelManifest>();
    m.config.validate();
    return {std::move(ps), std::move(m)};
}

}  // namespace realm::model
