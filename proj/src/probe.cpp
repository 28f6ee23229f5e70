#include "realm/probe.hpp"

#include "realm/pretrain.hpp"

namespace realm::probe {

using model::ModelConfig;
using model::RunCtx;

MaeFinetuneResult mae_session_finetune(const ParamStore<float>& backbone, const model::ModelManifest& mf,
                                       const data::SessionRecord& session, const MaeFinetuneCfg& cfg) {
    cfg.schedule.validate();
    ModelConfig mc = mf.config;
    mc.predictor_layers = cfg.predictor_layers;
    mc.predictor_expand = 1;

    MaeFinetuneResult result;
    result.params = backbone;
    if (std::find(mf.train_session_ids.begin(), mf.train_session_ids.end(),
                  static_cast<int64_t>(session.session_id)) == mf.train_session_ids.end() &&
        !mf.train_session_ids.empty())
        model::mean_init_session_row(result.params, mc, session.session_id, mf.train_session_ids);

    // fresh predictor for the session-MAE stage (the published checkpoint drops it)
    {
        Rng rng(hash_seed(cfg.seed, 0x9A0B));
        ParamStore<float> fresh;
        for (int i = 0; i < mc.predictor_layers; ++i)
            model::init_bilayer_params(fresh, mc, "predictor.layer" + std::to_string(i) + ".", rng,
                                       mc.pred_inner());
        model::init_linear(fresh, "predictor.mlp.fc1", mc.d_model, mc.d_model, rng);
        model::init_linear(fresh, "predictor.mlp.fc2", mc.d_model, mc.d_model, rng);
        model::init_linear(fresh, "predictor.head", mc.channels, mc.d_model, rng);
        for (auto& [name, e] : fresh.entries()) result.params.add(name, std::move(e.value));
    }

    std::vector<data::Segment> storage;
    std::vector<data::SessionRecord> one = {session};
    auto segs = train::collect_segments(one, storage, mc.segment_len, mc.segment_stride);
    if (segs.empty()) fail("mae_session_finetune: session too short");
    Rng split_rng(hash_seed(cfg.seed, 0x9A0C));
    std::vector<int64_t> train_idx, val_idx;
    train::split_train_val(segs, cfg.val_fraction, split_rng, train_idx, val_idx);
    if (val_idx.empty()) val_idx.push_back(train_idx.back());

    Rng epoch_rng(hash_seed(cfg.seed, 0x9A0D));
    Rng mask_rng(hash_seed(cfg.seed, 0x9A0E));
    Rng drop_rng(hash_seed(cfg.seed, 0x9A0F));
    train::EarlyStopper stopper(cfg.schedule.patience);
    ParamStore<float> best = result.params;

    auto run_batches = [&](const std::vector<int64_t>& idx, bool training, double lr, Rng& m_rng) {
        double total = 0;
        int64_t seen = 0;
        auto batches = training
                           ? train::shuffled_batches(static_cast<int64_t>(idx.size()), cfg.schedule.batch_size,
                                                     epoch_rng)
                           : std::vector<std::vector<int64_t>>{[&] {
                                 std::vector<int64_t> all(idx.size());
                                 std::iota(all.begin(), all.end(), 0);
                                 return all;
                             }()};
        for (const auto& bidx : batches) {
            std::vector<const data::Segment*> bs;
            for (int64_t i : bidx) bs.push_back(segs[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
            auto batch = train::make_batch(bs, true, false);
            const int64_t B = batch.x.dim(0), T = batch.x.dim(2);
            Tensor<uint8_t> mask({B, T});
            for (int64_t b = 0; b < B; ++b) {
                auto m = pretrain::sample_random_mask(T, cfg.mask_ratio, m_rng);
                std::memcpy(mask.ptr() + b * T, m.ptr(), static_cast<size_t>(T));
            }
            Tape<float> tape(training);
            BoundParams<float> P(tape, result.params);
            RunCtx ctx{training, training ? &drop_rng : nullptr};
            // augmentation disabled in this stage
            auto z = model::tokenize(tape, P, mc, batch.x, batch.session_ids, false);
            auto zm = masked_replace(tape, z, mask, P["tokenizer.mask_token"]);
            auto reps = model::encode(tape, P, mc, zm, ctx);
            auto xhat = model::predictor_forward(tape, P, mc, reps.back(), ctx);
            auto loss = cmae_loss(tape, xhat, batch.target, mask);
            const double lv = loss->value[0];
            if (!std::isfinite(lv)) fail("mae_session_finetune: diverged");
            if (training) train::optimize_step(result.params, tape, P, loss, cfg.schedule, lr);
            total += lv * static_cast<double>(bs.size());
            seen += static_cast<int64_t>(bs.size());
        }
        return total / static_cast<double>(std::max<int64_t>(seen, 1));
    };

    for (int epoch = 0; epoch < cfg.schedule.max_epochs; ++epoch) {
        const double lr = cfg.schedule.lr_at(epoch);
        run_batches(train_idx, true, lr, mask_rng);
        Rng val_rng(hash_seed(cfg.seed, 0x9A10));
        const double val = run_batches(val_idx, false, 0.0, val_rng);
        if (epoch == 0) result.epoch1_val = val;
        if (stopper.update(val, epoch)) best = result.params;
        result.epochs_run = epoch + 1;
        if (stopper.should_stop()) break;
    }
    if (cfg.schedule.max_epochs == 0) best = result.params;
    result.best_val = cfg.schedule.max_epochs == 0 ? result.epoch1_val : stopper.best();

    ParamStore<float> pub;
    for (const auto& [name, e] : best.entries())
        if (name.rfind("predictor.", 0) != 0) pub.add(name, e.value);
    result.params = std::move(pub);
    result.manifest = mf;
    result.manifest.stage = "mae-finetune";
    result.manifest.config = mf.config;
    return result;
}

namespace {

// per-timestep features of one segment: reps at t-K..t+K concatenated,
// zero-padded at the segment edges
void gather_context_rows(const Tensor<float>& rep /*(T,d)*/, int K, Tensor<float>& rows, int64_t row0) {
    const int64_t T = rep.dim(0), d = rep.dim(1);
    const int64_t width = (2 * K + 1) * d;
    for (int64_t t = 0; t < T; ++t) {
        float* out = rows.ptr() + (row0 + t) * width;
        for (int k = -K; k <= K; ++k) {
            const int64_t src = t + k;
            float* dst = out + (k + K) * d;
            if (src < 0 || src >= T)
                std::fill(dst, dst + d, 0.f);
            else
                std::memcpy(dst, rep.ptr() + src * d, sizeof(float) * static_cast<size_t>(d));
        }
    }
}

}  // namespace

Tensor<float> context_features(const Tensor<float>& rep, int K) {
    if (rep.rank() != 2) fail("context_features: expected (T,d)");
    Tensor<float> rows({rep.dim(0), (2 * static_cast<int64_t>(K) + 1) * rep.dim(1)});
    gather_context_rows(rep, K, rows, 0);
    return rows;
}

decode::EvalResult probe_train_eval(const ParamStore<float>& frozen, const model::ModelManifest& mf,
                                    const data::SessionRecord& session, const ProbeCfg& cfg) {
    cfg.schedule.validate();
    if (!session.has_velocity()) fail("probe_train_eval: session has no velocity labels");
    const ModelConfig& mc = mf.config;
    const int K = cfg.context;
    const int64_t d = mc.d_model;
    const int64_t width = (2 * K + 1) * d;

    // frozen encoder: work on a read-only copy, probe params live separately
    auto encoder = frozen;
    const uint64_t before = encoder.checksum();

    std::vector<data::Segment> storage;
    std::vector<data::SessionRecord> one = {session};
    auto segs = train::collect_segments(one, storage, mc.segment_len, mc.segment_len);
    const auto n = static_cast<int64_t>(segs.size());
    if (n < 3) fail("probe_train_eval: session too short to split");
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(hash_seed(cfg.seed, static_cast<uint64_t>(session.session_id), 0x9B1));
    split_rng.shuffle(order.begin(), order.end());
    const int64_t n_test = std::max<int64_t>(2, static_cast<int64_t>(std::llround(0.2 * static_cast<double>(n))));

    const int64_t T = mc.segment_len;
    auto build_rows = [&](const std::vector<int64_t>& idx, Tensor<float>& rows, Tensor<float>& targets) {
        const auto m = static_cast<int64_t>(idx.size());
        rows = Tensor<float>({m * T, width});
        targets = Tensor<float>({m * T, 2});
        for (int64_t i = 0; i < m; ++i) {
            const auto* seg = segs[static_cast<size_t>(idx[static_cast<size_t>(i)])];
            std::vector<const data::Segment*> bs = {seg};
            auto b = train::make_batch(bs, false, true);
            auto fwd = model::eval_forward(encoder, mc, b.x, b.session_ids, false, true);
            const auto& rep3 = fwd.reps.back();  // (1,T,d)
            Tensor<float> rep({T, d});
            std::memcpy(rep.ptr(), rep3.ptr(), sizeof(float) * static_cast<size_t>(T * d));
            gather_context_rows(rep, K, rows, i * T);
            std::memcpy(targets.ptr() + i * T * 2, b.velocity.ptr(), sizeof(float) * static_cast<size_t>(T * 2));
        }
    };

    std::vector<int64_t> test_idx(order.begin(), order.begin() + n_test);
    std::vector<int64_t> train_idx(order.begin() + n_test, order.end());
    Tensor<float> train_rows, train_targets, test_rows, test_targets;
    build_rows(train_idx, train_rows, train_targets);
    build_rows(test_idx, test_rows, test_targets);

    // probe parameters: linear, or 2-layer MLP; one code path covers both
    ParamStore<float> probe_ps;
    {
        Rng rng(hash_seed(cfg.seed, 0x9B2));
        if (cfg.kind == ProbeKind::Mlp) {
            model::init_linear(probe_ps, "probe.fc1", cfg.mlp_hidden, width, rng);
            model::init_linear(probe_ps, "probe.fc2", 2, cfg.mlp_hidden, rng);
        } else {
            model::init_linear(probe_ps, "probe.fc2", 2, width, rng);
        }
    }
    auto probe_forward = [&](Tape<float>& tape, BoundParams<float>& P, NodePtr<float> x) {
        NodePtr<float> h = x;
        if (cfg.kind == ProbeKind::Mlp) h = gelu_op(tape, linear(tape, h, P["probe.fc1.w"], P["probe.fc1.b"]));
        return linear(tape, h, P["probe.fc2.w"], P["probe.fc2.b"]);
    };

    const int64_t n_rows = train_rows.dim(0);
    Rng epoch_rng(hash_seed(cfg.seed, 0x9B3));
    train::EarlyStopper stopper(cfg.schedule.patience);
    ParamStore<float> best = probe_ps;
    for (int epoch = 0; epoch < cfg.schedule.max_epochs; ++epoch) {
        const double lr = cfg.schedule.lr_at(epoch);
        double train_loss = 0;
        int64_t seen = 0;
        for (const auto& bidx : train::shuffled_batches(n_rows, cfg.schedule.batch_size, epoch_rng)) {
            const auto B = static_cast<int64_t>(bidx.size());
            Tensor<float> xb({B, width}), yb({B, 2});
            for (int64_t i = 0; i < B; ++i) {
                std::memcpy(xb.ptr() + i * width, train_rows.ptr() + bidx[static_cast<size_t>(i)] * width,
                            sizeof(float) * static_cast<size_t>(width));
                std::memcpy(yb.ptr() + i * 2, train_targets.ptr() + bidx[static_cast<size_t>(i)] * 2,
                            sizeof(float) * 2);
            }
            Tape<float> tape(true);
            BoundParams<float> P(tape, probe_ps);
            auto pred = probe_forward(tape, P, tape.leaf(xb, false));
            auto loss = mse_rows(tape, pred, yb);
            train_loss += static_cast<double>(loss->value[0]) * static_cast<double>(B);
            seen += B;
            train::optimize_step(probe_ps, tape, P, loss, cfg.schedule, lr);
        }
        train_loss /= static_cast<double>(std::max<int64_t>(seen, 1));
        if (stopper.update(train_loss, epoch)) best = probe_ps;
        if (stopper.should_stop()) break;
    }
    probe_ps = best;

    Tensor<float> pred;
    {
        Tape<float> tape(false);
        BoundParams<float> P(tape, probe_ps);
        pred = probe_forward(tape, P, tape.leaf(test_rows, false))->value;
    }
    if (encoder.checksum() != before) fail("probe_train_eval: encoder parameters changed");

    decode::EvalResult out;
    out.r2 = decode::r2_per_axis(pred, test_targets);
    out.session_id = session.session_id;
    out.seed = cfg.seed;
    out.model_tag = cfg.kind == ProbeKind::Mlp ? "mae+mlp" : "mae+linear";
    return out;
}

}  // namespace realm::probe
