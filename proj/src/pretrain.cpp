#include "realm/pretrain.hpp"

#include <sstream>

namespace realm::pretrain {

using model::ModelConfig;
using model::RunCtx;

Tensor<uint8_t> sample_block_mask(int64_t T, const MaskSpec& spec, Rng& rng) {
    if (spec.ratio < 0.0 || spec.ratio >= 1.0) fail("mask: ratio must be in [0,1)");
    if (spec.block_min > spec.block_max || spec.block_max > T) fail("mask: bad block range");
    Tensor<uint8_t> m({T});
    if (spec.ratio == 0.0) return m;
    int64_t covered = 0;
    const auto need = static_cast<int64_t>(std::ceil(spec.ratio * static_cast<double>(T)));
    while (covered < need) {
        const int64_t len = rng.uniform_int(spec.block_min, spec.block_max);
        const int64_t start = rng.uniform_int(0, T - len);
        for (int64_t t = start; t < start + len; ++t) {
            if (!m[t]) {
                m[t] = 1;
                ++covered;
            }
        }
    }
    return m;
}

Tensor<uint8_t> sample_random_mask(int64_t T, double ratio, Rng& rng) {
    if (ratio <= 0.0 || ratio >= 1.0) fail("mask: ratio must be in (0,1)");
    std::vector<int64_t> idx(static_cast<size_t>(T));
    for (int64_t i = 0; i < T; ++i) idx[static_cast<size_t>(i)] = i;
    rng.shuffle(idx.begin(), idx.end());
    const auto k = std::max<int64_t>(1, static_cast<int64_t>(std::llround(ratio * static_cast<double>(T))));
    Tensor<uint8_t> m({T});
    for (int64_t i = 0; i < k; ++i) m[idx[static_cast<size_t>(i)]] = 1;
    return m;
}

Tensor<float> augment(const Tensor<float>& window, const AugmentCfg& cfg, Rng& rng) {
    if (window.rank() != 2) fail("augment: expected (C,T)");
    Tensor<float> out = window;
    const int64_t C = window.dim(0), T = window.dim(1);
    for (int64_t c = 0; c < C; ++c) {
        const bool drop = cfg.channel_dropout_p > 0 && rng.bernoulli(cfg.channel_dropout_p);
        const double scale = drop ? 0.0 : rng.uniform(cfg.jitter_min, cfg.jitter_max);
        for (int64_t t = 0; t < T; ++t) {
            double v = static_cast<double>(out.at(c, t)) * scale;
            if (cfg.noise_sigma > 0) v += cfg.noise_sigma * rng.normal();
            out.at(c, t) = static_cast<float>(v);
        }
    }
    return out;
}

namespace {

// mean masked-MSE over a segment index set, eval mode (no augmentation/dropout)
double eval_masked_mse(ParamStore<float>& ps, const ModelConfig& cfg,
                       const std::vector<const data::Segment*>& segs, const std::vector<int64_t>& idx,
                       const MaskSpec& mask_spec, int64_t batch_size, uint64_t mask_seed) {
    if (idx.empty()) return 0.0;
    Rng mask_rng(mask_seed);
    double total = 0.0;
    int64_t count = 0;
    for (int64_t at = 0; at < static_cast<int64_t>(idx.size()); at += batch_size) {
        const int64_t end = std::min<int64_t>(static_cast<int64_t>(idx.size()), at + batch_size);
        std::vector<const data::Segment*> batch_segs;
        for (int64_t i = at; i < end; ++i) batch_segs.push_back(segs[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
        auto batch = train::make_batch(batch_segs, true, false);
        const int64_t B = batch.x.dim(0), T = batch.x.dim(2);
        Tensor<uint8_t> mask({B, T});
        for (int64_t b = 0; b < B; ++b) {
            auto m = sample_block_mask(T, mask_spec, mask_rng);
            std::memcpy(mask.ptr() + b * T, m.ptr(), static_cast<size_t>(T));
        }
        Tape<float> tape(false);
        BoundParams<float> P(tape, ps);
        RunCtx ctx;
        auto x = batch.x.cast<float>();
        auto z = model::tokenize(tape, P, cfg, x, batch.session_ids, false);
        auto zm = masked_replace(tape, z, mask, P["tokenizer.mask_token"]);
        auto reps = model::encode(tape, P, cfg, zm, ctx);
        auto xhat = model::predictor_forward(tape, P, cfg, reps.back(), ctx);
        auto loss = cmae_loss(tape, xhat, batch.target, mask);
        total += static_cast<double>(loss->value[0]) * static_cast<double>(B);
        count += B;
    }
    return total / static_cast<double>(count);
}

}  // namespace

PretrainResult run_pretrain(const train::Corpus& corpus, const PretrainCfg& cfg, const std::string& out_ckpt,
                            const std::string& csv_path, const std::string& config_hash) {
    cfg.schedule.validate();
    ModelConfig mc = cfg.teacher;
    if (!mc.bidirectional) fail("run_pretrain: teacher must be bidirectional");
    mc.channels = static_cast<int>(corpus.channels);
    if (corpus.max_session_id() >= mc.n_sessions)
        fail("run_pretrain: n_sessions too small for corpus session ids");

    std::vector<data::Segment> storage;
    auto segs = train::collect_segments(corpus.train, storage, mc.segment_len, mc.segment_stride);
    if (segs.empty()) fail("run_pretrain: corpus yields no segments");

    Rng split_rng(hash_seed(cfg.seed, 0x5EC5));
    std::vector<int64_t> train_idx, val_idx;
    train::split_train_val(segs, cfg.val_fraction, split_rng, train_idx, val_idx);
    if (val_idx.empty()) val_idx.push_back(train_idx.back());

    auto ps = model::init_model_params<float>(mc, cfg.seed, true, false, false);
    Rng epoch_rng(hash_seed(cfg.seed, 0xBA7C4));
    Rng mask_rng(hash_seed(cfg.seed, 0x3A5C));
    Rng aug_rng(hash_seed(cfg.seed, 0xA06));
    Rng drop_rng(hash_seed(cfg.seed, 0xD20));

    train::CsvWriter csv(csv_path, "epoch,train_mse,val_mse,lr", config_hash, cfg.seed);
    train::EarlyStopper stopper(cfg.schedule.patience);
    ParamStore<float> best = ps;
    PretrainResult result;

    for (int epoch = 0; epoch < cfg.schedule.max_epochs; ++epoch) {
        const double lr = cfg.schedule.lr_at(epoch);
        double train_loss = 0.0;
        int64_t seen = 0;
        for (const auto& bidx : train::shuffled_batches(static_cast<int64_t>(train_idx.size()),
                                                        cfg.schedule.batch_size, epoch_rng)) {
            std::vector<const data::Segment*> batch_segs;
            for (int64_t i : bidx) batch_segs.push_back(segs[static_cast<size_t>(train_idx[static_cast<size_t>(i)])]);
            auto batch = train::make_batch(batch_segs, true, false);
            const int64_t B = batch.x.dim(0), T = batch.x.dim(2);
            // augment inputs only; the reconstruction target is untouched
            Tensor<float> x_aug = batch.x;
            for (int64_t b = 0; b < B; ++b) {
                Tensor<float> w({batch.x.dim(1), T});
                std::memcpy(w.ptr(), batch.x.ptr() + b * w.numel(), sizeof(float) * static_cast<size_t>(w.numel()));
                auto wa = augment(w, cfg.aug, aug_rng);
                std::memcpy(x_aug.ptr() + b * w.numel(), wa.ptr(), sizeof(float) * static_cast<size_t>(w.numel()));
            }
            Tensor<uint8_t> mask({B, T});
            for (int64_t b = 0; b < B; ++b) {
                auto m = sample_block_mask(T, cfg.mask, mask_rng);
                std::memcpy(mask.ptr() + b * T, m.ptr(), static_cast<size_t>(T));
            }
            Tape<float> tape(true);
            BoundParams<float> P(tape, ps);
            RunCtx ctx{true, &drop_rng};
            auto z = model::tokenize(tape, P, mc, x_aug, batch.session_ids, false);
            auto zm = masked_replace(tape, z, mask, P["tokenizer.mask_token"]);
            auto reps = model::encode(tape, P, mc, zm, ctx);
            auto xhat = model::predictor_forward(tape, P, mc, reps.back(), ctx);
            auto loss = cmae_loss(tape, xhat, batch.target, mask);
            const double lv = loss->value[0];
            if (!std::isfinite(lv))
                fail("run_pretrain: diverged (non-finite loss) at epoch " + std::to_string(epoch));
            train::optimize_step(ps, tape, P, loss, cfg.schedule, lr);
            train_loss += lv * static_cast<double>(B);
            seen += B;
        }
        train_loss /= static_cast<double>(std::max<int64_t>(seen, 1));
        const double val = eval_masked_mse(ps, mc, segs, val_idx, cfg.mask, cfg.schedule.batch_size,
                                           hash_seed(cfg.seed, 0xE7A1));
        if (epoch == 0) result.epoch1_val = val;
        {
            std::ostringstream os;
            os << epoch << "," << train_loss << "," << val << "," << lr;
            csv.row(os.str());
        }
        if (stopper.update(val, epoch)) best = ps;
        result.epochs_run = epoch + 1;
        if (stopper.should_stop()) break;
    }

    if (cfg.schedule.max_epochs == 0) best = ps;  // zero-epoch run: initialized checkpoint
    result.best_epoch = stopper.best_epoch();
    result.best_val = stopper.best();

    // predictor is dropped from the published encoder checkpoint
    ParamStore<float> pub;
    for (const auto& [name, e] : best.entries())
        if (name.rfind("predictor.", 0) != 0) pub.add(name, e.value);
    model::ModelManifest manifest;
    manifest.kind = "teacher";
    manifest.config = mc;
    manifest.seed = cfg.seed;
    manifest.config_hash = config_hash;
    manifest.stage = "pretrain";
    manifest.train_session_ids = corpus.train_ids();
    model::save_model(out_ckpt, pub, manifest);
    return result;
}

}  // namespace realm::pretrain
