#include "realm/distill.hpp"

#include <sstream>

namespace realm::distill {

using model::ModelConfig;
using model::RunCtx;

namespace {

struct BatchLoss {
    double repr = 0.0, task = 0.0, ae = 0.0, total = 0.0;
};

// teacher representations for the last `align_layers` layers, batch eval mode
std::vector<Tensor<float>> teacher_targets(ParamStore<float>& teacher_ps, const ModelConfig& tc,
                                           const Tensor<float>& x, const std::vector<int64_t>& ids,
                                           int align_layers) {
    auto out = model::eval_forward(teacher_ps, tc, x, ids, false, true);
    std::vector<Tensor<float>> t;
    for (int j = 0; j < align_layers; ++j)
        t.push_back(out.reps[out.reps.size() - 1 - static_cast<size_t>(j)]);
    return t;
}

}  // namespace

double mean_final_cosine(ParamStore<float>& tps, const model::ModelConfig& teacher_cfg,
                         ParamStore<float>& sps, const model::ModelConfig& student_cfg,
                         const std::vector<const data::Segment*>& segs, int64_t batch_size) {
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t at = 0; at < static_cast<int64_t>(segs.size()); at += batch_size) {
        const int64_t end = std::min<int64_t>(static_cast<int64_t>(segs.size()), at + batch_size);
        std::vector<const data::Segment*> bs(segs.begin() + at, segs.begin() + end);
        auto batch = train::make_batch(bs, false, false);
        auto t_out = model::eval_forward(tps, teacher_cfg, batch.x, batch.session_ids, false, true);
        auto s_out = model::eval_forward(sps, student_cfg, batch.x, batch.session_ids, false, true);
        Tape<float> tape(false);
        auto zs = tape.leaf(s_out.reps.back(), false);
        auto l = cosine_align_loss(tape, zs, t_out.reps.back());
        acc += (1.0 - static_cast<double>(l->value[0])) * static_cast<double>(end - at);
        count += end - at;
    }
    return acc / static_cast<double>(std::max<int64_t>(count, 1));
}

DistillResult run_distill(const ParamStore<float>& teacher_ps_in, const model::ModelManifest& teacher_mf,
                          const train::Corpus& corpus, const DistillCfg& cfg, const std::string& out_ckpt,
                          const std::string& csv_path, const std::string& config_hash) {
    cfg.schedule.validate();
    const ModelConfig& tc = teacher_mf.config;
    ModelConfig sc = cfg.student;
    sc.channels = tc.channels;
    sc.n_sessions = tc.n_sessions;
    sc.d_ch = tc.d_ch;
    sc.tcn_kernel = tc.tcn_kernel;
    sc.eca_kernel = tc.eca_kernel;
    sc.segment_len = tc.segment_len;
    sc.segment_stride = tc.segment_stride;
    sc.validate();
    if (sc.d_model != tc.d_model)
        fail("run_distill: teacher/student d_model mismatch (" + std::to_string(tc.d_model) + " vs " +
             std::to_string(sc.d_model) + "); width adapters are unsupported by design");
    if (cfg.align_layers < 1 || cfg.align_layers > std::min(sc.depth, tc.depth))
        fail("run_distill: align_layers out of range");
    if (cfg.lambda_task > 0.0) {
        for (const auto& s : corpus.train)
            if (!s.has_velocity())
                fail("run_distill: corpus has unlabeled sessions; rerun with the unsupervised mode "
                     "(--mode unsup) to distill without velocity labels");
    }

    // teacher is frozen: it lives in its own store and never reaches the optimizer
    auto teacher_ps = teacher_ps_in;

    // student: fresh encoder/heads, tokenizer copied from the teacher
    auto student = model::init_model_params<float>(sc, cfg.seed, false, cfg.lambda_task > 0.0,
                                                   cfg.lambda_ae > 0.0);
    for (auto& [name, e] : student.entries())
        if (name.rfind("tokenizer.", 0) == 0) e.value = teacher_ps.value(name);

    std::vector<data::Segment> storage;
    auto segs = train::collect_segments(corpus.train, storage, sc.segment_len, sc.segment_stride);
    if (segs.empty()) fail("run_distill: corpus yields no segments");
    Rng split_rng(hash_seed(cfg.seed, 0xD15711));
    std::vector<int64_t> train_idx, val_idx;
    train::split_train_val(segs, cfg.val_fraction, split_rng, train_idx, val_idx);
    if (val_idx.empty()) val_idx.push_back(train_idx.back());
    std::vector<const data::Segment*> val_segs;
    for (int64_t i : val_idx) val_segs.push_back(segs[static_cast<size_t>(i)]);

    Rng epoch_rng(hash_seed(cfg.seed, 0xE60C4));
    Rng mask_rng(hash_seed(cfg.seed, 0x3A5D));
    Rng drop_rng(hash_seed(cfg.seed, 0xD21));
    pretrain::MaskSpec ae_mask;
    ae_mask.ratio = cfg.ae_mask_ratio;

    train::CsvWriter csv(csv_path, "epoch,repr_loss,task_loss,total,val_cosine", config_hash, cfg.seed);
    train::EarlyStopper stopper(cfg.schedule.patience);
    ParamStore<float> best = student;
    DistillResult result;
    double lr_now = 0.0;

    auto batch_forward = [&](const std::vector<const data::Segment*>& bs, bool training,
                             Rng* dropout_rng, Rng* corrupt_rng, BatchLoss& out) -> void {
        auto batch = train::make_batch(bs, cfg.lambda_ae > 0.0, cfg.lambda_task > 0.0);
        const int64_t B = batch.x.dim(0), T = batch.x.dim(2);
        auto targets = teacher_targets(teacher_ps, tc, batch.x, batch.session_ids, cfg.align_layers);

        Tape<float> tape(training);
        BoundParams<float> P(tape, student);
        RunCtx ctx{training, dropout_rng};
        auto z = model::tokenize(tape, P, sc, batch.x, batch.session_ids, !sc.bidirectional);
        if (cfg.lambda_ae > 0.0) {
            Tensor<uint8_t> mask({B, T});
            for (int64_t b = 0; b < B; ++b) {
                auto m = pretrain::sample_block_mask(T, ae_mask, *corrupt_rng);
                std::memcpy(mask.ptr() + b * T, m.ptr(), static_cast<size_t>(T));
            }
            z = masked_replace(tape, z, mask, P["tokenizer.mask_token"]);
        }
        auto reps = model::encode(tape, P, sc, z, ctx);

        NodePtr<float> loss = nullptr;
        NodePtr<float> repr_term = nullptr;
        for (int j = 0; j < cfg.align_layers; ++j) {
            auto term = cosine_align_loss(tape, reps[reps.size() - 1 - static_cast<size_t>(j)],
                                          targets[static_cast<size_t>(j)]);
            repr_term = repr_term ? add(tape, repr_term, term) : term;
        }
        repr_term = scale(tape, repr_term, static_cast<float>(1.0 / cfg.align_layers));
        out.repr = repr_term->value[0];
        loss = scale(tape, repr_term, static_cast<float>(cfg.lambda_repr));
        if (cfg.lambda_task > 0.0) {
            auto vhat = model::velocity_head(tape, P, reps.back());
            auto task = velocity_mse(tape, vhat, batch.velocity);
            out.task = task->value[0];
            loss = add(tape, loss, scale(tape, task, static_cast<float>(cfg.lambda_task)));
        }
        if (cfg.lambda_ae > 0.0) {
            auto xhat = model::recon_head(tape, P, reps.back());
            auto ae = recon_mse(tape, xhat, batch.target);
            out.ae = ae->value[0];
            loss = add(tape, loss, scale(tape, ae, static_cast<float>(cfg.lambda_ae)));
        }
        out.total = loss->value[0];
        if (!std::isfinite(out.total)) fail("run_distill: diverged (non-finite loss)");
        if (training) train::optimize_step(student, tape, P, loss, cfg.schedule, lr_now);
    };

    for (int epoch = 0; epoch < cfg.schedule.max_epochs; ++epoch) {
        lr_now = cfg.schedule.lr_at(epoch);
        BatchLoss epoch_loss;
        int64_t seen = 0;
        for (const auto& bidx : train::shuffled_batches(static_cast<int64_t>(train_idx.size()),
                                                        cfg.schedule.batch_size, epoch_rng)) {
            std::vector<const data::Segment*> bs;
            for (int64_t i : bidx) bs.push_back(segs[static_cast<size_t>(train_idx[static_cast<size_t>(i)])]);
            BatchLoss bl;
            batch_forward(bs, true, &drop_rng, &mask_rng, bl);
            const auto B = static_cast<double>(bs.size());
            epoch_loss.repr += bl.repr * B;
            epoch_loss.task += bl.task * B;
            epoch_loss.total += bl.total * B;
            seen += static_cast<int64_t>(bs.size());
        }
        const double inv = 1.0 / static_cast<double>(std::max<int64_t>(seen, 1));

        // validation: same objective with a deterministic corruption stream
        Rng val_mask_rng(hash_seed(cfg.seed, 0xE7A2));
        BatchLoss val_loss;
        int64_t val_seen = 0;
        for (int64_t at = 0; at < static_cast<int64_t>(val_segs.size()); at += cfg.schedule.batch_size) {
            const int64_t end = std::min<int64_t>(static_cast<int64_t>(val_segs.size()),
                                                  at + cfg.schedule.batch_size);
            std::vector<const data::Segment*> bs(val_segs.begin() + at, val_segs.begin() + end);
            BatchLoss bl;
            batch_forward(bs, false, nullptr, &val_mask_rng, bl);
            val_loss.total += bl.total * static_cast<double>(bs.size());
            val_seen += static_cast<int64_t>(bs.size());
        }
        val_loss.total /= static_cast<double>(std::max<int64_t>(val_seen, 1));
        const double val_cos = mean_final_cosine(teacher_ps, tc, student, sc, val_segs,
                                                 cfg.schedule.batch_size);
        {
            std::ostringstream os;
            os << epoch << "," << epoch_loss.repr * inv << "," << epoch_loss.task * inv << ","
               << epoch_loss.total * inv << "," << val_cos;
            csv.row(os.str());
        }
        if (stopper.update(val_loss.total, epoch)) {
            best = student;
            result.final_val_cosine = val_cos;
        }
        result.epochs_run = epoch + 1;
        if (stopper.should_stop()) break;
    }
    if (cfg.schedule.max_epochs == 0) best = student;
    result.best_epoch = stopper.best_epoch();
    result.best_val_total = stopper.best();

    model::ModelManifest manifest;
    manifest.kind = "student";
    manifest.config = sc;
    manifest.seed = cfg.seed;
    manifest.config_hash = config_hash;
    manifest.stage = "distill";
    manifest.train_session_ids = corpus.train_ids();
    model::save_model(out_ckpt, best, manifest);
    return result;
}

}  // namespace realm::distill
