#include "realm/decode.hpp"

#include <algorithm>
#include <sstream>

namespace realm::decode {

using model::ModelConfig;
using model::RunCtx;

R2 r2_per_axis(const Tensor<float>& pred, const Tensor<float>& target) {
    if (pred.rank() != 2 || pred.dim(1) != 2 || !pred.same_shape(target)) fail("r2: expected matching (N,2)");
    const int64_t N = pred.dim(0);
    if (N < 2) fail("r2: need at least 2 samples");
    R2 out;
    double vals[2] = {0, 0};
    bool defined[2] = {true, true};
    for (int a = 0; a < 2; ++a) {
        double mean = 0;
        for (int64_t t = 0; t < N; ++t) mean += target.at(t, a);
        mean /= static_cast<double>(N);
        double ss_tot = 0, ss_res = 0;
        for (int64_t t = 0; t < N; ++t) {
            const double d = target.at(t, a) - mean;
            ss_tot += d * d;
            const double r = target.at(t, a) - pred.at(t, a);
            ss_res += r * r;
        }
        if (ss_tot <= 0) {
            defined[a] = false;
            continue;
        }
        vals[a] = 1.0 - ss_res / ss_tot;
    }
    out.x = vals[0];
    out.y = vals[1];
    out.x_defined = defined[0];
    out.y_defined = defined[1];
    if (defined[0] && defined[1])
        out.mean = 0.5 * (vals[0] + vals[1]);
    else if (defined[0])
        out.mean = vals[0];
    else if (defined[1])
        out.mean = vals[1];
    else
        fail("r2: both axes have zero target variance");
    return out;
}

void predict_session(ParamStore<float>& ps, const ModelConfig& cfg,
                     const std::vector<const data::Segment*>& segs, Tensor<float>& pred,
                     Tensor<float>& target) {
    if (segs.empty()) fail("predict_session: no segments");
    const int64_t T = segs[0]->window.dim(1);
    const int64_t N = static_cast<int64_t>(segs.size()) * T;
    pred = Tensor<float>({N, 2});
    target = Tensor<float>({N, 2});
    const int64_t batch = 16;
    for (int64_t at = 0; at < static_cast<int64_t>(segs.size()); at += batch) {
        const int64_t end = std::min<int64_t>(static_cast<int64_t>(segs.size()), at + batch);
        std::vector<const data::Segment*> bs(segs.begin() + at, segs.begin() + end);
        auto b = train::make_batch(bs, false, true);
        auto out = model::eval_forward(ps, cfg, b.x, b.session_ids, true, false);
        for (int64_t i = 0; i < end - at; ++i)
            for (int64_t t = 0; t < T; ++t)
                for (int a = 0; a < 2; ++a) {
                    pred.at((at + i) * T + t, a) = out.vel.at(i, t, a);
                    target.at((at + i) * T + t, a) = b.velocity.at(i, t, a);
                }
    }
}

namespace {

const std::vector<std::string> kFrozenPrefixes = {"tokenizer.eca.w", "tokenizer.value.", "tokenizer.sess"};

void freeze_spatial_parts(ParamStore<float>& ps) {
    for (const auto& p : kFrozenPrefixes) ps.set_trainable(p, false);
}

// supervised velocity fit over the given segment set; early stopping on a val
// slice when there are enough segments, otherwise on the train loss
void fit_velocity(ParamStore<float>& ps, const ModelConfig& cfg,
                  const std::vector<const data::Segment*>& train_segs, const TrainSchedule& sched,
                  uint64_t seed) {
    if (train_segs.empty()) fail("fit_velocity: no training segments");
    std::vector<int64_t> train_idx, val_idx;
    Rng split_rng(hash_seed(seed, 0xF17));
    if (static_cast<int64_t>(train_segs.size()) >= 5) {
        train::split_train_val(train_segs, 0.2, split_rng, train_idx, val_idx);
    } else {
        for (int64_t i = 0; i < static_cast<int64_t>(train_segs.size()); ++i) train_idx.push_back(i);
    }
    Rng epoch_rng(hash_seed(seed, 0xF18));
    Rng drop_rng(hash_seed(seed, 0xF19));
    train::EarlyStopper stopper(sched.patience);
    ParamStore<float> best = ps;

    auto run_split = [&](const std::vector<int64_t>& idx, bool training, double lr) {
        double total = 0;
        int64_t seen = 0;
        auto batches = training ? train::shuffled_batches(static_cast<int64_t>(idx.size()), sched.batch_size,
                                                          epoch_rng)
                                : std::vector<std::vector<int64_t>>();
        if (!training) {
            for (int64_t at = 0; at < static_cast<int64_t>(idx.size()); at += sched.batch_size) {
                std::vector<int64_t> chunk;
                for (int64_t i = at;
                     i < std::min<int64_t>(static_cast<int64_t>(idx.size()), at + sched.batch_size); ++i)
                    chunk.push_back(i);
                batches.push_back(chunk);
            }
        }
        for (const auto& bidx : batches) {
            std::vector<const data::Segment*> bs;
            for (int64_t i : bidx) bs.push_back(train_segs[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
            auto batch = train::make_batch(bs, false, true);
            Tape<float> tape(training);
            BoundParams<float> P(tape, ps);
            RunCtx ctx{training, training ? &drop_rng : nullptr};
            auto z = model::tokenize(tape, P, cfg, batch.x, batch.session_ids, !cfg.bidirectional);
            auto reps = model::encode(tape, P, cfg, z, ctx);
            auto vhat = model::velocity_head(tape, P, reps.back());
            auto loss = velocity_mse(tape, vhat, batch.velocity);
            const double lv = loss->value[0];
            if (!std::isfinite(lv)) fail("fit_velocity: diverged (non-finite loss)");
            if (training) train::optimize_step(ps, tape, P, loss, sched, lr);
            total += lv * static_cast<double>(bs.size());
            seen += static_cast<int64_t>(bs.size());
        }
        return total / static_cast<double>(std::max<int64_t>(seen, 1));
    };

    for (int epoch = 0; epoch < sched.max_epochs; ++epoch) {
        const double lr = sched.lr_at(epoch);
        const double train_loss = run_split(train_idx, true, lr);
        const double watch = val_idx.empty() ? train_loss : run_split(val_idx, false, 0.0);
        if (stopper.update(watch, epoch)) best = ps;
        if (stopper.should_stop()) break;
    }
    ps = best;
}

}  // namespace

FinetuneOutput finetune_session(const ParamStore<float>& start, const model::ModelManifest& mf,
                                const data::SessionRecord& session, const FinetuneCfg& cfg) {
    cfg.schedule.validate();
    if (!session.has_velocity()) fail("finetune_session: session has no velocity labels");
    const ModelConfig& mc = mf.config;
    if (session.session_id >= mc.n_sessions) fail("finetune_session: session id exceeds embedding table");

    // non-overlapping windows: a random split over stride<T segments would put
    // shared timesteps on both sides of the train/test boundary
    std::vector<data::Segment> storage;
    std::vector<data::SessionRecord> one = {session};
    auto segs = train::collect_segments(one, storage, mc.segment_len, mc.segment_len);
    const int64_t n = static_cast<int64_t>(segs.size());
    if (n < 3) fail("finetune_session: session too short to split");

    // random segment-level split: 20% test, rest is the training pool
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng split_rng(hash_seed(cfg.seed, static_cast<uint64_t>(session.session_id), 0x517));
    split_rng.shuffle(order.begin(), order.end());
    const int64_t n_test = std::max<int64_t>(2, static_cast<int64_t>(std::llround(0.2 * static_cast<double>(n))));
    if (n - n_test < 1) fail("finetune_session: fewer than 2 test segments available");
    std::vector<int64_t> test_idx(order.begin(), order.begin() + n_test);
    std::vector<int64_t> pool_idx(order.begin() + n_test, order.end());

    // label-fraction subset: a random contiguous (in time) run of pool segments
    std::sort(pool_idx.begin(), pool_idx.end(),
              [&](int64_t a, int64_t b) { return segs[static_cast<size_t>(a)]->start < segs[static_cast<size_t>(b)]->start; });
    const auto n_use = std::min<int64_t>(
        static_cast<int64_t>(pool_idx.size()),
        std::max<int64_t>(1, static_cast<int64_t>(std::llround(cfg.label_fraction * static_cast<double>(n)))));
    Rng pick_rng(hash_seed(cfg.seed, static_cast<uint64_t>(std::llround(cfg.label_fraction * 1000)), 0x11C));
    const int64_t start_at = pick_rng.uniform_int(0, static_cast<int64_t>(pool_idx.size()) - n_use);
    std::vector<const data::Segment*> train_segs;
    for (int64_t i = start_at; i < start_at + n_use; ++i)
        train_segs.push_back(segs[static_cast<size_t>(pool_idx[static_cast<size_t>(i)])]);

    FinetuneOutput out;
    out.params = start;
    // held-out sessions get the mean of trained embedding rows before finetune
    if (std::find(mf.train_session_ids.begin(), mf.train_session_ids.end(),
                  static_cast<int64_t>(session.session_id)) == mf.train_session_ids.end() &&
        !mf.train_session_ids.empty())
        model::mean_init_session_row(out.params, mc, session.session_id, mf.train_session_ids);
    freeze_spatial_parts(out.params);

    fit_velocity(out.params, mc, train_segs, cfg.schedule, hash_seed(cfg.seed, 0xF7, static_cast<uint64_t>(session.session_id)));

    std::vector<const data::Segment*> test_segs;
    for (int64_t i : test_idx) test_segs.push_back(segs[static_cast<size_t>(i)]);
    Tensor<float> pred, target;
    predict_session(out.params, mc, test_segs, pred, target);
    out.eval.r2 = r2_per_axis(pred, target);
    out.eval.session_id = session.session_id;
    out.eval.seed = cfg.seed;
    out.eval.model_tag = cfg.tag;
    out.manifest = mf;
    out.manifest.stage = "finetune";
    out.manifest.seed = cfg.seed;
    return out;
}

double retention(const std::map<double, double>& curve, bool* defined) {
    auto it20 = curve.find(0.2);
    auto it80 = curve.find(0.8);
    if (it20 == curve.end() || it80 == curve.end()) fail("retention: curve must contain ratios 0.2 and 0.8");
    if (it80->second <= 0.0) {
        if (defined) *defined = false;
        return 0.0;
    }
    if (defined) *defined = true;
    return it20->second / it80->second * 100.0;
}

void FoldEnsemble::add(ParamStore<float> member, const model::ModelManifest& mf) {
    if (members.empty()) {
        config = mf.config;
    } else {
        const auto& c = mf.config;
        if (c.d_model != config.d_model || c.depth != config.depth || c.channels != config.channels ||
            c.expand != config.expand || c.n_state != config.n_state ||
            c.bidirectional != config.bidirectional)
            fail("stack: heterogeneous member architectures");
    }
    members.push_back(std::move(member));
}

Tensor<float> stack_predict(FoldEnsemble& ens, const Tensor<float>& window, int64_t session_id) {
    if (ens.members.empty()) fail("stack: empty ensemble");
    if (window.rank() != 2) fail("stack: expected (C,T) window");
    const int64_t T = window.dim(1);
    Tensor<float> x({1, window.dim(0), T});
    std::memcpy(x.ptr(), window.ptr(), sizeof(float) * static_cast<size_t>(window.numel()));
    Tensor<float> mean({T, 2});
    for (auto& member : ens.members) {
        auto out = model::eval_forward(member, ens.config, x, {session_id}, true, false);
        for (int64_t t = 0; t < T; ++t)
            for (int a = 0; a < 2; ++a) mean.at(t, a) += out.vel.at(0, t, a);
    }
    const auto k = static_cast<float>(ens.members.size());
    for (int64_t i = 0; i < mean.numel(); ++i) mean[i] /= k;
    return mean;
}

std::vector<StackSessionResult> run_stack(const ParamStore<float>& student, const model::ModelManifest& mf,
                                          const train::Corpus& corpus, int folds, const FinetuneCfg& ft_cfg,
                                          const std::string& csv_path, const std::string& config_hash) {
    if (folds < 1) fail("run_stack: need at least one fold");
    if (static_cast<int64_t>(corpus.train.size()) < folds)
        fail("run_stack: fewer train sessions than folds");

    // disjoint folds over train sessions, round robin by index
    std::vector<std::vector<const data::SessionRecord*>> fold_sessions(static_cast<size_t>(folds));
    for (size_t i = 0; i < corpus.train.size(); ++i)
        fold_sessions[i % static_cast<size_t>(folds)].push_back(&corpus.train[i]);

    FoldEnsemble ens;
    std::vector<std::vector<data::Segment>> storages(static_cast<size_t>(folds));
    for (int f = 0; f < folds; ++f) {
        std::vector<data::SessionRecord> sess;
        for (const auto* s : fold_sessions[static_cast<size_t>(f)]) sess.push_back(*s);
        auto segs = train::collect_segments(sess, storages[static_cast<size_t>(f)], mf.config.segment_len,
                                            mf.config.segment_stride);
        ParamStore<float> member = student;
        freeze_spatial_parts(member);
        fit_velocity(member, mf.config, segs, ft_cfg.schedule, hash_seed(ft_cfg.seed, 0x57AC, static_cast<uint64_t>(f)));
        ens.add(std::move(member), mf);
    }
    // held-out sessions: mean-init their embedding rows in every member
    for (auto& member : ens.members)
        for (const auto& s : corpus.heldout)
            if (!mf.train_session_ids.empty())
                model::mean_init_session_row(member, mf.config, s.session_id, mf.train_session_ids);

    train::CsvWriter csv(csv_path, "session,fold,r2_mean,kind", config_hash, ft_cfg.seed);
    std::vector<StackSessionResult> results;
    for (const auto& s : corpus.heldout) {
        std::vector<data::Segment> storage;
        std::vector<data::SessionRecord> one = {s};
        auto segs = train::collect_segments(one, storage, mf.config.segment_len, mf.config.segment_stride);
        if (segs.empty()) continue;
        StackSessionResult r;
        r.session_id = s.session_id;
        const int64_t T = mf.config.segment_len;
        const int64_t N = static_cast<int64_t>(segs.size()) * T;
        Tensor<float> target({N, 2});
        for (size_t i = 0; i < segs.size(); ++i) {
            const auto& v = data::segment_velocity(*segs[i]);
            std::memcpy(target.ptr() + static_cast<int64_t>(i) * T * 2, v.ptr(),
                        sizeof(float) * static_cast<size_t>(T * 2));
        }
        Tensor<float> stacked({N, 2});
        for (int f = 0; f < folds; ++f) {
            Tensor<float> pred, tgt;
            predict_session(ens.members[static_cast<size_t>(f)], mf.config, segs, pred, tgt);
            const auto r2 = r2_per_axis(pred, tgt);
            r.fold_r2.push_back(r2.mean);
            r.fold_mean_r2 += r2.mean / static_cast<double>(folds);
            for (int64_t i = 0; i < N * 2; ++i) stacked[i] += pred[i] / static_cast<float>(folds);
            std::ostringstream os;
            os << s.session_id << "," << f << "," << r2.mean << ",fold";
            csv.row(os.str());
        }
        r.stacked_r2 = r2_per_axis(stacked, target).mean;
        std::ostringstream os;
        os << s.session_id << ",-1," << r.stacked_r2 << ",stacked";
        csv.row(os.str());
        results.push_back(std::move(r));
    }
    return results;
}

std::vector<FewshotCell> run_fewshot(const ParamStore<float>& start, const model::ModelManifest& mf,
                                     const std::vector<data::SessionRecord>& sessions,
                                     const std::vector<double>& ratios, const std::vector<uint64_t>& seeds,
                                     const FinetuneCfg& base_cfg, const std::string& csv_path,
                                     const std::string& config_hash) {
    train::CsvWriter csv(csv_path, "session,seed,model,ratio,r2_x,r2_y,r2_mean", config_hash,
                         seeds.empty() ? 0 : seeds[0]);
    std::vector<FewshotCell> cells;
    for (const auto& session : sessions)
        for (uint64_t seed : seeds)
            for (double ratio : ratios) {
                FinetuneCfg cfg = base_cfg;
                cfg.seed = seed;
                cfg.label_fraction = ratio;
                auto out = finetune_session(start, mf, session, cfg);
                FewshotCell cell{session.session_id, seed, ratio, out.eval.r2, cfg.tag};
                cells.push_back(cell);
                std::ostringstream os;
                os << session.session_id << "," << seed << "," << cfg.tag << "," << ratio << ","
                   << cell.r2.x << "," << cell.r2.y << "," << cell.r2.mean;
                csv.row(os.str());
            }
    return cells;
}

}  // namespace realm::decode
