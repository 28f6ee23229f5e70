#include "realm/trainer.hpp"

#include <filesystem>
#include <json.hpp>

#ifdef __GLIBC__
#include <malloc.h>
namespace {
// Training tapes allocate and free hundreds of MB per batch; keep those pages
// in-process instead of bouncing them through mmap/munmap every batch.
[[maybe_unused]] const bool malloc_tuned = [] {
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, -1);
    return true;
}();
}  // namespace
#endif

namespace realm::train {

namespace fs = std::filesystem;
using nlohmann::json;

void generate_corpus(const std::string& dir, int64_t n_train, int64_t n_heldout, double seconds,
                     int64_t channels, uint64_t seed, double snr, const std::string& config_hash) {
    fs::create_directories(dir);
    data::SnrConfig snr_cfg;
    snr_cfg.snr = snr;
    json files = json::object();
    auto emit = [&](int64_t sid, const std::string& name) {
        auto s = data::generate_synthetic_session(seed, static_cast<int32_t>(sid), channels, seconds, 100.0,
                                                  snr_cfg);
        data::write_session((fs::path(dir) / name).string(), s);
        files[std::to_string(sid)] = name;
    };
    json train_ids = json::array(), heldout_ids = json::array();
    char buf[64];
    for (int64_t i = 0; i < n_train; ++i) {
        std::snprintf(buf, sizeof(buf), "session_%03lld.rlms", static_cast<long long>(i));
        emit(i, buf);
        train_ids.push_back(i);
    }
    for (int64_t i = 0; i < n_heldout; ++i) {
        const int64_t sid = n_train + i;
        std::snprintf(buf, sizeof(buf), "heldout_%03lld.rlms", static_cast<long long>(i));
        emit(sid, buf);
        heldout_ids.push_back(sid);
    }
    json j = {{"schema", "realm-corpus@1"}, {"seed", seed},       {"channels", channels},
              {"seconds", seconds},         {"snr", snr},         {"train", train_ids},
              {"heldout", heldout_ids},     {"files", files},     {"config_hash", config_hash}};
    std::ofstream os(fs::path(dir) / "corpus.json");
    if (!os) fail("generate_corpus: cannot write corpus.json");
    os << j.dump(2) << "\n";
}

Corpus load_corpus(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "corpus.json");
    if (!is) fail("load_corpus: missing corpus.json in '" + dir + "'");
    json j;
    is >> j;
    Corpus c;
    c.channels = j.at("channels").get<int64_t>();
    c.gen_seed = j.at("seed").get<uint64_t>();
    if (j.contains("config_hash")) c.config_hash = j.at("config_hash").get<std::string>();
    auto load_list = [&](const json& ids, std::vector<data::SessionRecord>& out) {
        for (const auto& id : ids) {
            const std::string name = j.at("files").at(std::to_string(id.get<int64_t>())).get<std::string>();
            auto s = data::read_session((fs::path(dir) / name).string());
            if (s.channels() != c.channels) fail("load_corpus: channel count mismatch in " + name);
            out.push_back(data::preprocess(s));
        }
    };
    load_list(j.at("train"), c.train);
    load_list(j.at("heldout"), c.heldout);
    return c;
}

Batch make_batch(const std::vector<const data::Segment*>& segs, bool with_target, bool with_velocity) {
    if (segs.empty()) fail("make_batch: empty batch");
    const int64_t B = static_cast<int64_t>(segs.size());
    const int64_t C = segs[0]->window.dim(0), T = segs[0]->window.dim(1);
    Batch b;
    b.x = Tensor<float>({B, C, T});
    if (with_target) b.target = Tensor<float>({B, T, C});
    if (with_velocity) b.velocity = Tensor<float>({B, T, 2});
    for (int64_t i = 0; i < B; ++i) {
        const auto& seg = *segs[static_cast<size_t>(i)];
        if (seg.window.dim(0) != C || seg.window.dim(1) != T) fail("make_batch: ragged segments");
        std::memcpy(b.x.ptr() + i * C * T, seg.window.ptr(), sizeof(float) * static_cast<size_t>(C * T));
        if (with_target)
            for (int64_t t = 0; t < T; ++t)
                for (int64_t c = 0; c < C; ++c) b.target.at(i, t, c) = seg.window.at(c, t);
        if (with_velocity) {
            const auto& v = data::segment_velocity(seg);
            std::memcpy(b.velocity.ptr() + i * T * 2, v.ptr(), sizeof(float) * static_cast<size_t>(T * 2));
        }
        b.session_ids.push_back(seg.session_id);
    }
    return b;
}

std::vector<const data::Segment*> collect_segments(const std::vector<data::SessionRecord>& sessions,
                                                   std::vector<data::Segment>& storage, int64_t T,
                                                   int64_t stride) {
    storage.clear();
    for (const auto& s : sessions) {
        auto w = data::segment_windows(s, T, stride);
        for (auto& seg : w) storage.push_back(std::move(seg));
    }
    std::vector<const data::Segment*> out;
    out.reserve(storage.size());
    for (const auto& seg : storage) out.push_back(&seg);
    return out;
}

std::vector<std::vector<int64_t>> shuffled_batches(int64_t n, int64_t batch_size, Rng& rng) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    rng.shuffle(idx.begin(), idx.end());
    std::vector<std::vector<int64_t>> out;
    for (int64_t at = 0; at < n; at += batch_size) {
        const int64_t end = std::min(n, at + batch_size);
        out.emplace_back(idx.begin() + at, idx.begin() + end);
    }
    return out;
}

void split_train_val(const std::vector<const data::Segment*>& segs, double val_fraction, Rng& rng,
                     std::vector<int64_t>& train_idx, std::vector<int64_t>& val_idx) {
    train_idx.clear();
    val_idx.clear();
    std::map<int32_t, std::vector<int64_t>> by_session;
    for (int64_t i = 0; i < static_cast<int64_t>(segs.size()); ++i)
        by_session[segs[static_cast<size_t>(i)]->session_id].push_back(i);
    for (auto& [sid, idx] : by_session) {
        rng.shuffle(idx.begin(), idx.end());
        const auto n_val = static_cast<int64_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
        for (int64_t i = 0; i < static_cast<int64_t>(idx.size()); ++i)
            (i < n_val ? val_idx : train_idx).push_back(idx[static_cast<size_t>(i)]);
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
}

void optimize_step(ParamStore<float>& ps, Tape<float>& tape, BoundParams<float>& P, NodePtr<float> loss,
                   const TrainSchedule& sched, double lr) {
    ps.zero_grads();
    tape.backward(loss);
    P.harvest_grads();
    ps.clip_global_norm(sched.clip_norm);
    ps.adamw_step(lr, sched.weight_decay);
}

}  // namespace realm::train
