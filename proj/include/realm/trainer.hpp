// Shared training machinery: corpus loading, segment batching, early
// stopping, optimizer step plumbing, and CSV artifacts that embed the config
// hash and seed.

#pragma once

#include <fstream>
#include <functional>
#include <limits>

#include "realm/data.hpp"
#include "realm/model.hpp"

namespace realm::train {

struct Corpus {
    std::vector<data::SessionRecord> train;    // preprocessed
    std::vector<data::SessionRecord> heldout;  // preprocessed
    int64_t channels = 0;
    uint64_t gen_seed = 0;
    std::string config_hash = "none";

    std::vector<int64_t> train_ids() const {
        std::vector<int64_t> ids;
        for (const auto& s : train) ids.push_back(s.session_id);
        return ids;
    }
    int64_t max_session_id() const {
        int64_t m = -1;
        for (const auto& s : train) m = std::max<int64_t>(m, s.session_id);
        for (const auto& s : heldout) m = std::max<int64_t>(m, s.session_id);
        return m;
    }
};

// writes session files + corpus.json; returns the in-memory (raw) records
void generate_corpus(const std::string& dir, int64_t n_train, int64_t n_heldout, double seconds,
                     int64_t channels, uint64_t seed, double snr, const std::string& config_hash);

// reads corpus.json and all session files, applies preprocess()
Corpus load_corpus(const std::string& dir);

// ---------------------------------------------------------------------------
// batching
// ---------------------------------------------------------------------------

struct Batch {
    Tensor<float> x;                 // (B,C,T)
    Tensor<float> target;            // (B,T,C), filled when with_target
    Tensor<float> velocity;          // (B,T,2), filled when with_velocity (counts as a label access)
    std::vector<int64_t> session_ids;
};

Batch make_batch(const std::vector<const data::Segment*>& segs, bool with_target, bool with_velocity);

std::vector<const data::Segment*> collect_segments(const std::vector<data::SessionRecord>& sessions,
                                                   std::vector<data::Segment>& storage, int64_t T,
                                                   int64_t stride);

std::vector<std::vector<int64_t>> shuffled_batches(int64_t n, int64_t batch_size, Rng& rng);

// stratified-by-session split: val_fraction of each session's segments
void split_train_val(const std::vector<const data::Segment*>& segs, double val_fraction, Rng& rng,
                     std::vector<int64_t>& train_idx, std::vector<int64_t>& val_idx);

// ---------------------------------------------------------------------------
// fitting helpers
// ---------------------------------------------------------------------------

class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {}
    // returns true when this epoch improved the best value (lower is better)
    bool update(double val, int epoch) {
        if (val < best_) {
            best_ = val;
            best_epoch_ = epoch;
            since_ = 0;
            return true;
        }
        ++since_;
        return false;
    }
    bool should_stop() const { return patience_ > 0 && since_ >= patience_; }
    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }

private:
    int patience_;
    double best_ = std::numeric_limits<double>::infinity();
    int best_epoch_ = -1;
    int since_ = 0;
};

// backward + harvest + clip + AdamW with the given lr
void optimize_step(ParamStore<float>& ps, Tape<float>& tape, BoundParams<float>& P, NodePtr<float> loss,
                   const TrainSchedule& sched, double lr);

// ---------------------------------------------------------------------------
// CSV artifact with provenance header
// ---------------------------------------------------------------------------

class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::string& header, const std::string& config_hash,
              uint64_t seed) {
        if (path.empty()) return;
        os_.open(path, std::ios::trunc);
        if (!os_) fail("csv: cannot open '" + path + "'");
        os_ << "# config_hash=" << config_hash << " seed=" << seed << "\n" << header << "\n";
    }
    void row(const std::string& line) {
        if (os_.is_open()) os_ << line << "\n";
    }
    bool active() const { return os_.is_open(); }

private:
    std::ofstream os_;
};

}  // namespace realm::train
