// Session containers, preprocessing (CAR + per-channel z-score), fixed-stride
// windowing, binary session files, and the synthetic LFP generator.

#pragma once

#include <atomic>
#include <optional>

#include "realm/tensor.hpp"

namespace realm::data {

struct SessionRecord {
    int32_t session_id = 0;
    double sample_rate_hz = 100.0;
    Tensor<float> signal;                  // (C, N)
    std::optional<Tensor<float>> velocity; // (N, 2)

    int64_t channels() const { return signal.rank() == 2 ? signal.dim(0) : 0; }
    int64_t samples() const { return signal.rank() == 2 ? signal.dim(1) : 0; }
    bool has_velocity() const { return velocity.has_value(); }
};

struct Segment {
    int32_t session_id = 0;
    int64_t start = 0;
    Tensor<float> window;                  // (C, T)
    std::optional<Tensor<float>> velocity; // (T, 2)
};

// label-access audit counter: every velocity read through segment_velocity()
// bumps it, so unsupervised paths can prove they never touched labels
std::atomic<int64_t>& velocity_reads();
const Tensor<float>& segment_velocity(const Segment& s);

// CAR then per-channel z-score (population std); z-scores velocity per axis
// when present. Channels with zero variance are zeroed and reported.
SessionRecord preprocess(const SessionRecord& raw, std::vector<int64_t>* zero_var_channels = nullptr);

// windows at offsets 0, stride, 2*stride, ... while offset+T <= N
std::vector<Segment> segment_windows(const SessionRecord& s, int64_t T = 500, int64_t stride = 250);

// binary session file, magic "RLMS" (see format doc in data.cpp)
void write_session(const std::string& path, const SessionRecord& s);
SessionRecord read_session(const std::string& path);

struct SnrConfig {
    double snr = 1.2;             // per-channel feature-to-noise variance ratio
    double nonlinear_weight = 0.6;
    double delay_weight = 0.7;
    double osc_weight = 0.8;
    double shared_mixing = 0.35;  // energy fraction of the cross-session mixing component
};

// Latent 2-D velocity (smoothed OU walk) mixed into C channels through a
// session-specific matrix over {v, |v|, delayed v, shared oscillations} plus
// pink-ish noise. Deterministic in (seed, session_id, config). mixing_out,
// when given, receives the (C,F) mixing matrix for diagnostics.
SessionRecord generate_synthetic_session(uint64_t seed, int32_t session_id, int64_t channels,
                                         double duration_s, double fs = 100.0, SnrConfig cfg = {},
                                         Tensor<float>* mixing_out = nullptr);

}  // namespace realm::data
