// Session file format, little-endian:
//   magic "RLMS", u32 version=1, u32 session_id, f64 sample_rate,
//   u32 C, u64 N, u8 has_velocity, f32 signal row-major C×N,
//   then (if present) f32 velocity row-major N×2.

#include "realm/data.hpp"

#include <cstring>
#include <fstream>

namespace realm::data {

std::atomic<int64_t>& velocity_reads() {
    static std::atomic<int64_t> counter{0};
    return counter;
}

const Tensor<float>& segment_velocity(const Segment& s) {
    if (!s.velocity) fail("segment_velocity: segment has no labels (unsupervised data)");
    velocity_reads().fetch_add(1, std::memory_order_relaxed);
    return *s.velocity;
}

SessionRecord preprocess(const SessionRecord& raw, std::vector<int64_t>* zero_var_channels) {
    if (raw.signal.rank() != 2) fail("preprocess: signal must be (C,N)");
    const int64_t C = raw.channels(), N = raw.samples();
    if (!raw.signal.all_finite()) fail("preprocess: non-finite input signal");
    SessionRecord out = raw;

    // Alternate CAR and per-channel z-scoring (population std) to their joint
    // fixed point: z-scoring with unequal channel scales re-introduces a small
    // cross-channel mean, so a single pass is not idempotent. Channels that hit
    // zero variance are zeroed, flagged, and stay dead.
    std::vector<double> work(static_cast<size_t>(C * N));
    for (int64_t i = 0; i < C * N; ++i) work[static_cast<size_t>(i)] = raw.signal[i];
    std::vector<uint8_t> dead(static_cast<size_t>(C), 0);

    for (int iter = 0; iter < 64; ++iter) {
        double max_shift = 0.0;
        for (int64_t t = 0; t < N; ++t) {
            double mean = 0.0;
            for (int64_t c = 0; c < C; ++c) mean += work[static_cast<size_t>(c * N + t)];
            mean /= static_cast<double>(C);
            max_shift = std::max(max_shift, std::abs(mean));
            for (int64_t c = 0; c < C; ++c) work[static_cast<size_t>(c * N + t)] -= mean;
        }
        double max_scale_err = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            if (dead[static_cast<size_t>(c)]) {
                for (int64_t t = 0; t < N; ++t) work[static_cast<size_t>(c * N + t)] = 0.0;
                continue;
            }
            double mean = 0.0;
            for (int64_t t = 0; t < N; ++t) mean += work[static_cast<size_t>(c * N + t)];
            mean /= static_cast<double>(N);
            double var = 0.0;
            for (int64_t t = 0; t < N; ++t) {
                const double d = work[static_cast<size_t>(c * N + t)] - mean;
                var += d * d;
            }
            var /= static_cast<double>(N);
            if (var < 1e-24) {
                dead[static_cast<size_t>(c)] = 1;
                for (int64_t t = 0; t < N; ++t) work[static_cast<size_t>(c * N + t)] = 0.0;
                continue;
            }
            max_scale_err = std::max(max_scale_err, std::abs(std::sqrt(var) - 1.0));
            const double inv_std = 1.0 / std::sqrt(var);
            for (int64_t t = 0; t < N; ++t)
                work[static_cast<size_t>(c * N + t)] = (work[static_cast<size_t>(c * N + t)] - mean) * inv_std;
        }
        if (iter > 0 && max_shift < 1e-9 && max_scale_err < 1e-9) break;
    }
    for (int64_t i = 0; i < C * N; ++i) out.signal[i] = static_cast<float>(work[static_cast<size_t>(i)]);
    if (zero_var_channels)
        for (int64_t c = 0; c < C; ++c)
            if (dead[static_cast<size_t>(c)]) zero_var_channels->push_back(c);

    // velocity targets z-scored per axis; R^2 is invariant to this affine map
    if (out.velocity) {
        auto& v = *out.velocity;
        if (v.rank() != 2 || v.dim(1) != 2 || v.dim(0) != N) fail("preprocess: velocity must be (N,2)");
        for (int64_t a = 0; a < 2; ++a) {
            double mean = 0.0;
            for (int64_t t = 0; t < N; ++t) mean += v.at(t, a);
            mean /= static_cast<double>(N);
            double var = 0.0;
            for (int64_t t = 0; t < N; ++t) {
                const double d = v.at(t, a) - mean;
                var += d * d;
            }
            var /= static_cast<double>(N);
            const double inv_std = var < 1e-24 ? 0.0 : 1.0 / std::sqrt(var);
            for (int64_t t = 0; t < N; ++t)
                v.at(t, a) = static_cast<float>((v.at(t, a) - mean) * inv_std);
        }
    }
    return out;
}

std::vector<Segment> segment_windows(const SessionRecord& s, int64_t T, int64_t stride) {
    if (T <= 0 || stride <= 0) fail("segment_windows: T and stride must be positive");
    std::vector<Segment> out;
    const int64_t C = s.channels(), N = s.samples();
    if (N < T) return out;  // underfull session: empty list
    for (int64_t off = 0; off + T <= N; off += stride) {
        Segment seg;
        seg.session_id = s.session_id;
        seg.start = off;
        seg.window = Tensor<float>({C, T});
        for (int64_t c = 0; c < C; ++c)
            std::memcpy(seg.window.ptr() + c * T, s.signal.ptr() + c * N + off, sizeof(float) * static_cast<size_t>(T));
        if (s.velocity) {
            Tensor<float> v({T, 2});
            std::memcpy(v.ptr(), s.velocity->ptr() + off * 2, sizeof(float) * static_cast<size_t>(T * 2));
            seg.velocity = std::move(v);
        }
        out.push_back(std::move(seg));
    }
    return out;
}

namespace {

template <typename V>
void write_pod(std::ofstream& os, const V& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
void read_pod(std::ifstream& is, V& v, const char* what) {
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) fail(std::string("session file: truncated while reading ") + what);
}

}  // namespace

void write_session(const std::string& path, const SessionRecord& s) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail("session file: cannot open '" + path + "' for writing");
    os.write("RLMS", 4);
    write_pod(os, uint32_t{1});
    write_pod(os, static_cast<uint32_t>(s.session_id));
    write_pod(os, s.sample_rate_hz);
    write_pod(os, static_cast<uint32_t>(s.channels()));
    write_pod(os, static_cast<uint64_t>(s.samples()));
    write_pod(os, static_cast<uint8_t>(s.has_velocity() ? 1 : 0));
    os.write(reinterpret_cast<const char*>(s.signal.ptr()),
             static_cast<std::streamsize>(sizeof(float) * s.signal.data.size()));
    if (s.velocity)
        os.write(reinterpret_cast<const char*>(s.velocity->ptr()),
                 static_cast<std::streamsize>(sizeof(float) * s.velocity->data.size()));
    if (!os) fail("session file: write failed for '" + path + "'");
}

SessionRecord read_session(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("session file: cannot open '" + path + "'");
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "RLMS") fail("session file: bad magic in '" + path + "'");
    uint32_t version = 0;
    read_pod(is, version, "version");
    if (version != 1)
        fail("session file: version mismatch in '" + path + "': file " + std::to_string(version) + ", supported 1");
    SessionRecord s;
    uint32_t sid = 0, C = 0;
    uint64_t N = 0;
    uint8_t has_vel = 0;
    read_pod(is, sid, "session id");
    read_pod(is, s.sample_rate_hz, "sample rate");
    read_pod(is, C, "channel count");
    read_pod(is, N, "sample count");
    read_pod(is, has_vel, "velocity flag");
    s.session_id = static_cast<int32_t>(sid);
    s.signal = Tensor<float>({static_cast<int64_t>(C), static_cast<int64_t>(N)});
    const auto want_sig = static_cast<std::streamsize>(sizeof(float) * s.signal.data.size());
    is.read(reinterpret_cast<char*>(s.signal.ptr()), want_sig);
    if (is.gcount() != want_sig)
        fail("session file: truncated signal payload in '" + path + "': expected " + std::to_string(want_sig) +
             " bytes, got " + std::to_string(is.gcount()));
    if (has_vel) {
        Tensor<float> v({static_cast<int64_t>(N), 2});
        const auto want_vel = static_cast<std::streamsize>(sizeof(float) * v.data.size());
        is.read(reinterpret_cast<char*>(v.ptr()), want_vel);
        if (is.gcount() != want_vel)
            fail("session file: truncated velocity payload in '" + path + "': expected " + std::to_string(want_vel) +
                 " bytes, got " + std::to_string(is.gcount()));
        s.velocity = std::move(v);
    }
    return s;
}

}  // namespace realm::data
