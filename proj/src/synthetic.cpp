#include "realm/data.hpp"

namespace realm::data {

namespace {

// smoothed Ornstein-Uhlenbeck walk, two low-pass passes
std::vector<double> ou_velocity_axis(Rng& rng, int64_t n, double dt) {
    const double theta = 1.2, sigma = 1.4;
    std::vector<double> v(static_cast<size_t>(n));
    double x = 0.0;
    const double sdt = std::sqrt(dt);
    for (int64_t t = 0; t < n; ++t) {
        x += -theta * x * dt + sigma * sdt * rng.normal();
        v[static_cast<size_t>(t)] = x;
    }
    const double alpha = 0.12;
    for (int pass = 0; pass < 2; ++pass) {
        double s = v[0];
        for (int64_t t = 0; t < n; ++t) {
            s += alpha * (v[static_cast<size_t>(t)] - s);
            v[static_cast<size_t>(t)] = s;
        }
    }
    return v;
}

// two-pole resonator driven by white noise: a narrow-band oscillation
std::vector<double> bandlimited_osc(Rng& rng, int64_t n, double freq_hz, double fs) {
    const double rho = 0.95;
    const double w = 2.0 * M_PI * freq_hz / fs;
    std::vector<double> o(static_cast<size_t>(n), 0.0);
    double y1 = 0.0, y2 = 0.0;
    for (int64_t t = 0; t < n; ++t) {
        const double y = 2.0 * rho * std::cos(w) * y1 - rho * rho * y2 + rng.normal();
        y2 = y1;
        y1 = y;
        o[static_cast<size_t>(t)] = y;
    }
    return o;
}

// pink-ish noise: sum of one-pole low-passes at staggered cutoffs
std::vector<double> pink_noise(Rng& rng, int64_t n) {
    std::vector<double> out(static_cast<size_t>(n));
    double s1 = 0, s2 = 0, s3 = 0;
    for (int64_t t = 0; t < n; ++t) {
        const double w = rng.normal();
        s1 += 0.02 * (w - s1);
        s2 += 0.10 * (w - s2);
        s3 += 0.40 * (w - s3);
        out[static_cast<size_t>(t)] = 3.2 * s1 + 1.3 * s2 + 0.6 * s3 + 0.3 * w;
    }
    return out;
}

void normalize_unit_var(std::vector<double>& x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    const double inv = var > 1e-30 ? 1.0 / std::sqrt(var) : 0.0;
    for (double& v : x) v = (v - mean) * inv;
}

}  // namespace

SessionRecord generate_synthetic_session(uint64_t seed, int32_t session_id, int64_t channels,
                                         double duration_s, double fs, SnrConfig cfg,
                                         Tensor<float>* mixing_out) {
    if (duration_s < 10.0) fail("generate_synthetic_session: duration must be >= 10 s");
    if (channels < 4) fail("generate_synthetic_session: need at least 4 channels");
    const int64_t n = static_cast<int64_t>(duration_s * fs);
    const double dt = 1.0 / fs;

    // velocity stream seeded by (seed, session_id): sessions differ end to end
    Rng vel_rng(hash_seed(seed, static_cast<uint64_t>(session_id), 1));
    auto vx = ou_velocity_axis(vel_rng, n, dt);
    auto vy = ou_velocity_axis(vel_rng, n, dt);
    normalize_unit_var(vx);
    normalize_unit_var(vy);

    // feature bank: v, |v|, delayed copies (30/60/100 ms), shared oscillations
    const std::vector<int64_t> delays = {3, 6, 10};
    const std::vector<double> osc_freqs = {3.0, 7.0, 12.0, 20.0};
    std::vector<std::vector<double>> feats;
    std::vector<double> feat_w;
    feats.push_back(vx);
    feat_w.push_back(1.0);
    feats.push_back(vy);
    feat_w.push_back(1.0);
    for (const auto* axis : {&vx, &vy}) {
        std::vector<double> av(axis->begin(), axis->end());
        for (double& v : av) v = std::abs(v);
        normalize_unit_var(av);
        feats.push_back(std::move(av));
        feat_w.push_back(cfg.nonlinear_weight);
    }
    for (int64_t d : delays) {
        for (const auto* axis : {&vx, &vy}) {
            std::vector<double> dv(static_cast<size_t>(n), 0.0);
            for (int64_t t = d; t < n; ++t) dv[static_cast<size_t>(t)] = (*axis)[static_cast<size_t>(t - d)];
            feats.push_back(std::move(dv));
            feat_w.push_back(cfg.delay_weight);
        }
    }
    Rng osc_rng(hash_seed(seed, static_cast<uint64_t>(session_id), 2));
    for (double f : osc_freqs) {
        auto o = bandlimited_osc(osc_rng, n, f, fs);
        normalize_unit_var(o);
        feats.push_back(std::move(o));
        feat_w.push_back(cfg.osc_weight);
    }
    const int64_t F = static_cast<int64_t>(feats.size());

    // mixing = shared component (seed only) + session component (seed, id)
    Rng mix_common(hash_seed(seed, 0xC0117701ULL));
    Rng mix_sess(hash_seed(seed, static_cast<uint64_t>(session_id), 3));
    const double g_shared = std::sqrt(cfg.shared_mixing);
    const double g_sess = std::sqrt(1.0 - cfg.shared_mixing);
    std::vector<double> M(static_cast<size_t>(channels * F));
    for (int64_t c = 0; c < channels; ++c)
        for (int64_t f = 0; f < F; ++f)
            M[static_cast<size_t>(c * F + f)] =
                (g_shared * mix_common.normal() + g_sess * mix_sess.normal()) * feat_w[static_cast<size_t>(f)];

    if (mixing_out) {
        *mixing_out = Tensor<float>({channels, F});
        for (int64_t i = 0; i < channels * F; ++i) (*mixing_out)[i] = static_cast<float>(M[static_cast<size_t>(i)]);
    }

    SessionRecord s;
    s.session_id = session_id;
    s.sample_rate_hz = fs;
    s.signal = Tensor<float>({channels, n});
    Tensor<float> vel({n, 2});
    for (int64_t t = 0; t < n; ++t) {
        vel.at(t, 0) = static_cast<float>(vx[static_cast<size_t>(t)]);
        vel.at(t, 1) = static_cast<float>(vy[static_cast<size_t>(t)]);
    }
    s.velocity = std::move(vel);

    Rng noise_rng(hash_seed(seed, static_cast<uint64_t>(session_id), 4));
    for (int64_t c = 0; c < channels; ++c) {
        std::vector<double> mix(static_cast<size_t>(n), 0.0);
        for (int64_t f = 0; f < F; ++f) {
            const double w = M[static_cast<size_t>(c * F + f)];
            const auto& src = feats[static_cast<size_t>(f)];
            for (int64_t t = 0; t < n; ++t) mix[static_cast<size_t>(t)] += w * src[static_cast<size_t>(t)];
        }
        double sig_var = 0.0, sig_mean = 0.0;
        for (double v : mix) sig_mean += v;
        sig_mean /= static_cast<double>(n);
        for (double v : mix) sig_var += (v - sig_mean) * (v - sig_mean);
        sig_var /= static_cast<double>(n);
        auto noise = pink_noise(noise_rng, n);
        normalize_unit_var(noise);
        const double noise_amp = std::sqrt(std::max(sig_var, 1e-12) / std::max(cfg.snr, 1e-6));
        for (int64_t t = 0; t < n; ++t)
            s.signal.at(c, t) =
                static_cast<float>(mix[static_cast<size_t>(t)] + noise_amp * noise[static_cast<size_t>(t)]);
    }
    return s;
}

}  // namespace realm::data
