#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>

#include "realm/data.hpp"

using namespace realm;
using namespace realm::data;

namespace {

// independent decodability oracle: closed-form ridge regression from +/-10-lag
// channel features to velocity, trained on the first half, scored on the second
double ridge_lag_r2(const SessionRecord& s, double lambda = 10.0) {
    const int64_t C = s.channels(), N = s.samples(), L = 10;
    const int64_t F = C * (2 * L + 1) + 1;  // + bias column
    const int64_t lo = L, hi = N - L;
    const int64_t n_rows = hi - lo;
    const int64_t n_train = n_rows / 2;
    Eigen::MatrixXd X(n_rows, F);
    Eigen::MatrixXd Y(n_rows, 2);
    for (int64_t r = 0; r < n_rows; ++r) {
        const int64_t t = lo + r;
        int64_t f = 0;
        for (int64_t c = 0; c < C; ++c)
            for (int64_t lag = -L; lag <= L; ++lag) X(r, f++) = s.signal.at(c, t + lag);
        X(r, f) = 1.0;
        Y(r, 0) = (*s.velocity).at(t, 0);
        Y(r, 1) = (*s.velocity).at(t, 1);
    }
    const auto Xtr = X.topRows(n_train);
    const auto Ytr = Y.topRows(n_train);
    Eigen::MatrixXd G = Xtr.transpose() * Xtr;
    G.diagonal().array() += lambda;
    Eigen::MatrixXd W = G.ldlt().solve(Xtr.transpose() * Ytr);
    const auto Xte = X.bottomRows(n_rows - n_train);
    const auto Yte = Y.bottomRows(n_rows - n_train);
    Eigen::MatrixXd P = Xte * W;
    double r2_sum = 0;
    for (int a = 0; a < 2; ++a) {
        const double mean = Yte.col(a).mean();
        const double ss_tot = (Yte.col(a).array() - mean).square().sum();
        const double ss_res = (Yte.col(a) - P.col(a)).array().square().sum();
        r2_sum += 1.0 - ss_res / ss_tot;
    }
    return r2_sum / 2.0;
}

}  // namespace

TEST_CASE("preprocess: constant signal collapses to zero with flags") {
    SessionRecord s;
    s.signal = Tensor<float>::full({3, 20}, 2.5f);
    std::vector<int64_t> flags;
    auto out = preprocess(s, &flags);
    for (int64_t i = 0; i < out.signal.numel(); ++i) CHECK(out.signal[i] == 0.f);
    CHECK(flags.size() == 3);  // CAR removes the common value, all channels flat
}

TEST_CASE("preprocess: hand-computed CAR + z-score") {
    // channels [1,3] and [3,1]: CAR -> [-1,1],[1,-1]; z-score (pop std 1) -> same
    SessionRecord s;
    s.signal = Tensor<float>({2, 2}, {1, 3, 3, 1});
    auto out = preprocess(s);
    CHECK(out.signal.at(0, 0) == doctest::Approx(-1));
    CHECK(out.signal.at(0, 1) == doctest::Approx(1));
    CHECK(out.signal.at(1, 0) == doctest::Approx(1));
    CHECK(out.signal.at(1, 1) == doctest::Approx(-1));
}

TEST_CASE("preprocess: statistics on a synthetic 96-channel session") {
    auto s = generate_synthetic_session(7, 0, 96, 120.0);
    auto out = preprocess(s);
    const int64_t N = out.samples();
    for (int64_t c = 0; c < out.channels(); ++c) {
        double mean = 0, var = 0;
        for (int64_t t = 0; t < N; ++t) mean += out.signal.at(c, t);
        mean /= static_cast<double>(N);
        for (int64_t t = 0; t < N; ++t) {
            const double d = out.signal.at(c, t) - mean;
            var += d * d;
        }
        var /= static_cast<double>(N);
        CHECK(std::abs(mean) < 1e-6);
        CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-5);
    }
}

TEST_CASE("preprocess is idempotent to 1e-6") {
    auto s = generate_synthetic_session(8, 1, 12, 30.0);
    auto once = preprocess(s);
    auto twice = preprocess(once);
    for (int64_t i = 0; i < once.signal.numel(); ++i)
        CHECK(std::abs(once.signal[i] - twice.signal[i]) < 1e-5f);
}

TEST_CASE("segment_windows: offsets, exact fit, underfull") {
    SessionRecord s;
    s.session_id = 3;
    s.signal = Tensor<float>({2, 1000});
    for (int64_t i = 0; i < s.signal.numel(); ++i) s.signal[i] = static_cast<float>(i);
    Tensor<float> v({1000, 2});
    for (int64_t i = 0; i < v.numel(); ++i) v[i] = static_cast<float>(i);
    s.velocity = v;

    auto w = segment_windows(s, 500, 250);
    REQUIRE(w.size() == 3);
    CHECK(w[0].start == 0);
    CHECK(w[1].start == 250);
    CHECK(w[2].start == 500);
    CHECK(w[1].window.at(0, 0) == s.signal.at(0, 250));
    CHECK((*w[1].velocity).at(0, 0) == (*s.velocity).at(250, 0));
    CHECK(w[0].session_id == 3);

    SessionRecord exact;
    exact.signal = Tensor<float>({1, 500});
    CHECK(segment_windows(exact, 500, 250).size() == 1);
    SessionRecord under;
    under.signal = Tensor<float>({1, 499});
    CHECK(segment_windows(under, 500, 250).empty());
}

TEST_CASE("segmentation covers interior samples T/stride times when stride divides T") {
    SessionRecord s;
    s.signal = Tensor<float>({1, 2000});
    const int64_t T = 500, stride = 250;
    auto w = segment_windows(s, T, stride);
    std::vector<int> cover(2000, 0);
    for (const auto& seg : w)
        for (int64_t t = seg.start; t < seg.start + T; ++t) cover[static_cast<size_t>(t)]++;
    for (int64_t t = T; t + T < 2000; ++t) CHECK(cover[static_cast<size_t>(t)] == T / stride);
}

TEST_CASE("synthetic generator: shapes, determinism, distinct mixing, decodability") {
    const double dur = 60.0;
    auto s = generate_synthetic_session(42, 0, 96, dur);
    CHECK(s.signal.shape == std::vector<int64_t>{96, static_cast<int64_t>(dur * 100)});
    CHECK((*s.velocity).shape == std::vector<int64_t>{static_cast<int64_t>(dur * 100), 2});
    CHECK(s.signal.all_finite());

    // bit-identical reproduction
    auto s2 = generate_synthetic_session(42, 0, 96, dur);
    CHECK(s.signal.data == s2.signal.data);
    CHECK(s.velocity->data == s2.velocity->data);

    // same seed, different session id: distinct mixing matrices (corr < 0.5)
    Tensor<float> m0, m1;
    (void)generate_synthetic_session(42, 0, 24, 10.0, 100.0, {}, &m0);
    (void)generate_synthetic_session(42, 1, 24, 10.0, 100.0, {}, &m1);
    double dot = 0, n0 = 0, n1 = 0, mu0 = 0, mu1 = 0;
    for (int64_t i = 0; i < m0.numel(); ++i) {
        mu0 += m0[i];
        mu1 += m1[i];
    }
    mu0 /= static_cast<double>(m0.numel());
    mu1 /= static_cast<double>(m1.numel());
    for (int64_t i = 0; i < m0.numel(); ++i) {
        dot += (m0[i] - mu0) * (m1[i] - mu1);
        n0 += (m0[i] - mu0) * (m0[i] - mu0);
        n1 += (m1[i] - mu1) * (m1[i] - mu1);
    }
    CHECK(std::abs(dot / std::sqrt(n0 * n1)) < 0.5);

    // generator-quality gate: lagged ridge regression beats R^2 = 0.3
    auto pre = preprocess(s);
    const double r2 = ridge_lag_r2(pre);
    INFO("ridge oracle R2 = ", r2);
    CHECK(r2 > 0.3);

    CHECK_THROWS(generate_synthetic_session(1, 0, 96, 5.0));  // too short
}

TEST_CASE("session file round-trip is bit-exact; errors are distinct") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "realm_data_test";
    fs::create_directories(dir);
    auto s = generate_synthetic_session(5, 9, 8, 12.0);
    const std::string path = (dir / "s.rlms").string();
    write_session(path, s);
    auto r = read_session(path);
    CHECK(r.session_id == 9);
    CHECK(r.sample_rate_hz == s.sample_rate_hz);
    CHECK(r.signal.shape == s.signal.shape);
    CHECK(r.signal.data == s.signal.data);      // bit-exact
    CHECK(r.velocity->data == s.velocity->data);

    {
        std::ofstream os(dir / "bad.rlms", std::ios::binary);
        os << "XXXX";
    }
    CHECK_THROWS_WITH_AS(read_session((dir / "bad.rlms").string()), doctest::Contains("magic"), std::runtime_error);

    {
        std::ifstream is(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        std::ofstream os(dir / "trunc.rlms", std::ios::binary);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 64));
    }
    CHECK_THROWS_WITH_AS(read_session((dir / "trunc.rlms").string()), doctest::Contains("truncated"),
                         std::runtime_error);

    {
        std::ofstream os(dir / "ver.rlms", std::ios::binary);
        os << "RLMS";
        uint32_t v = 42;
        os.write(reinterpret_cast<char*>(&v), 4);
    }
    CHECK_THROWS_WITH_AS(read_session((dir / "ver.rlms").string()), doctest::Contains("version"),
                         std::runtime_error);
}

TEST_CASE("velocity access audit counter") {
    auto s = generate_synthetic_session(6, 2, 8, 12.0);
    auto segs = segment_windows(s, 500, 250);
    REQUIRE(!segs.empty());
    const int64_t before = velocity_reads().load();
    (void)segment_velocity(segs[0]);
    CHECK(velocity_reads().load() == before + 1);
    Segment bare;
    bare.window = Tensor<float>({1, 4});
    CHECK_THROWS(segment_velocity(bare));
}
