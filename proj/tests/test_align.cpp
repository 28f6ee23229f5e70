#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include "realm/align.hpp"

using namespace realm;
using namespace realm::align;

namespace {

Tensor<float> random_mat(int64_t m, int64_t d, uint64_t seed) {
    Rng rng(seed);
    return randn<float>({m, d}, rng);
}

// direct-formula CKA oracle, straight double loops
double cka_oracle(const Tensor<float>& x, const Tensor<float>& y) {
    const int64_t M = x.dim(0), d1 = x.dim(1), d2 = y.dim(1);
    std::vector<double> xc(M * d1), yc(M * d2);
    for (int64_t j = 0; j < d1; ++j) {
        double mu = 0;
        for (int64_t i = 0; i < M; ++i) mu += x.at(i, j);
        mu /= M;
        for (int64_t i = 0; i < M; ++i) xc[i * d1 + j] = x.at(i, j) - mu;
    }
    for (int64_t j = 0; j < d2; ++j) {
        double mu = 0;
        for (int64_t i = 0; i < M; ++i) mu += y.at(i, j);
        mu /= M;
        for (int64_t i = 0; i < M; ++i) yc[i * d2 + j] = y.at(i, j) - mu;
    }
    auto gram = [&](const std::vector<double>& a, int64_t da, const std::vector<double>& b, int64_t db,
                    int64_t r, int64_t c) {
        double acc = 0;
        for (int64_t i = 0; i < M; ++i) acc += a[i * da + r] * b[i * db + c];
        return acc;
    };
    double num = 0;
    for (int64_t r = 0; r < d2; ++r)
        for (int64_t c = 0; c < d1; ++c) {
            const double v = gram(yc, d2, xc, d1, r, c);
            num += v * v;
        }
    double nx = 0, ny = 0;
    for (int64_t r = 0; r < d1; ++r)
        for (int64_t c = 0; c < d1; ++c) {
            const double v = gram(xc, d1, xc, d1, r, c);
            nx += v * v;
        }
    for (int64_t r = 0; r < d2; ++r)
        for (int64_t c = 0; c < d2; ++c) {
            const double v = gram(yc, d2, yc, d2, r, c);
            ny += v * v;
        }
    return num / (std::sqrt(nx) * std::sqrt(ny));
}

}  // namespace

TEST_CASE("linear CKA: identity, invariances, symmetry, direct-formula oracle") {
    auto x = random_mat(12, 5, 1);
    CHECK(linear_cka(x, x) == doctest::Approx(1.0).epsilon(1e-10));

    // invariance to isotropic scaling and orthogonal rotation
    Eigen::MatrixXd R = Eigen::MatrixXd::Random(5, 5);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(R);
    Eigen::MatrixXd Q = qr.householderQ();
    Tensor<float> xq({12, 5});
    for (int64_t i = 0; i < 12; ++i)
        for (int64_t j = 0; j < 5; ++j) {
            double acc = 0;
            for (int64_t k = 0; k < 5; ++k) acc += x.at(i, k) * Q(k, j);
            xq.at(i, j) = static_cast<float>(-2.5 * acc);  // c != 0 times orthogonal Q
        }
    CHECK(linear_cka(x, xq) == doctest::Approx(1.0).epsilon(1e-6));

    auto y = random_mat(12, 7, 2);
    const double xy = linear_cka(x, y);
    CHECK(xy == doctest::Approx(linear_cka(y, x)).epsilon(1e-10));
    CHECK(xy >= 0.0);
    CHECK(xy <= 1.0);

    auto a = random_mat(4, 2, 3);
    auto b = random_mat(4, 2, 4);
    CHECK(linear_cka(a, b) == doctest::Approx(cka_oracle(a, b)).epsilon(1e-12));

    Tensor<float> flat = Tensor<float>::full({4, 2}, 1.f);
    CHECK_THROWS(linear_cka(flat, a));
}

TEST_CASE("retrieval: identity, random baseline, permutation invariance, ordering") {
    auto e = random_mat(20, 6, 5);
    auto r = retrieval_metrics(e, e);
    CHECK(r.top1 == doctest::Approx(1.0));
    CHECK(r.top5 == doctest::Approx(1.0));
    CHECK(r.mean_rank == doctest::Approx(1.0));

    // independent random embeddings: mean rank ~ (M+1)/2 within 5%
    const int64_t M = 1000;
    auto et = random_mat(M, 8, 6);
    auto es = random_mat(M, 8, 7);
    auto rr = retrieval_metrics(et, es);
    INFO("random mean rank ", rr.mean_rank);
    CHECK(std::abs(rr.mean_rank - 500.5) / 500.5 < 0.05);
    CHECK(rr.top1 <= rr.top5);
    CHECK(rr.mean_rank >= 1.0);

    // simultaneous identical row permutation leaves all three metrics unchanged
    auto et2 = random_mat(16, 4, 8);
    auto es2 = random_mat(16, 4, 9);
    auto base = retrieval_metrics(et2, es2);
    std::vector<int64_t> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    Rng prng(10);
    prng.shuffle(perm.begin(), perm.end());
    Tensor<float> pt({16, 4}), ps({16, 4});
    for (int64_t i = 0; i < 16; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            pt.at(i, j) = et2.at(perm[static_cast<size_t>(i)], j);
            ps.at(i, j) = es2.at(perm[static_cast<size_t>(i)], j);
        }
    auto permuted = retrieval_metrics(pt, ps);
    CHECK(permuted.top1 == doctest::Approx(base.top1));
    CHECK(permuted.top5 == doctest::Approx(base.top5));
    CHECK(permuted.mean_rank == doctest::Approx(base.mean_rank));

    Tensor<float> one({1, 4});
    CHECK_THROWS(retrieval_metrics(one, one));
}

TEST_CASE("pearson: exact cases and a null bound") {
    auto x = random_mat(40, 6, 11);
    CHECK(pearson(x, x) == doctest::Approx(1.0));
    Tensor<float> neg = x;
    for (auto& v : neg.data) v = -v;
    CHECK(pearson(x, neg) == doctest::Approx(-1.0));
    auto noise = random_mat(200, 64, 12);
    auto noise2 = random_mat(200, 64, 13);
    CHECK(std::abs(pearson(noise, noise2)) < 0.05);
}

TEST_CASE("layer pearson pairing follows round(i*Lt/Ls)") {
    // 2 student layers against 4 teacher layers: i=1 -> teacher 2, i=2 -> teacher 4
    std::vector<Tensor<float>> teacher;
    for (int l = 0; l < 4; ++l) teacher.push_back(random_mat(10, 3, 20 + static_cast<uint64_t>(l)));
    std::vector<Tensor<float>> student = {teacher[1], teacher[3]};  // copies of the paired layers
    auto r = layer_pearson(teacher, student);
    REQUIRE(r.size() == 2);
    CHECK(r[0] == doctest::Approx(1.0));
    CHECK(r[1] == doctest::Approx(1.0));
}

TEST_CASE("participation ratio: rank-1, isotropic, hand eigenvalues, invariances") {
    // rank-1 data
    Tensor<float> r1({6, 4});
    Rng rng(14);
    std::vector<double> dir = {0.5, -1.0, 2.0, 0.25};
    for (int64_t i = 0; i < 6; ++i) {
        const double c = rng.normal();
        for (int64_t j = 0; j < 4; ++j) r1.at(i, j) = static_cast<float>(c * dir[static_cast<size_t>(j)]);
    }
    CHECK(participation_ratio(r1) == doctest::Approx(1.0).epsilon(1e-6));

    // exactly isotropic sample covariance: rows (+-e_j scaled)
    const int64_t d = 5;
    Tensor<float> iso({2 * d, d});
    for (int64_t j = 0; j < d; ++j) {
        iso.at(2 * j, j) = 1.f;
        iso.at(2 * j + 1, j) = -1.f;
    }
    CHECK(participation_ratio(iso) == doctest::Approx(static_cast<double>(d)).epsilon(1e-9));

    // eigenvalues {4,1} -> 25/17
    Tensor<float> h({4, 2}, {2, 1, 2, -1, -2, 1, -2, -1});
    CHECK(participation_ratio(h) == doctest::Approx(25.0 / 17.0).epsilon(1e-9));

    // invariant to orthogonal rotation and isotropic scaling
    auto x = random_mat(30, 4, 15);
    const double base = participation_ratio(x);
    Eigen::MatrixXd R = Eigen::MatrixXd::Random(4, 4);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(R);
    Eigen::MatrixXd Q = qr.householderQ();
    Tensor<float> xr({30, 4});
    for (int64_t i = 0; i < 30; ++i)
        for (int64_t j = 0; j < 4; ++j) {
            double acc = 0;
            for (int64_t k = 0; k < 4; ++k) acc += x.at(i, k) * Q(k, j);
            xr.at(i, j) = static_cast<float>(3.0 * acc);
        }
    CHECK(participation_ratio(xr) == doctest::Approx(base).epsilon(1e-5));
    CHECK(base >= 1.0);
    CHECK(base <= 4.0);

    CHECK_THROWS(participation_ratio(Tensor<float>({4, 3})));  // all-zero covariance
}

TEST_CASE("temporal pooling: constant vector, linearity, shape") {
    Rng rng(16);
    Tensor<float> rep({3, 7, 4});
    // segment 0 constant in time
    for (int64_t j = 0; j < 4; ++j)
        for (int64_t t = 0; t < 7; ++t) rep.at(0, t, j) = static_cast<float>(j) - 1.5f;
    for (int64_t b = 1; b < 3; ++b)
        for (int64_t t = 0; t < 7; ++t)
            for (int64_t j = 0; j < 4; ++j) rep.at(b, t, j) = static_cast<float>(rng.normal());
    auto pooled = temporal_pool(rep, true);
    CHECK(pooled.shape == std::vector<int64_t>{3, 4});
    for (int64_t j = 0; j < 4; ++j) CHECK(pooled.at(0, j) == doctest::Approx(static_cast<double>(j) - 1.5));

    // pooling is linear: pool(a+b) = pool(a) + pool(b)
    Tensor<float> a({1, 5, 3}), b({1, 5, 3}), sum({1, 5, 3});
    for (int64_t i = 0; i < a.numel(); ++i) {
        a[i] = static_cast<float>(rng.normal());
        b[i] = static_cast<float>(rng.normal());
        sum[i] = a[i] + b[i];
    }
    auto pa = temporal_pool(a, true), pb = temporal_pool(b, true), psum = temporal_pool(sum, true);
    for (int64_t j = 0; j < 3; ++j) CHECK(psum.at(0, j) == doctest::Approx(pa.at(0, j) + pb.at(0, j)).epsilon(1e-5));

    // last-token mode
    auto last = temporal_pool(rep, false);
    for (int64_t j = 0; j < 4; ++j) CHECK(last.at(1, j) == rep.at(1, 6, j));
}
