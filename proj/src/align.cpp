#include "realm/align.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <numeric>

namespace realm::align {

using model::ModelConfig;

Tensor<float> temporal_pool(const Tensor<float>& rep, bool mean_pool) {
    if (rep.rank() != 3) fail("temporal_pool: expected (B,T,d)");
    const int64_t B = rep.dim(0), T = rep.dim(1), d = rep.dim(2);
    Tensor<float> out({B, d});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t j = 0; j < d; ++j) {
            if (mean_pool) {
                double acc = 0;
                for (int64_t t = 0; t < T; ++t) acc += rep.at(b, t, j);
                out.at(b, j) = static_cast<float>(acc / static_cast<double>(T));
            } else {
                out.at(b, j) = rep.at(b, T - 1, j);
            }
        }
    return out;
}

Tensor<float> embed_segments(ParamStore<float>& ps, const ModelConfig& cfg,
                             const std::vector<const data::Segment*>& segs, int layer, bool mean_pool,
                             int64_t batch) {
    if (layer < 0 || layer > cfg.depth) fail("embed_segments: layer out of range");
    const int64_t M = static_cast<int64_t>(segs.size());
    Tensor<float> out({M, cfg.d_model});
    for (int64_t at = 0; at < M; at += batch) {
        const int64_t end = std::min(M, at + batch);
        std::vector<const data::Segment*> bs(segs.begin() + at, segs.begin() + end);
        auto b = train::make_batch(bs, false, false);
        auto fwd = model::eval_forward(ps, cfg, b.x, b.session_ids, false, true);
        auto pooled = temporal_pool(fwd.reps[static_cast<size_t>(layer)], mean_pool);
        std::memcpy(out.ptr() + at * cfg.d_model, pooled.ptr(),
                    sizeof(float) * static_cast<size_t>(pooled.numel()));
    }
    return out;
}

std::vector<Tensor<float>> embed_segments_all_layers(ParamStore<float>& ps, const ModelConfig& cfg,
                                                     const std::vector<const data::Segment*>& segs,
                                                     bool mean_pool, int64_t batch) {
    const int64_t M = static_cast<int64_t>(segs.size());
    std::vector<Tensor<float>> out;
    for (int l = 1; l <= cfg.depth; ++l) out.emplace_back(std::vector<int64_t>{M, cfg.d_model});
    for (int64_t at = 0; at < M; at += batch) {
        const int64_t end = std::min(M, at + batch);
        std::vector<const data::Segment*> bs(segs.begin() + at, segs.begin() + end);
        auto b = train::make_batch(bs, false, false);
        auto fwd = model::eval_forward(ps, cfg, b.x, b.session_ids, false, true);
        for (int l = 1; l <= cfg.depth; ++l) {
            auto pooled = temporal_pool(fwd.reps[static_cast<size_t>(l)], mean_pool);
            std::memcpy(out[static_cast<size_t>(l - 1)].ptr() + at * cfg.d_model, pooled.ptr(),
                        sizeof(float) * static_cast<size_t>(pooled.numel()));
        }
    }
    return out;
}

Retrieval retrieval_metrics(const Tensor<float>& teacher_emb, const Tensor<float>& student_emb) {
    if (teacher_emb.rank() != 2 || !teacher_emb.same_shape(student_emb))
        fail("retrieval: embeddings must be matching (M,d)");
    const int64_t M = teacher_emb.dim(0), d = teacher_emb.dim(1);
    if (M < 2) fail("retrieval: need at least 2 segments");
    Retrieval r;
    r.cosine = Tensor<float>({M, M});
    std::vector<double> tn(static_cast<size_t>(M)), sn(static_cast<size_t>(M));
    for (int64_t i = 0; i < M; ++i) {
        double a = 0, b = 0;
        for (int64_t j = 0; j < d; ++j) {
            a += teacher_emb.at(i, j) * teacher_emb.at(i, j);
            b += student_emb.at(i, j) * student_emb.at(i, j);
        }
        tn[static_cast<size_t>(i)] = std::max(std::sqrt(a), 1e-12);
        sn[static_cast<size_t>(i)] = std::max(std::sqrt(b), 1e-12);
    }
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < M; ++j) {
            double dot = 0;
            for (int64_t k = 0; k < d; ++k) dot += teacher_emb.at(i, k) * student_emb.at(j, k);
            r.cosine.at(i, j) = static_cast<float>(dot / (tn[static_cast<size_t>(i)] * sn[static_cast<size_t>(j)]));
        }
    int64_t top1 = 0, top5 = 0;
    double rank_sum = 0;
    for (int64_t i = 0; i < M; ++i) {
        // rank of the matched column among all columns, descending cosine, ties by index
        int64_t rank = 1;
        const float own = r.cosine.at(i, i);
        for (int64_t j = 0; j < M; ++j) {
            if (j == i) continue;
            const float v = r.cosine.at(i, j);
            if (v > own || (v == own && j < i)) ++rank;
        }
        if (rank <= 1) ++top1;
        if (rank <= 5) ++top5;
        rank_sum += static_cast<double>(rank);
    }
    r.top1 = static_cast<double>(top1) / static_cast<double>(M);
    r.top5 = static_cast<double>(top5) / static_cast<double>(M);
    r.mean_rank = rank_sum / static_cast<double>(M);
    return r;
}

double linear_cka(const Tensor<float>& x, const Tensor<float>& y) {
    if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0)) fail("cka: need (M,d1) and (M,d2)");
    const int64_t M = x.dim(0);
    if (M < 2) fail("cka: need at least 2 rows");
    Eigen::MatrixXd X(M, x.dim(1)), Y(M, y.dim(1));
    for (int64_t i = 0; i < M; ++i) {
        for (int64_t j = 0; j < x.dim(1); ++j) X(i, j) = x.at(i, j);
        for (int64_t j = 0; j < y.dim(1); ++j) Y(i, j) = y.at(i, j);
    }
    X.rowwise() -= X.colwise().mean();
    Y.rowwise() -= Y.colwise().mean();
    const double num = (Y.transpose() * X).squaredNorm();
    const double den = (X.transpose() * X).norm() * (Y.transpose() * Y).norm();
    if (den <= 0) fail("cka: zero-variance representation matrix");
    return num / den;
}

double pearson(const Tensor<float>& a, const Tensor<float>& b) {
    if (!a.same_shape(b)) fail("pearson: shape mismatch");
    const int64_t n = a.numel();
    double ma = 0, mb = 0;
    for (int64_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        dot += da * db;
        na += da * da;
        nb += db * db;
    }
    if (na <= 0 || nb <= 0) fail("pearson: zero variance");
    return dot / std::sqrt(na * nb);
}

std::vector<double> layer_pearson(const std::vector<Tensor<float>>& teacher_layers,
                                  const std::vector<Tensor<float>>& student_layers) {
    const auto lt = static_cast<int64_t>(teacher_layers.size());
    const auto ls = static_cast<int64_t>(student_layers.size());
    if (lt == 0 || ls == 0) fail("layer_pearson: empty layer sets");
    std::vector<double> out;
    for (int64_t i = 1; i <= ls; ++i) {
        const auto j = std::clamp<int64_t>(
            static_cast<int64_t>(std::llround(static_cast<double>(i) * static_cast<double>(lt) / static_cast<double>(ls))),
            1, lt);
        out.push_back(pearson(teacher_layers[static_cast<size_t>(j - 1)], student_layers[static_cast<size_t>(i - 1)]));
    }
    return out;
}

double participation_ratio(const Tensor<float>& x) {
    if (x.rank() != 2) fail("participation_ratio: expected (M,d)");
    const int64_t M = x.dim(0), d = x.dim(1);
    if (M < 2) fail("participation_ratio: need M > 1");
    Eigen::MatrixXd X(M, d);
    for (int64_t i = 0; i < M; ++i)
        for (int64_t j = 0; j < d; ++j) X(i, j) = x.at(i, j);
    X.rowwise() -= X.colwise().mean();
    Eigen::MatrixXd cov = X.transpose() * X / static_cast<double>(M);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const auto& ev = es.eigenvalues();
    double s1 = 0, s2 = 0;
    for (int64_t i = 0; i < d; ++i) {
        const double l = std::max(ev(i), 0.0);
        s1 += l;
        s2 += l * l;
    }
    if (s2 <= 0) fail("participation_ratio: all-zero covariance");
    return s1 * s1 / s2;
}

}  // namespace realm::align
