// Representation-alignment analyses: segment retrieval, per-layer Pearson
// correlation, linear CKA, participation ratio.

#pragma once

#include "realm/trainer.hpp"

namespace realm::align {

// (B,T,d) -> (B,d) by temporal mean pooling (default) or last-token selection
Tensor<float> temporal_pool(const Tensor<float>& rep, bool mean_pool = true);

// per-segment embedding of one layer: temporal mean pooling (default) or the
// last token; rows ordered as the segment list
Tensor<float> embed_segments(ParamStore<float>& ps, const model::ModelConfig& cfg,
                             const std::vector<const data::Segment*>& segs, int layer, bool mean_pool = true,
                             int64_t batch = 16);

// embeddings for every encoder layer (1..depth), one (M,d) matrix per layer
std::vector<Tensor<float>> embed_segments_all_layers(ParamStore<float>& ps, const model::ModelConfig& cfg,
                                                     const std::vector<const data::Segment*>& segs,
                                                     bool mean_pool = true, int64_t batch = 16);

struct Retrieval {
    double top1 = 0.0;
    double top5 = 0.0;
    double mean_rank = 0.0;
    Tensor<float> cosine;  // (M,M), teacher rows x student columns
};

// for each teacher row, rank student rows by cosine (ties by index)
Retrieval retrieval_metrics(const Tensor<float>& teacher_emb, const Tensor<float>& student_emb);

// column-center both, then |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F)
double linear_cka(const Tensor<float>& x, const Tensor<float>& y);

// student layer i of L_s pairs with teacher layer round(i * L_t / L_s); the
// inputs are per-layer (M,d) matrices over a matched segment set
std::vector<double> layer_pearson(const std::vector<Tensor<float>>& teacher_layers,
                                  const std::vector<Tensor<float>>& student_layers);

double pearson(const Tensor<float>& a, const Tensor<float>& b);

// (sum lambda)^2 / sum lambda^2 of the covariance eigenvalues
double participation_ratio(const Tensor<float>& x);

}  // namespace realm::align
