// Architecture hyperparameters, named presets, and the JSON manifest that
// makes checkpoints self-describing.

#pragma once

#include <json.hpp>

#include "realm/tensor.hpp"

namespace realm::model {

struct ModelConfig {
    int channels = 96;
    int d_ch = 8;        // per-channel TCN features
    int tcn_kernel = 3;
    int eca_kernel = 5;
    int d_model = 256;
    int n_sessions = 16;
    int depth = 8;       // encoder layers
    bool bidirectional = false;
    int expand = 2;
    int head_div = 32;   // H = d_model / head_div
    int n_state = 16;    // N
    int conv_kernel = 4; // depthwise conv width in each block
    int predictor_layers = 1;
    int predictor_expand = 1;
    double dropout = 0.1;
    double drop_path = 0.0;
    double ln_eps = 1e-5;
    double rope_base = 10000.0;
    int segment_len = 500;
    int segment_stride = 250;

    int heads() const { return d_model / head_div; }
    int inner() const { return expand * d_model; }
    int head_width() const { return inner() / heads(); }                  // P
    int pred_inner() const { return predictor_expand * d_model; }
    int pred_head_width() const { return pred_inner() / heads(); }
    int flat_features() const { return channels * d_ch; }

    void validate() const {
        if (d_model % head_div != 0) fail("model config: d_model must be divisible by head_div");
        if (inner() % heads() != 0) fail("model config: expand*d_model must be divisible by heads");
        if (pred_inner() % heads() != 0) fail("model config: predictor width must be divisible by heads");
        if (n_state % 2 != 0) fail("model config: n_state must be even for RoPE");
        if (depth < 1 || channels < 1 || d_ch < 1) fail("model config: bad sizes");
    }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Named presets. Parameter counts land near the targets (checked in tests):
// REALM-S ~2.1M, REALM ~4.9M, REALM-L ~10.5M causal students; the -bi entries
// are bidirectional teachers; desk presets are the CI-scale configuration.
ModelConfig preset(const std::string& name);

struct ModelManifest {
    std::string kind;  // "teacher" | "student"
    ModelConfig config;
    uint64_t seed = 0;
    std::string config_hash = "none";
    std::string stage = "init";
    std::vector<int64_t> train_session_ids;
};

void to_json(nlohmann::json& j, const ModelManifest& m);
void from_json(const nlohmann::json& j, ModelManifest& m);

}  // namespace realm::model
