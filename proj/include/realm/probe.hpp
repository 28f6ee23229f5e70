// Fully-unsupervised baseline: per-session MAE finetuning of the encoder,
// then a frozen-representation probe decoding velocity, optionally with a
// +/-K-step context window.

#pragma once

#include "realm/decode.hpp"

namespace realm::probe {

enum class ProbeKind { Linear, Mlp };

struct ProbeCfg {
    int context = 0;  // K: 0 or 10
    ProbeKind kind = ProbeKind::Linear;
    int mlp_hidden = 64;
    TrainSchedule schedule;
    uint64_t seed = 42;

    ProbeCfg() {
        schedule.peak_lr = 1e-3;
        schedule.min_lr = 0.0;
        schedule.kind = SchedulerKind::CosineAnnealing;
        schedule.warmup_epochs = 0;
        schedule.weight_decay = 1e-5;
        schedule.clip_norm = 1.0;
        schedule.max_epochs = 200;
        schedule.patience = 20;
        schedule.batch_size = 1024;  // rows of per-timestep features
    }
};

struct MaeFinetuneCfg {
    TrainSchedule schedule;
    double mask_ratio = 0.6;  // random (non-block) masking
    int predictor_layers = 2;
    double val_fraction = 0.2;
    uint64_t seed = 42;

    MaeFinetuneCfg() {
        schedule.peak_lr = 6.25e-4;
        schedule.kind = SchedulerKind::WarmupExpDecay;
        schedule.warmup_epochs = 0;
        schedule.decay_rate = 0.995;
        schedule.weight_decay = 1e-5;
        schedule.clip_norm = 1.0;
        schedule.max_epochs = 400;
        schedule.patience = 50;
        schedule.batch_size = 32;
    }
};

struct MaeFinetuneResult {
    ParamStore<float> params;  // adapted encoder, predictor dropped
    model::ModelManifest manifest;
    double epoch1_val = 0.0;
    double best_val = 0.0;
    int epochs_run = 0;
};

// continues CMAE on a single unlabeled session with random masking and
// augmentation disabled; a fresh predictor is trained and then discarded
MaeFinetuneResult mae_session_finetune(const ParamStore<float>& backbone, const model::ModelManifest& mf,
                                       const data::SessionRecord& session, const MaeFinetuneCfg& cfg);

// (T,d) representation -> (T,(2K+1)*d) rows of t-K..t+K context, zero-padded
// at the segment edges
Tensor<float> context_features(const Tensor<float>& rep, int K);

// trains the probe on frozen representations (labels used only here) and
// reports per-axis R^2 on the held-out split
decode::EvalResult probe_train_eval(const ParamStore<float>& frozen, const model::ModelManifest& mf,
                                    const data::SessionRecord& session, const ProbeCfg& cfg);

}  // namespace realm::probe
