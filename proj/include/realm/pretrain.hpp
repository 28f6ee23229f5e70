// Continuous masked autoencoding of the bidirectional teacher: block mask
// sampling, input augmentations, and the pretraining loop.

#pragma once

#include "realm/trainer.hpp"

namespace realm::pretrain {

struct MaskSpec {
    double ratio = 0.6;
    int64_t block_min = 10;
    int64_t block_max = 50;
};

// blocks of length l ~ Uniform{block_min..block_max} placed at uniform starts
// (overlaps merge) until the masked fraction first reaches ratio; overshoot is
// bounded by (block_max-1)/T
Tensor<uint8_t> sample_block_mask(int64_t T, const MaskSpec& spec, Rng& rng);

// iid positions, exactly round(ratio*T) of them (probe-stage masking)
Tensor<uint8_t> sample_random_mask(int64_t T, double ratio, Rng& rng);

struct AugmentCfg {
    double channel_dropout_p = 0.15;
    double jitter_min = 0.85;
    double jitter_max = 1.15;
    double noise_sigma = 0.05;

    bool identity() const {
        return channel_dropout_p <= 0 && jitter_min == 1.0 && jitter_max == 1.0 && noise_sigma <= 0;
    }
};

// per channel: dropped with p, scaled by U(jitter), then Gaussian noise added.
// Applies to the model input only; reconstruction targets stay untouched.
Tensor<float> augment(const Tensor<float>& window, const AugmentCfg& cfg, Rng& rng);

struct PretrainCfg {
    model::ModelConfig teacher;  // bidirectional
    TrainSchedule schedule;      // paper defaults below
    MaskSpec mask;
    AugmentCfg aug;
    double val_fraction = 0.1;
    uint64_t seed = 42;

    PretrainCfg() {
        teacher.bidirectional = true;
        teacher.depth = 10;
        schedule.peak_lr = 6.25e-4;
        schedule.kind = SchedulerKind::WarmupExpDecay;
        schedule.warmup_epochs = 30;
        schedule.decay_rate = 0.995;
        schedule.weight_decay = 1e-5;
        schedule.clip_norm = 1.0;
        schedule.max_epochs = 75;
        schedule.patience = 10;
        schedule.batch_size = 32;
    }
};

struct PretrainResult {
    int best_epoch = -1;
    double best_val = 0.0;
    double epoch1_val = 0.0;
    int epochs_run = 0;
};

// trains teacher+predictor, early-stops on val masked-MSE, and writes the
// encoder checkpoint (predictor entries dropped) plus a loss-curve CSV
PretrainResult run_pretrain(const train::Corpus& corpus, const PretrainCfg& cfg, const std::string& out_ckpt,
                            const std::string& csv_path, const std::string& config_hash);

}  // namespace realm::pretrain
