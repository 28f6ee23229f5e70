// Retrospective knowledge distillation: frozen bidirectional teacher into a
// trainable causal (or bidirectional) student, with a velocity task term
// (supervised) or reconstruction term (unsupervised).

#pragma once

#include "realm/pretrain.hpp"

namespace realm::distill {

struct DistillCfg {
    model::ModelConfig student;  // causal by default; a -bi student is allowed
    double lambda_repr = 1.0;
    double lambda_task = 1.0;  // 0 in unsupervised mode
    double lambda_ae = 0.0;    // 1.0 in unsupervised mode, 0.1 in the supervised ablation
    double ae_mask_ratio = 0.3;  // 0.6 in unsupervised mode
    int align_layers = 1;        // last-k student layers aligned to last-k teacher layers
    TrainSchedule schedule;
    double val_fraction = 0.1;
    uint64_t seed = 42;

    DistillCfg() {
        student.bidirectional = false;
        student.depth = 8;
        schedule.peak_lr = 5e-4;
        schedule.min_lr = 5e-6;
        schedule.kind = SchedulerKind::CosineAnnealing;
        schedule.warmup_epochs = 0;
        schedule.weight_decay = 1e-5;
        schedule.clip_norm = 1.0;
        schedule.max_epochs = 300;
        schedule.patience = 30;
        schedule.batch_size = 32;
    }

    void set_unsupervised() {
        lambda_task = 0.0;
        lambda_ae = 1.0;
        ae_mask_ratio = 0.6;
        align_layers = 1;
    }
};

struct DistillResult {
    int best_epoch = -1;
    double best_val_total = 0.0;
    double final_val_cosine = 0.0;
    int epochs_run = 0;
};

DistillResult run_distill(const ParamStore<float>& teacher_ps, const model::ModelManifest& teacher_mf,
                          const train::Corpus& corpus, const DistillCfg& cfg, const std::string& out_ckpt,
                          const std::string& csv_path, const std::string& config_hash);

// mean per-timestep cosine between student and teacher final-layer
// representations over a segment set, clean inputs, eval mode
double mean_final_cosine(ParamStore<float>& teacher_ps, const model::ModelConfig& teacher_cfg,
                         ParamStore<float>& student_ps, const model::ModelConfig& student_cfg,
                         const std::vector<const data::Segment*>& segs, int64_t batch_size);

}  // namespace realm::distill
