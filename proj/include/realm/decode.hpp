// Per-session finetuning, velocity R^2 evaluation, few-shot curves, the
// retention metric, and 5-fold prediction stacking.

#pragma once

#include <map>

#include "realm/trainer.hpp"

namespace realm::decode {

struct R2 {
    double x = 0.0, y = 0.0, mean = 0.0;
    bool x_defined = true, y_defined = true;
};

// per axis 1 - SS_res/SS_tot about the target mean; zero-variance axes are
// flagged undefined and excluded from the mean
R2 r2_per_axis(const Tensor<float>& pred, const Tensor<float>& target);

struct EvalResult {
    R2 r2;
    int64_t session_id = -1;
    uint64_t seed = 0;
    std::string model_tag;
};

struct FinetuneCfg {
    double label_fraction = 0.8;  // of the whole session; 0.8 uses the full train pool
    TrainSchedule schedule;
    uint64_t seed = 42;
    std::string tag = "model";

    FinetuneCfg() {
        schedule.peak_lr = 5e-4;
        schedule.min_lr = 5e-6;
        schedule.kind = SchedulerKind::CosineAnnealing;
        schedule.warmup_epochs = 0;
        schedule.weight_decay = 1e-5;
        schedule.clip_norm = 1.0;
        schedule.max_epochs = 150;
        schedule.patience = 20;
        schedule.batch_size = 32;
    }
};

struct FinetuneOutput {
    EvalResult eval;
    ParamStore<float> params;
    model::ModelManifest manifest;
};

// random segment-level 80/20 split; spatial tokenizer parts and the session
// embedding stay frozen; encoder + velocity head train with MSE
FinetuneOutput finetune_session(const ParamStore<float>& start, const model::ModelManifest& mf,
                                const data::SessionRecord& session, const FinetuneCfg& cfg);

// prediction over every segment of a session, concatenated (N_eval, 2) plus targets
void predict_session(ParamStore<float>& ps, const model::ModelConfig& cfg,
                     const std::vector<const data::Segment*>& segs, Tensor<float>& pred,
                     Tensor<float>& target);

// R^2(20%) / R^2(80%) * 100; *defined set false when R^2(80%) <= 0
double retention(const std::map<double, double>& curve, bool* defined = nullptr);

struct FoldEnsemble {
    std::vector<ParamStore<float>> members;
    model::ModelConfig config;

    void add(ParamStore<float> member, const model::ModelManifest& mf);
};

// elementwise mean of the K per-timestep member predictions for one window
Tensor<float> stack_predict(FoldEnsemble& ens, const Tensor<float>& window, int64_t session_id);

struct StackSessionResult {
    int64_t session_id = -1;
    std::vector<double> fold_r2;
    double fold_mean_r2 = 0.0;
    double stacked_r2 = 0.0;
};

// partition train sessions into K folds, finetune one member per fold from the
// distilled student, evaluate per-fold and stacked predictions on held-out sessions
std::vector<StackSessionResult> run_stack(const ParamStore<float>& student, const model::ModelManifest& mf,
                                          const train::Corpus& corpus, int folds, const FinetuneCfg& ft_cfg,
                                          const std::string& csv_path, const std::string& config_hash);

struct FewshotCell {
    int64_t session_id = -1;
    uint64_t seed = 0;
    double ratio = 0.0;
    R2 r2;
    std::string tag;
};

std::vector<FewshotCell> run_fewshot(const ParamStore<float>& start, const model::ModelManifest& mf,
                                     const std::vector<data::SessionRecord>& sessions,
                                     const std::vector<double>& ratios, const std::vector<uint64_t>& seeds,
                                     const FinetuneCfg& base_cfg, const std::string& csv_path,
                                     const std::string& config_hash);

}  // namespace realm::decode
