#include "realm/experiment.hpp"

namespace realm::exp {

using nlohmann::json;

json default_config() {
    json j;
    j["data"] = {{"channels", 96}, {"fs", 100.0},     {"sessions", 8}, {"heldout", 5},
                 {"seconds", 120.0}, {"seed", 7},     {"snr", 1.2}};
    j["model"] = {{"teacher",
                   {{"preset", "desk-teacher"}, {"d_model", -1}, {"depth", -1}, {"n_sessions", 16},
                    {"head_div", -1}, {"n_state", -1}, {"expand", -1}, {"dropout", 0.1}, {"drop_path", 0.0}}},
                  {"student",
                   {{"preset", "desk-student"}, {"d_model", -1}, {"depth", -1}, {"n_sessions", 16},
                    {"head_div", -1}, {"n_state", -1}, {"expand", -1}, {"dropout", 0.1}, {"drop_path", 0.0}}}};
    j["pretrain"] = {{"peak_lr", 6.25e-4}, {"scheduler", "warmup_exp"}, {"warmup_epochs", 30},
                     {"decay", 0.995},     {"weight_decay", 1e-5},      {"epochs", 75},
                     {"patience", 10},     {"clip", 1.0},               {"batch", 32},
                     {"mask_ratio", 0.6},  {"block_min", 10},           {"block_max", 50},
                     {"channel_dropout", 0.15}, {"jitter_min", 0.85},   {"jitter_max", 1.15},
                     {"noise_sigma", 0.05}, {"val_fraction", 0.1}};
    j["distill"] = {{"peak_lr", 5e-4},   {"min_lr", 5e-6},   {"scheduler", "cosine"},
                    {"weight_decay", 1e-5}, {"epochs", 300}, {"patience", 30},
                    {"clip", 1.0},       {"batch", 32},      {"lambda_repr", 1.0},
                    {"lambda_task", 1.0}, {"lambda_ae", 0.0}, {"ae_mask_ratio", 0.3},
                    {"unsup_lambda_ae", 1.0}, {"unsup_ae_mask_ratio", 0.6}, {"align_layers", 1},
                    {"val_fraction", 0.1}};
    j["finetune"] = {{"peak_lr", 5e-4},      {"min_lr", 5e-6}, {"weight_decay", 1e-5}, {"epochs", 150},
                     {"patience", 20},       {"clip", 1.0},    {"batch", 32},          {"label_fraction", 0.8},
                     {"ratios", {0.05, 0.1, 0.2, 0.5, 0.8}}};
    j["probe"] = {{"mae_epochs", 400},  {"mae_patience", 50}, {"mask_ratio", 0.6}, {"predictor_layers", 2},
                  {"probe_lr", 1e-3},   {"probe_epochs", 200}, {"probe_patience", 20},
                  {"probe_batch", 1024}, {"context", 0},       {"probe_kind", "linear"}, {"mlp_hidden", 64}};
    j["bench"] = {{"steps", 1000}, {"warmup", 64}, {"deadline_ms", 10.0}};
    j["seeds"] = {42, 123, 456};
    return j;
}

namespace {

void merge_into(json& base, const json& overrides, const std::string& path) {
    for (auto it = overrides.begin(); it != overrides.end(); ++it) {
        if (!base.contains(it.key()))
            fail("config: unknown key '" + (path.empty() ? it.key() : path + "." + it.key()) + "'");
        if (base[it.key()].is_object() && it.value().is_object())
            merge_into(base[it.key()], it.value(), path.empty() ? it.key() : path + "." + it.key());
        else
            base[it.key()] = it.value();
    }
}

}  // namespace

json merge_config(const json& overrides) {
    json base = default_config();
    merge_into(base, overrides, "");
    return base;
}

json load_config_file(const std::string& path) {
    if (path.empty()) return default_config();
    std::ifstream is(path);
    if (!is) fail("config: cannot open '" + path + "'");
    json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        fail("config: parse error in '" + path + "': " + e.what());
    }
    return merge_config(j);
}

std::string config_hash(const json& cfg) {
    const std::string s = cfg.dump();  // nlohmann dumps objects with sorted keys
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

model::ModelConfig model_from_json(const json& m, const json& data_section) {
    model::ModelConfig cfg = model::preset(m.at("preset").get<std::string>());
    auto ovr = [&](const char* key, auto& field) {
        using F = std::decay_t<decltype(field)>;
        if (m.contains(key)) {
            const auto v = m.at(key).get<double>();
            if (v >= 0) field = static_cast<F>(v);
        }
    };
    ovr("d_model", cfg.d_model);
    ovr("depth", cfg.depth);
    ovr("n_sessions", cfg.n_sessions);
    ovr("head_div", cfg.head_div);
    ovr("n_state", cfg.n_state);
    ovr("expand", cfg.expand);
    cfg.dropout = m.value("dropout", cfg.dropout);
    cfg.drop_path = m.value("drop_path", cfg.drop_path);
    cfg.channels = data_section.at("channels").get<int>();
    cfg.validate();
    return cfg;
}

pretrain::PretrainCfg pretrain_from_json(const json& cfg, uint64_t seed) {
    const json& p = cfg.at("pretrain");
    pretrain::PretrainCfg out;
    out.teacher = model_from_json(cfg.at("model").at("teacher"), cfg.at("data"));
    if (!out.teacher.bidirectional) fail("config: pretrain teacher preset must be bidirectional");
    out.schedule.peak_lr = p.at("peak_lr").get<double>();
    out.schedule.kind = p.at("scheduler").get<std::string>() == "cosine" ? SchedulerKind::CosineAnnealing
                                                                          : SchedulerKind::WarmupExpDecay;
    out.schedule.warmup_epochs = p.at("warmup_epochs").get<int>();
    out.schedule.decay_rate = p.at("decay").get<double>();
    out.schedule.weight_decay = p.at("weight_decay").get<double>();
    out.schedule.max_epochs = p.at("epochs").get<int>();
    out.schedule.patience = p.at("patience").get<int>();
    out.schedule.clip_norm = p.at("clip").get<double>();
    out.schedule.batch_size = p.at("batch").get<int>();
    out.mask.ratio = p.at("mask_ratio").get<double>();
    out.mask.block_min = p.at("block_min").get<int64_t>();
    out.mask.block_max = p.at("block_max").get<int64_t>();
    out.aug.channel_dropout_p = p.at("channel_dropout").get<double>();
    out.aug.jitter_min = p.at("jitter_min").get<double>();
    out.aug.jitter_max = p.at("jitter_max").get<double>();
    out.aug.noise_sigma = p.at("noise_sigma").get<double>();
    out.val_fraction = p.at("val_fraction").get<double>();
    out.seed = seed;
    return out;
}

distill::DistillCfg distill_from_json(const json& cfg, const std::string& mode, uint64_t seed) {
    const json& d = cfg.at("distill");
    distill::DistillCfg out;
    out.student = model_from_json(cfg.at("model").at("student"), cfg.at("data"));
    out.schedule.peak_lr = d.at("peak_lr").get<double>();
    out.schedule.min_lr = d.at("min_lr").get<double>();
    out.schedule.kind = d.at("scheduler").get<std::string>() == "cosine" ? SchedulerKind::CosineAnnealing
                                                                          : SchedulerKind::WarmupExpDecay;
    out.schedule.weight_decay = d.at("weight_decay").get<double>();
    out.schedule.max_epochs = d.at("epochs").get<int>();
    out.schedule.patience = d.at("patience").get<int>();
    out.schedule.clip_norm = d.at("clip").get<double>();
    out.schedule.batch_size = d.at("batch").get<int>();
    out.lambda_repr = d.at("lambda_repr").get<double>();
    out.lambda_task = d.at("lambda_task").get<double>();
    out.lambda_ae = d.at("lambda_ae").get<double>();
    out.ae_mask_ratio = d.at("ae_mask_ratio").get<double>();
    out.align_layers = d.at("align_layers").get<int>();
    out.val_fraction = d.at("val_fraction").get<double>();
    out.seed = seed;
    if (mode == "unsup") {
        out.set_unsupervised();
        out.lambda_ae = d.at("unsup_lambda_ae").get<double>();
        out.ae_mask_ratio = d.at("unsup_ae_mask_ratio").get<double>();
    } else if (mode != "sup") {
        fail("config: distill mode must be 'sup' or 'unsup'");
    }
    return out;
}

decode::FinetuneCfg finetune_from_json(const json& cfg, uint64_t seed) {
    const json& f = cfg.at("finetune");
    decode::FinetuneCfg out;
    out.schedule.peak_lr = f.at("peak_lr").get<double>();
    out.schedule.min_lr = f.at("min_lr").get<double>();
    out.schedule.weight_decay = f.at("weight_decay").get<double>();
    out.schedule.max_epochs = f.at("epochs").get<int>();
    out.schedule.patience = f.at("patience").get<int>();
    out.schedule.clip_norm = f.at("clip").get<double>();
    out.schedule.batch_size = f.at("batch").get<int>();
    out.label_fraction = f.at("label_fraction").get<double>();
    out.seed = seed;
    return out;
}

probe::MaeFinetuneCfg mae_probe_stage1_from_json(const json& cfg, uint64_t seed) {
    const json& p = cfg.at("probe");
    probe::MaeFinetuneCfg out;
    out.schedule.max_epochs = p.at("mae_epochs").get<int>();
    out.schedule.patience = p.at("mae_patience").get<int>();
    out.mask_ratio = p.at("mask_ratio").get<double>();
    out.predictor_layers = p.at("predictor_layers").get<int>();
    out.seed = seed;
    return out;
}

probe::ProbeCfg probe_stage2_from_json(const json& cfg, uint64_t seed) {
    const json& p = cfg.at("probe");
    probe::ProbeCfg out;
    out.schedule.peak_lr = p.at("probe_lr").get<double>();
    out.schedule.max_epochs = p.at("probe_epochs").get<int>();
    out.schedule.patience = p.at("probe_patience").get<int>();
    out.schedule.batch_size = p.at("probe_batch").get<int>();
    out.context = p.at("context").get<int>();
    out.kind = p.at("probe_kind").get<std::string>() == "mlp" ? probe::ProbeKind::Mlp : probe::ProbeKind::Linear;
    out.mlp_hidden = p.at("mlp_hidden").get<int>();
    out.seed = seed;
    return out;
}

std::vector<uint64_t> seeds_from_json(const json& cfg) {
    std::vector<uint64_t> out;
    for (const auto& s : cfg.at("seeds")) out.push_back(s.get<uint64_t>());
    if (out.empty()) fail("config: seeds list is empty");
    return out;
}

}  // namespace realm::exp
