// Experiment configuration: a JSON document with sections
// {data, model, pretrain, distill, finetune, probe, bench, seeds}, every
// published default pre-filled, unknown keys rejected, and a content hash
// recorded in every artifact.

#pragma once

#include <json.hpp>

#include "realm/distill.hpp"
#include "realm/probe.hpp"

namespace realm::exp {

nlohmann::json default_config();

// deep-merges overrides into the defaults; unknown keys anywhere are an error
nlohmann::json merge_config(const nlohmann::json& overrides);

nlohmann::json load_config_file(const std::string& path);  // merge_config applied

// FNV-1a over the canonical dump, hex string
std::string config_hash(const nlohmann::json& cfg);

model::ModelConfig model_from_json(const nlohmann::json& model_section, const nlohmann::json& data_section);
pretrain::PretrainCfg pretrain_from_json(const nlohmann::json& cfg, uint64_t seed);
distill::DistillCfg distill_from_json(const nlohmann::json& cfg, const std::string& mode, uint64_t seed);
decode::FinetuneCfg finetune_from_json(const nlohmann::json& cfg, uint64_t seed);
probe::MaeFinetuneCfg mae_probe_stage1_from_json(const nlohmann::json& cfg, uint64_t seed);
probe::ProbeCfg probe_stage2_from_json(const nlohmann::json& cfg, uint64_t seed);

std::vector<uint64_t> seeds_from_json(const nlohmann::json& cfg);

}  // namespace realm::exp
