#include "realm/model_config.hpp"

namespace realm::model {

using nlohmann::json;

void to_json(json& j, const ModelConfig& c) {
    j = json{{"channels", c.channels},
             {"d_ch", c.d_ch},
             {"tcn_kernel", c.tcn_kernel},
             {"eca_kernel", c.eca_kernel},
             {"d_model", c.d_model},
             {"n_sessions", c.n_sessions},
             {"depth", c.depth},
             {"bidirectional", c.bidirectional},
             {"expand", c.expand},
             {"head_div", c.head_div},
             {"n_state", c.n_state},
             {"conv_kernel", c.conv_kernel},
             {"predictor_layers", c.predictor_layers},
             {"predictor_expand", c.predictor_expand},
             {"dropout", c.dropout},
             {"drop_path", c.drop_path},
             {"ln_eps", c.ln_eps},
             {"rope_base", c.rope_base},
             {"segment_len", c.segment_len},
             {"segment_stride", c.segment_stride}};
}

void from_json(const json& j, ModelConfig& c) {
    j.at("channels").get_to(c.channels);
    j.at("d_ch").get_to(c.d_ch);
    j.at("tcn_kernel").get_to(c.tcn_kernel);
    j.at("eca_kernel").get_to(c.eca_kernel);
    j.at("d_model").get_to(c.d_model);
    j.at("n_sessions").get_to(c.n_sessions);
    j.at("depth").get_to(c.depth);
    j.at("bidirectional").get_to(c.bidirectional);
    j.at("expand").get_to(c.expand);
    j.at("head_div").get_to(c.head_div);
    j.at("n_state").get_to(c.n_state);
    j.at("conv_kernel").get_to(c.conv_kernel);
    j.at("predictor_layers").get_to(c.predictor_layers);
    j.at("predictor_expand").get_to(c.predictor_expand);
    j.at("dropout").get_to(c.dropout);
    j.at("drop_path").get_to(c.drop_path);
    j.at("ln_eps").get_to(c.ln_eps);
    j.at("rope_base").get_to(c.rope_base);
    j.at("segment_len").get_to(c.segment_len);
    j.at("segment_stride").get_to(c.segment_stride);
}

ModelConfig preset(const std::string& name) {
    ModelConfig c;
    if (name == "REALM-S") {
        c.d_model = 192;
        c.depth = 8;
        c.bidirectional = false;
    } else if (name == "REALM") {
        c.d_model = 320;
        c.depth = 8;
        c.bidirectional = false;
    } else if (name == "REALM-L") {
        c.d_model = 448;
        c.depth = 8;
        c.bidirectional = false;
    } else if (name == "REALM-bi") {
        c.d_model = 192;
        c.depth = 10;
        c.bidirectional = true;
    } else if (name == "REALM-Lbi") {
        c.d_model = 256;
        c.depth = 10;
        c.bidirectional = true;
    } else if (name == "teacher") {
        // the paper-scale teacher: d_model 256, 10 BiMamba-2 layers, expand 2
        c.d_model = 256;
        c.depth = 10;
        c.bidirectional = true;
    } else if (name == "desk-teacher") {
        c.d_model = 64;
        c.depth = 6;
        c.bidirectional = true;
    } else if (name == "desk-student") {
        c.d_model = 64;
        c.depth = 4;
        c.bidirectional = false;
    } else if (name == "ci") {
        c.d_model = 64;
        c.depth = 4;
        c.bidirectional = false;
    } else {
        fail("unknown model preset '" + name + "'");
    }
    c.validate();
    return c;
}

void to_json(json& j, const ModelManifest& m) {
    j = json{{"schema", "realm-model@1"},
             {"kind", m.kind},
             {"config", m.config},
             {"seed", m.seed},
             {"config_hash", m.config_hash},
             {"stage", m.stage},
             {"train_session_ids", m.train_session_ids}};
}

void from_json(const json& j, ModelManifest& m) {
    j.at("kind").get_to(m.kind);
    j.at("config").get_to(m.config);
    j.at("seed").get_to(m.seed);
    j.at("config_hash").get_to(m.config_hash);
    j.at("stage").get_to(m.stage);
    if (j.contains("train_session_ids")) j.at("train_session_ids").get_to(m.train_session_ids);
}

}  // namespace realm::model
