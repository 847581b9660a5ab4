#include "moekit/system.hpp"

#include "json.hpp"

namespace moekit {

std::string SystemConfig::to_json() const {
    nlohmann::json j;
    j["preset"] = preset;
    j["vision"] = {{"target_res", vision.target_res}, {"sub_res", vision.sub_res}};
    j["mov"] = {{"d_attn", mov.d_attn},   {"d_conv", mov.d_conv},
                {"patch", mov.patch},     {"d_llm", mov.d_llm},
                {"sub_res", mov.sub_res}, {"n_attn_blocks", mov.n_attn_blocks},
                {"conv_stages", mov.conv_stages}};
    j["model"] = {{"n_experts", model.n_experts}, {"k_active", model.k_active},
                  {"d_model", model.d_model},     {"d_ff", model.d_ff},
                  {"n_layers", model.n_layers},   {"n_heads", model.n_heads},
                  {"vocab_size", model.vocab_size}, {"aux_loss_weight", model.aux_loss_weight},
                  {"max_seq", model.max_seq}};
    return j.dump(2);
}

SystemConfig SystemConfig::from_json(const std::string & text) {
    nlohmann::json j = nlohmann::json::parse(text);
    SystemConfig cfg;
    cfg.preset = j.value("preset", "custom");
    const auto & v = j.at("vision");
    cfg.vision.target_res = v.at("target_res").get<int>();
    cfg.vision.sub_res = v.at("sub_res").get<int>();
    const auto & m = j.at("mov");
    cfg.mov.d_attn = m.at("d_attn").get<int>();
    cfg.mov.d_conv = m.at("d_conv").get<int>();
    cfg.mov.patch = m.at("patch").get<int>();
    cfg.mov.d_llm = m.at("d_llm").get<int>();
    cfg.mov.sub_res = m.at("sub_res").get<int>();
    cfg.mov.n_attn_blocks = m.value("n_attn_blocks", 2);
    cfg.mov.conv_stages = m.value("conv_stages", 0);
    const auto & lm = j.at("model");
    cfg.model.n_experts = lm.at("n_experts").get<int>();
    cfg.model.k_active = lm.at("k_active").get<int>();
    cfg.model.d_model = lm.at("d_model").get<int>();
    cfg.model.d_ff = lm.at("d_ff").get<int>();
    cfg.model.n_layers = lm.at("n_layers").get<int>();
    cfg.model.n_heads = lm.at("n_heads").get<int>();
    cfg.model.vocab_size = lm.at("vocab_size").get<int>();
    cfg.model.aux_loss_weight = lm.value("aux_loss_weight", 0.f);
    cfg.model.max_seq = lm.value("max_seq", 2048);
    return cfg;
}

SystemConfig SystemConfig::from_preset(const std::string & name) {
    SystemConfig cfg;
    cfg.preset = name;
    cfg.model = moe_nano();
    cfg.mov.d_llm = cfg.model.d_model;
    if (name == "moe-nano") {
        // 448px canvas, 2x2 sub-images, coarse 112px patches keep toy runs fast
        cfg.mov.patch = 112;
    } else if (name == "moe-nano-fine") {
        cfg.mov.patch = 32;
    } else if (name == "dense-nano") {
        // dense stand-in for the non-MoE family members: one expert, k = 1
        cfg.model.n_experts = 1;
        cfg.model.k_active = 1;
        cfg.mov.patch = 112;
    } else if (name == "plus-2k-nano") {
        // 672px canvas divided 3x3, mirroring the high-resolution variant
        cfg.vision.target_res = 672;
        cfg.model.n_experts = 1;
        cfg.model.k_active = 1;
        cfg.mov.patch = 112;
    } else {
        throw config_error("unknown preset: " + name +
                           " (moe-nano|moe-nano-fine|dense-nano|plus-2k-nano)");
    }
    return cfg;
}

} // namespace moekit
