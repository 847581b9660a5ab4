#pragma once

#include <memory>
#include <string>

#include "moekit/geometry.hpp"
#include "moekit/model.hpp"
#include "moekit/mov.hpp"
#include "moekit/tokenizer.hpp"

namespace moekit {

struct VisionConfig {
    int target_res = 448;
    int sub_res = 224;
};

/// Everything needed to rebuild a model: vision geometry, encoder widths,
/// LM dimensions. Presets mirror the published family at desk scale.
struct SystemConfig {
    VisionConfig vision;
    MoVConfig mov;
    MoEConfig model;
    std::string preset = "moe-nano";

    std::string to_json() const;
    static SystemConfig from_json(const std::string & text);
    static SystemConfig from_preset(const std::string & name);
};

/// Full multimodal stack over a single parameter store. The two visual
/// encoders are frozen; the projection, skip token and LM train.
template <typename T> struct System {
    SystemConfig cfg;
    ParamStore<T> store;
    std::unique_ptr<Mov<T>> mov;
    std::unique_ptr<MoeLm<T>> lm;
    int skip_idx = -1;
    ByteTokenizer tokenizer;

    explicit System(const SystemConfig & config, uint64_t seed = 0)
        : cfg(config), tokenizer(config.model.vocab_size) {
        if (cfg.vision.target_res % cfg.vision.sub_res != 0)
            throw config_error("target_res must be a multiple of sub_res");
        if (cfg.mov.sub_res != cfg.vision.sub_res)
            throw config_error("MoV sub_res must match the vision sub_res");
        if (cfg.mov.d_llm != cfg.model.d_model)
            throw config_error("projection width must match d_model");
        mov = std::make_unique<Mov<T>>(cfg.mov, store);
        skip_idx = store.add("visual.skip_token", 1, cfg.model.d_model, false, 0, T(0.02));
        lm = std::make_unique<MoeLm<T>>(cfg.model, store);
        store.finalize();
        store.randomize(seed);
    }

    Eigen::Map<const MatX<T>> skip_embedding() const { return store.mat(skip_idx); }
};

} // namespace moekit
