#pragma once

#include <optional>
#include <string>
#include <vector>

#include "moekit/system.hpp"

namespace moekit {

/// Optimizer state and progress, persisted next to the parameters so a run
/// can resume bit-identically.
struct TrainState {
    long step = 0;
    std::vector<float> adam_m;
    std::vector<float> adam_v;
};

/// Layout on disk:
///   <dir>/config.json                 system configuration
///   <dir>/manifest.json               name -> shape/file for each array
///   <dir>/<name>.f32                  raw little-endian float32, row-major
///   <dir>/optim/...                   optional Adam moments + progress
void save_checkpoint(const std::string & dir, const System<float> & sys,
                     const TrainState * state = nullptr);

struct LoadedCheckpoint {
    SystemConfig config;
    std::optional<TrainState> state;
};

/// Loads config + parameters; the returned System is freshly constructed and
/// then overwritten with the stored arrays.
LoadedCheckpoint load_checkpoint_into(const std::string & dir, std::unique_ptr<System<float>> & sys);

} // namespace moekit
