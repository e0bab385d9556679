#pragma once

#include <optional>
#include <string>

#include "ckda/cka.hpp"
#include "ckda/model.hpp"

namespace ckda {

// Single-file JSON archive: parameter and buffer arrays keyed by canonical
// names, stage index, EMA lambda, config hash, and the previous-stage
// prototype bank when one exists. Format version 1.
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, Model& model,
                     const std::optional<PrototypeBank>& bank, const std::string& config_hash);

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    std::optional<PrototypeBank> bank;
    std::string config_hash;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace ckda
