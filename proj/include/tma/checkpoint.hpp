// Checkpoint container: magic "TMAB", version, length-prefixed JSON model
// config, a manifest of named parameter/buffer arrays, then a little-endian
// f32 payload. Loading rebuilds the model from the embedded config and
// validates every manifest entry against it, naming the first offender.
#pragma once

#include <string>

#include "tma/network.hpp"

namespace tma {

// Unknown keys are rejected; absent keys keep their value in `base`.
std::string config_to_json(const ModelConfig& config, int indent = -1);
ModelConfig config_from_json(const std::string& text, const ModelConfig& base = {});

void save_checkpoint(const std::string& path, const Model<float>& model);
Model<float> load_checkpoint(const std::string& path);

}  // namespace tma
