#pragma once

#include <string>

#include "json.hpp"

#include "elastic/model.hpp"

namespace elastic {

// Checkpoint file layout (all integers little-endian):
//
//   bytes 0..7   magic "ELCKPT1\n"
//   u32          format version (currently 1)
//   u32          config length in bytes
//   ...          config JSON (UTF-8), echoes model/task/training configs
//   u32          number of parameter blobs
//   per blob:    u32 name length, name bytes,
//                u32 rank, u64 per dimension,
//                f32 data, row-major
//
// Floats are IEEE-754 binary32 regardless of platform.

struct Checkpoint {
  nlohmann::json config;
  ParamStore<float> params;
};

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const ParamStore<float>& params);

Checkpoint load_checkpoint(const std::string& path);

// JSON (de)serialization for configs echoed into checkpoints.
nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace elastic
