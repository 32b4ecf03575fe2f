#pragma once

// Checkpoints are directories: a plain-text manifest (tensor names, shapes,
// byte offsets, learning-rate scales, run identity) next to one raw
// little-endian float32 blob. Loading then saving reproduces both files
// byte for byte.

#include <cstdint>
#include <string>
#include <vector>

#include "mmcqa/model.hpp"

namespace mmcqa {

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::string variant;
  std::string stage;   // "stage1" | "stage2" | "stage3"
  std::uint64_t epoch = 0;
  std::vector<double> metric_history;  // validation metric per completed epoch
};

void save_checkpoint(const std::string& dir, const ParamStore<float>& params,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  ParamStore<float> params;
  CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::string& dir);

// Resume guard: throws when the stored config hash differs.
LoadedCheckpoint load_checkpoint(const std::string& dir, std::uint64_t expected_config_hash);

}  // namespace mmcqa
