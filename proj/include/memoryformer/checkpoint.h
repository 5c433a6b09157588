#pragma once

// Checkpoint directory layout:
//   manifest.cfg           [checkpoint] step/format plus the full run config
//   params/<name>.mfht     hash-table parameters (write_tables format)
//   params/<name>.mftn     every other parameter (MFTN tensor)
//   optimizer.bin          AdamW moments (MFOP)

#include <cstdint>
#include <filesystem>

#include "memoryformer/config.h"
#include "memoryformer/model.h"
#include "memoryformer/optimizer.h"

namespace mf {

inline constexpr std::uint32_t kCheckpointFormat = 1;

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg, std::uint64_t step,
                     LanguageModel<float>& model, const AdamW<float>* optimizer);

struct CheckpointInfo {
  RunConfig config;
  std::uint64_t step = 0;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

// Loads parameters (and optimizer state when given) into a model built from
// the checkpoint's config.
CheckpointInfo load_checkpoint(const std::filesystem::path& dir, LanguageModel<float>& model, AdamW<float>* optimizer);

// Highest-step checkpoint under run_dir/checkpoints, or empty.
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir);
std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, std::uint64_t step);

}  // namespace mf
