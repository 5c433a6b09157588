#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "memoryformer/config.h"

namespace mf {

// FLOPs columns are reported at this sequence length.
inline constexpr std::size_t kReferenceSeq = 2048;

struct AblationRow {
  std::string name;
  RunConfig config;
  std::string status = "ok";  // "ok" or "error: <message>"
  std::size_t steps = 0;
  double val_loss = 0.0, val_ppl = 0.0;
  double layer_gflops = 0.0;  // one Q/K/V layer (memory or linear)
  double block_gflops = 0.0;  // whole block, formula mode
  double layer_mb = 0.0;      // one Q/K/V memory layer, 2-byte elements
  double block_mb = 0.0;      // memory block
  double model_table_mb = 0.0;
  double seconds = 0.0;
};

struct AblationOptions {
  std::filesystem::path out_dir;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
  std::ostream* log = nullptr;
};

// Base config with the grid's common and per-run overrides applied.
std::vector<std::pair<std::string, RunConfig>> expand_grid(const AblationGrid& grid);

// Trains every run into out_dir/<name>/ with a shared seed. A failing run is
// recorded in its row and the rest continue.
std::vector<AblationRow> run_ablation(const std::vector<std::pair<std::string, RunConfig>>& runs,
                                      const AblationOptions& options);

// Accounting columns only (no training).
AblationRow describe_run(const std::string& name, const RunConfig& cfg);

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows);

}  // namespace mf
