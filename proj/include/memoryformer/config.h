#pragma once

// INI run configuration: a [model] and a [train] section. Unknown keys and
// malformed values raise ConfigError. Comments must be on their own line.
//
//   [model]
//   variant = memoryformer
//   hidden = 64
//   ...
//   [train]
//   steps = 2000
//   ; relative to the config file
//   corpus = ../data/corpus/sotu.txt

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "memoryformer/model.h"

namespace mf {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  double base_lr = 1e-3;
  double table_lr_multiplier = 3.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::size_t warmup_steps = 0;  // 0: 1% of steps
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::size_t seq_len = 0;  // 0: model context
  std::uint64_t seed = 1;
  std::string corpus;
  double eval_fraction = 0.1;
  std::size_t eval_interval = 0;  // 0: only at the end
  std::size_t eval_windows = 64;
  std::size_t checkpoint_interval = 0;  // 0: only at the end
  bool sparse_table_moments = false;

  void validate() const;
  std::size_t resolved_warmup() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const;
  std::size_t seq_len() const { return train.seq_len ? train.seq_len : model.context; }
};

// Relative corpus paths are resolved against `base_dir`. A [checkpoint]
// section (checkpoint manifests) is skipped.
RunConfig parse_run_config(std::istream& is, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// key is "model.<field>" or "train.<field>".
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
// "key=value"
void apply_override(RunConfig& cfg, const std::string& assignment);

// Writes every field; parse_run_config of the output gives back `cfg` exactly.
void write_run_config(std::ostream& os, const RunConfig& cfg);
std::string to_ini(const RunConfig& cfg);

// Ablation grid: a [grid] section naming the base config plus one section per
// run whose keys are overrides.
//
//   [grid]
//   base = ../mf-micro.cfg
//   [tau4_k128]
//   model.tau = 4
//   model.chunks = 128
struct GridRun {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};

struct AblationGrid {
  std::filesystem::path base;
  std::vector<std::pair<std::string, std::string>> common;  // [grid] keys other than base
  std::vector<GridRun> runs;
};

AblationGrid load_grid(const std::filesystem::path& path);

}  // namespace mf
