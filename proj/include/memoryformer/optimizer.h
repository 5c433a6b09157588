#pragma once

// AdamW with per-kind parameter groups: hash tables train at
// base_lr * table_lr_multiplier without weight decay; norms and biases get no
// decay either; dense matrices decay.

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "memoryformer/model.h"

namespace mf {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double table_lr_multiplier = 3.0;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  // Off: moments of every table row decay each step. On: only rows retrieved
  // in the step are touched.
  bool sparse_table_moments = false;
};

template <typename T>
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }

  // Learning rate a parameter of this kind receives for base rate `lr`.
  double group_lr(ParamKind kind, double lr) const;
  double group_weight_decay(ParamKind kind) const;

  // One update from the gradients currently stored in `params`. The list must
  // be the same (names and shapes) on every call. Returns the global gradient
  // norm before clipping.
  double step(std::vector<ParamRef<T>>& params, double lr);

  // "MFOP" | u32 version=1 | u64 t | u32 count | per parameter:
  //   u32 name length | name | MFTN m | MFTN v
  void save(std::ostream& os, const std::vector<ParamRef<T>>& params) const;
  void load(std::istream& is, const std::vector<ParamRef<T>>& params);

 private:
  void ensure_state(const std::vector<ParamRef<T>>& params);

  OptimizerConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> m_, v_;
};

// Linear warmup to `base`, then cosine decay to min_ratio * base at `total`.
struct LrSchedule {
  double base = 1e-3;
  std::size_t warmup = 0;
  std::size_t total = 1;
  double min_ratio = 0.1;
  double at(std::size_t step) const;
};

}  // namespace mf
