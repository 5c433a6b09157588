#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <stdexcept>

#include "memoryformer/config.h"
#include "memoryformer/data.h"
#include "memoryformer/model.h"
#include "memoryformer/optimizer.h"

namespace mf {

// Non-finite loss or gradient during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalResult {
  double loss = 0.0;  // mean token NLL (nats)
  double ppl = 0.0;   // exp(loss)
  std::size_t tokens = 0;
};

// exp(mean NLL) over non-overlapping validation windows.
template <typename T>
EvalResult evaluate_ppl(const LanguageModel<T>& model, const CorpusDataset& data, std::size_t seq,
                        std::size_t batch, std::size_t max_windows);

// zero_grad, forward, cross-entropy, backward, AdamW update. Returns the loss.
template <typename T>
double train_step(LanguageModel<T>& model, AdamW<T>& optimizer, const Batch& batch, double lr);

struct StepMetrics {
  std::size_t step = 0;  // steps completed after this update
  double loss = 0.0;
  double lr = 0.0;
  double tokens_per_sec = 0.0;
};

OptimizerConfig optimizer_config(const TrainConfig& cfg);
LrSchedule lr_schedule(const TrainConfig& cfg);

class Trainer {
 public:
  Trainer(RunConfig cfg, std::shared_ptr<const CorpusDataset> data);

  const RunConfig& config() const { return cfg_; }
  LanguageModel<float>& model() { return model_; }
  const AdamW<float>& optimizer() const { return optimizer_; }
  std::size_t step() const { return step_; }
  bool done() const { return step_ >= cfg_.train.steps; }

  StepMetrics train_one();
  EvalResult evaluate() const;

  void save(const std::filesystem::path& dir);
  void resume(const std::filesystem::path& checkpoint);

 private:
  RunConfig cfg_;
  std::shared_ptr<const CorpusDataset> data_;
  LanguageModel<float> model_;
  AdamW<float> optimizer_;
  LrSchedule schedule_;
  std::size_t step_ = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  bool resume = false;       // continue from the latest checkpoint in out_dir
  std::ostream* log = nullptr;
  std::size_t log_every = 100;
};

struct TrainSummary {
  std::size_t steps = 0;
  std::size_t resumed_from = 0;
  EvalResult final_eval;
  std::filesystem::path last_checkpoint;
};

// Trains to cfg.train.steps, writing into out_dir:
//   run.cfg, manifest.json, metrics.csv (step,loss,lr,tokens_per_sec),
//   eval.csv (step,val_loss,val_ppl), checkpoints/step_NNNNNNNN/
TrainSummary run_training(const RunConfig& cfg, const TrainOptions& options);

}  // namespace mf
