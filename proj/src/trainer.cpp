#include "memoryformer/trainer.h"

#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <ostream>
#include <sstream>

#include "memoryformer/checkpoint.h"
#include "memoryformer/version.h"

namespace mf {

namespace fs = std::filesystem;

template <typename T>
EvalResult evaluate_ppl(const LanguageModel<T>& model, const CorpusDataset& data, std::size_t seq,
                        std::size_t batch, std::size_t max_windows) {
  if (data.validation().empty()) throw std::invalid_argument("evaluate_ppl: empty validation shard");
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const Batch& b : data.validation_batches(batch, seq, max_windows)) {
    const Tensor<T> logits = model.forward(b.tokens, b.batch);
    nll += cross_entropy(logits, std::span<const std::int32_t>(b.targets)).loss * static_cast<double>(b.tokens.size());
    tokens += b.tokens.size();
  }
  EvalResult r;
  r.tokens = tokens;
  r.loss = nll / static_cast<double>(tokens);
  r.ppl = std::exp(r.loss);
  return r;
}

template <typename T>
double train_step(LanguageModel<T>& model, AdamW<T>& optimizer, const Batch& batch, double lr) {
  model.zero_grad();
  double loss = 0.0;
  try {
    loss = model.loss(batch.tokens, batch.targets, batch.batch, true);
  } catch (const NonFiniteError& e) {
    throw DivergenceError(std::string("training diverged: ") + e.what());
  }
  if (!std::isfinite(loss)) throw DivergenceError("training diverged: loss is " + std::to_string(loss));
  auto params = model.parameters();
  try {
    optimizer.step(params, lr);
  } catch (const NonFiniteError& e) {
    throw DivergenceError(std::string("training diverged: ") + e.what());
  }
  return loss;
}

OptimizerConfig optimizer_config(const TrainConfig& cfg) {
  OptimizerConfig o;
  o.beta1 = cfg.beta1;
  o.beta2 = cfg.beta2;
  o.eps = cfg.eps;
  o.weight_decay = cfg.weight_decay;
  o.table_lr_multiplier = cfg.table_lr_multiplier;
  o.grad_clip = cfg.grad_clip;
  o.sparse_table_moments = cfg.sparse_table_moments;
  return o;
}

LrSchedule lr_schedule(const TrainConfig& cfg) { return {cfg.base_lr, cfg.resolved_warmup(), cfg.steps, 0.1}; }

Trainer::Trainer(RunConfig cfg, std::shared_ptr<const CorpusDataset> data)
    : cfg_(std::move(cfg)),
      data_(std::move(data)),
      model_((cfg_.validate(), cfg_.model), cfg_.train.seed),
      optimizer_(optimizer_config(cfg_.train)),
      schedule_(lr_schedule(cfg_.train)) {
  if (!data_) throw std::invalid_argument("trainer: no dataset");
  if (cfg_.model.vocab < data_->vocab()) throw ConfigError("model.vocab must be >= 256 for byte corpora");
}

StepMetrics Trainer::train_one() {
  const auto t0 = std::chrono::steady_clock::now();
  const Batch batch = data_->sample(cfg_.train.batch_size, cfg_.seq_len(), cfg_.train.seed, step_);
  const double lr = schedule_.at(step_);
  const double loss = train_step(model_, optimizer_, batch, lr);
  ++step_;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {step_, loss, lr, secs > 0 ? static_cast<double>(batch.tokens.size()) / secs : 0.0};
}

EvalResult Trainer::evaluate() const {
  return evaluate_ppl(model_, *data_, cfg_.seq_len(), cfg_.train.batch_size, cfg_.train.eval_windows);
}

void Trainer::save(const fs::path& dir) { save_checkpoint(dir, cfg_, step_, model_, &optimizer_); }

void Trainer::resume(const fs::path& checkpoint) {
  const CheckpointInfo info = load_checkpoint(checkpoint, model_, &optimizer_);
  if (to_ini(RunConfig{info.config.model, cfg_.train}) != to_ini(RunConfig{cfg_.model, cfg_.train})) {
    throw ConfigError("resume: checkpoint model config differs from the run config");
  }
  step_ = info.step;
}

namespace {

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::ofstream open_csv(const fs::path& path, const char* header, bool append) {
  const bool fresh = !append || !fs::exists(path);
  std::ofstream out(path, fresh ? std::ios::trunc : std::ios::app);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (fresh) out << header << '\n';
  out << std::setprecision(9);
  return out;
}

// Drops rows past `step` so a resumed run does not duplicate them.
void truncate_csv(const fs::path& path, std::size_t step) {
  if (!fs::exists(path)) return;
  std::ifstream in(path);
  std::string line, kept;
  bool header = true;
  while (std::getline(in, line)) {
    if (header || std::stoull(line.substr(0, line.find(','))) <= step) kept += line + '\n';
    header = false;
  }
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

}  // namespace

TrainSummary run_training(const RunConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (options.out_dir.empty()) throw std::invalid_argument("run_training: no output directory");
  if (cfg.train.corpus.empty()) throw ConfigError("train.corpus is not set");
  auto data = std::make_shared<const CorpusDataset>(CorpusDataset::from_file(cfg.train.corpus, cfg.train.eval_fraction));
  fs::create_directories(options.out_dir);

  Trainer trainer(cfg, data);
  TrainSummary summary;
  const fs::path resume_from = options.resume ? latest_checkpoint(options.out_dir) : fs::path{};
  if (!resume_from.empty()) {
    trainer.resume(resume_from);
    summary.resumed_from = trainer.step();
    truncate_csv(options.out_dir / "metrics.csv", trainer.step());
    truncate_csv(options.out_dir / "eval.csv", trainer.step());
  }
  const bool append = !resume_from.empty();
  {
    std::ofstream(options.out_dir / "run.cfg") << to_ini(cfg);
  }
  nlohmann::json manifest = {
      {"version", kVersion},
      {"seed", cfg.train.seed},
      {"config", to_ini(cfg)},
      {"started", timestamp()},
      {"resumed_from_step", summary.resumed_from},
      {"layout",
       {{"config", "run.cfg"},
        {"metrics", "metrics.csv"},
        {"eval", "eval.csv"},
        {"checkpoints", "checkpoints/step_NNNNNNNN"}}},
  };
  auto metrics = open_csv(options.out_dir / "metrics.csv", "step,loss,lr,tokens_per_sec", append);
  auto evals = open_csv(options.out_dir / "eval.csv", "step,val_loss,val_ppl", append);

  const auto& tc = cfg.train;
  while (!trainer.done()) {
    const StepMetrics m = trainer.train_one();
    metrics << m.step << ',' << m.loss << ',' << m.lr << ',' << m.tokens_per_sec << '\n';
    if (options.log && options.log_every && (m.step % options.log_every == 0 || m.step == 1)) {
      std::ostringstream line;
      line << "step " << m.step << "/" << tc.steps << "  loss " << std::fixed << std::setprecision(4) << m.loss
           << "  lr " << std::scientific << std::setprecision(2) << m.lr << "  "
           << static_cast<long>(m.tokens_per_sec) << " tok/s";
      *options.log << line.str() << std::endl;
    }
    if (tc.eval_interval && m.step % tc.eval_interval == 0 && !trainer.done()) {
      const EvalResult e = trainer.evaluate();
      evals << m.step << ',' << e.loss << ',' << e.ppl << '\n';
    }
    if (tc.checkpoint_interval && m.step % tc.checkpoint_interval == 0 && !trainer.done()) {
      metrics.flush();
      trainer.save(checkpoint_dir(options.out_dir, m.step));
    }
  }
  summary.steps = trainer.step();
  summary.final_eval = trainer.evaluate();
  evals << summary.steps << ',' << summary.final_eval.loss << ',' << summary.final_eval.ppl << '\n';
  summary.last_checkpoint = checkpoint_dir(options.out_dir, summary.steps);
  trainer.save(summary.last_checkpoint);
  if (options.log) {
    *options.log << "validation loss " << summary.final_eval.loss << "  ppl " << summary.final_eval.ppl << std::endl;
  }

  manifest["finished"] = timestamp();
  manifest["steps"] = summary.steps;
  manifest["final"] = {{"val_loss", summary.final_eval.loss}, {"val_ppl", summary.final_eval.ppl}};
  std::ofstream(options.out_dir / "manifest.json") << manifest.dump(2) << '\n';
  return summary;
}

template EvalResult evaluate_ppl(const LanguageModel<float>&, const CorpusDataset&, std::size_t, std::size_t,
                                 std::size_t);
template EvalResult evaluate_ppl(const LanguageModel<double>&, const CorpusDataset&, std::size_t, std::size_t,
                                 std::size_t);
template double train_step(LanguageModel<float>&, AdamW<float>&, const Batch&, double);
template double train_step(LanguageModel<double>&, AdamW<double>&, const Batch&, double);

}  // namespace mf
