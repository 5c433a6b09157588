#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "memoryformer/checkpoint.h"
#include "memoryformer/config.h"
#include "memoryformer/trainer.h"

using namespace mf;
namespace fs = std::filesystem;

namespace {

fs::path repo_root() { return fs::path(MEMORYFORMER_SOURCE_DIR); }
fs::path corpus_path() { return repo_root() / "data" / "corpus" / "sotu.txt"; }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(MEMORYFORMER_TEST_SCRATCH) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const CorpusDataset& corpus() {
  static const CorpusDataset data = CorpusDataset::from_file(corpus_path(), 0.1);
  return data;
}

std::shared_ptr<const CorpusDataset> shared_corpus() {
  static const auto data = std::make_shared<const CorpusDataset>(CorpusDataset::from_file(corpus_path(), 0.1));
  return data;
}

RunConfig micro() {
  RunConfig cfg = load_run_config(repo_root() / "configs" / "mf-micro.cfg");
  return cfg;
}

RunConfig tiny() {
  RunConfig cfg = micro();
  cfg.model.n_layers = 1;
  cfg.model.hidden = 16;
  cfg.model.tau = 4;
  cfg.model.chunks = 4;
  cfg.model.context = 16;
  cfg.train.batch_size = 4;
  cfg.train.steps = 10;
  cfg.train.eval_windows = 8;
  return cfg;
}

std::vector<std::vector<float>> snapshot(LanguageModel<float>& model) {
  std::vector<std::vector<float>> out;
  for (auto& p : model.parameters()) out.emplace_back(p.value->values().begin(), p.value->values().end());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---- config -----------------------------------------------------------------

TEST(RunConfig, ShippedConfigsParse) {
  const RunConfig mf = micro();
  EXPECT_EQ(mf.model.variant, Variant::memoryformer);
  EXPECT_EQ(mf.model.n_layers, 2u);
  EXPECT_EQ(mf.model.hidden, 64u);
  EXPECT_EQ(mf.model.heads, 2u);
  EXPECT_EQ(mf.model.tau, 8u);
  EXPECT_EQ(mf.model.chunks, 8u);
  EXPECT_EQ(mf.model.context, 128u);
  EXPECT_DOUBLE_EQ(mf.train.table_lr_multiplier, 3.0);
  EXPECT_TRUE(fs::exists(mf.train.corpus));
  const RunConfig base = load_run_config(repo_root() / "configs" / "baseline-micro.cfg");
  EXPECT_EQ(base.model.variant, Variant::baseline);
  EXPECT_EQ(base.model.hidden, mf.model.hidden);
  EXPECT_EQ(base.model.n_layers, mf.model.n_layers);
  EXPECT_EQ(base.model.heads, mf.model.heads);
  EXPECT_EQ(to_ini(RunConfig{mf.model, base.train}), to_ini(RunConfig{mf.model, mf.train}));
}

TEST(RunConfig, WriteParseRoundTrip) {
  RunConfig cfg = micro();
  cfg.train.base_lr = 0.1 + 0.2;  // not exactly representable in short decimal
  cfg.model.temperature = 0.7;
  cfg.model.residual = ResidualWiring::literal;
  cfg.train.sparse_table_moments = true;
  std::istringstream in(to_ini(cfg));
  const RunConfig back = parse_run_config(in);
  EXPECT_EQ(to_ini(back), to_ini(cfg));
  EXPECT_EQ(back.train.base_lr, cfg.train.base_lr);
}

TEST(RunConfig, Errors) {
  auto parse = [](const std::string& text) {
    std::istringstream in(text);
    return parse_run_config(in);
  };
  EXPECT_THROW(parse("[model]\nwidth = 3\n"), ConfigError);
  EXPECT_THROW(parse("[model]\nhidden = abc\n"), ConfigError);
  EXPECT_THROW(parse("[model]\nhidden = 12x\n"), ConfigError);
  EXPECT_THROW(parse("[optim]\nlr = 1\n"), ConfigError);
  EXPECT_THROW(parse("[train]\ntable_lr_multiplier = 0\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nsteps = 10\nwarmup_steps = 11\n"), ConfigError);
  EXPECT_THROW(parse("[model]\nhidden = 60\n"), ConfigError);  // 60 != 8 * 8
  EXPECT_THROW(parse("[model]\nvariant = rnn\n"), ConfigError);
  RunConfig cfg;
  EXPECT_THROW(apply_override(cfg, "model.tau"), ConfigError);
  apply_override(cfg, "train.steps=77");
  EXPECT_EQ(cfg.train.steps, 77u);
  EXPECT_THROW(load_run_config("/nonexistent/x.cfg"), ConfigError);
}

TEST(AblationGridFile, ShippedGridsExpand) {
  const fs::path grids = repo_root() / "configs" / "grids";
  for (const char* name : {"tau_k.cfg", "expand.cfg", "gelu.cfg", "lr_mult.cfg"}) {
    const AblationGrid g = load_grid(grids / name);
    EXPECT_FALSE(g.runs.empty()) << name;
    EXPECT_NO_THROW(load_run_config(g.base)) << name;
  }
}

// ---- data -------------------------------------------------------------------

TEST(CorpusDataset, SplitAndWindows) {
  const CorpusDataset& d = corpus();
  EXPECT_EQ(d.vocab(), 256u);
  EXPECT_GT(d.size(), 4'000'000u);
  EXPECT_EQ(d.train().size() + d.validation().size(), d.size());
  EXPECT_NEAR(static_cast<double>(d.validation().size()) / d.size(), 0.1, 1e-6);
  const Batch a = d.sample(4, 32, 7, 3), b = d.sample(4, 32, 7, 3), c = d.sample(4, 32, 7, 4);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_NE(a.tokens, c.tokens);
  ASSERT_EQ(a.tokens.size(), 128u);
  for (std::size_t w = 0; w < 4; ++w)
    for (std::size_t i = 0; i + 1 < 32; ++i) EXPECT_EQ(a.targets[w * 32 + i], a.tokens[w * 32 + i + 1]);
  const auto val = d.validation_batches(3, 50, 7);
  std::size_t windows = 0;
  for (const auto& v : val) windows += v.batch;
  EXPECT_EQ(windows, 7u);
  // Windows tile the held-out shard from its start without overlap.
  const auto shard = d.validation();
  EXPECT_TRUE(std::equal(val[0].tokens.begin(), val[0].tokens.begin() + 150, shard.begin()));
  EXPECT_TRUE(std::equal(val[1].tokens.begin(), val[1].tokens.begin() + 50, shard.begin() + 150));
}

TEST(CorpusDataset, TrainingWindowsStayInTrainingShard) {
  const std::string text(1000, 'a');
  std::string marked = text;
  for (std::size_t i = 900; i < 1000; ++i) marked[i] = 'z';
  const CorpusDataset d(marked, 0.1);
  for (std::uint64_t step = 0; step < 200; ++step) {
    const Batch b = d.sample(4, 20, 1, step);
    for (auto t : b.targets) ASSERT_EQ(t, 'a');
  }
  EXPECT_THROW(CorpusDataset("abc", 0.0), std::invalid_argument);
}

// ---- optimizer --------------------------------------------------------------

TEST(LrSchedule, WarmupThenCosine) {
  const LrSchedule s{1e-3, 20, 2000, 0.1};
  EXPECT_DOUBLE_EQ(s.at(0), 1e-3 / 20);
  EXPECT_DOUBLE_EQ(s.at(19), 1e-3);
  EXPECT_DOUBLE_EQ(s.at(20), 1e-3);
  EXPECT_NEAR(s.at(2000), 1e-4, 1e-15);
  EXPECT_NEAR(s.at(1010), 0.55e-3, 1e-12);
  for (std::size_t t = 21; t <= 2000; ++t) ASSERT_LE(s.at(t), s.at(t - 1));
  EXPECT_EQ(TrainConfig{}.resolved_warmup(), 20u);
}

TEST(TrainStep, ZeroLearningRateLeavesParametersBitIdentical) {
  for (Variant v : {Variant::memoryformer, Variant::baseline}) {
    RunConfig cfg = tiny();
    cfg.model.variant = v;
    LanguageModel<float> model(cfg.model, 1);
    AdamW<float> opt(optimizer_config(cfg.train));
    const auto before = snapshot(model);
    for (std::uint64_t s = 0; s < 3; ++s) train_step(model, opt, corpus().sample(4, 16, 1, s), 0.0);
    EXPECT_EQ(snapshot(model), before);
  }
}

TEST(TrainStep, TableMultiplierScopesOnlyTables) {
  // From fresh moments the first AdamW step moves an entry by
  // group_lr * |g| / (|g| + eps).
  RunConfig cfg = tiny();
  cfg.train.weight_decay = 0.0;
  cfg.train.grad_clip = 0.0;
  LanguageModel<float> model(cfg.model, 2);
  AdamW<float> opt(optimizer_config(cfg.train));
  const auto before = snapshot(model);
  const double lr = 1e-3;
  train_step(model, opt, corpus().sample(4, 16, 1, 0), lr);
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double group_lr = params[i].kind == ParamKind::table ? 3 * lr : lr;
    std::size_t moved = 0;
    for (std::size_t j = 0; j < before[i].size(); ++j) {
      const double delta = std::abs(static_cast<double>((*params[i].value)[j]) - before[i][j]);
      const double g = std::abs(static_cast<double>((*params[i].grad)[j]));
      if (g == 0.0) {
        ASSERT_EQ(delta, 0.0) << params[i].name;
        continue;
      }
      if (g < 1e-15) continue;  // g^2 underflows in float
      ++moved;
      // Bias-corrected first step: m = g, v = g^2.
      const double expect = group_lr * g / (g + 1e-8);
      const double ulp = 1.2e-7 * (std::abs(before[i][j]) + std::abs((*params[i].value)[j]));
      ASSERT_NEAR(delta, expect, 0.02 * expect + ulp) << params[i].name << "[" << j << "]";
    }
    EXPECT_GT(moved, 0u) << params[i].name;
  }
}

TEST(TrainStep, UnretrievedRowsGetNoGradientUpdate) {
  RunConfig cfg = tiny();
  cfg.train.sparse_table_moments = true;
  LanguageModel<float> model(cfg.model, 3);
  AdamW<float> opt(optimizer_config(cfg.train));
  for (std::uint64_t step = 0; step < 4; ++step) {
    const auto before = snapshot(model);
    train_step(model, opt, corpus().sample(2, 16, 1, step), 1e-3);
    const auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].kind != ParamKind::table) continue;
      const std::size_t width = params[i].tables->out_dim();
      std::size_t untouched = 0;
      for (std::size_t r = 0; r < params[i].touched->size(); ++r) {
        if ((*params[i].touched)[r]) continue;
        ++untouched;
        for (std::size_t j = r * width; j < (r + 1) * width; ++j) ASSERT_EQ((*params[i].value)[j], before[i][j]);
      }
      EXPECT_GT(untouched, 0u);
    }
  }
}

TEST(TrainStep, DenseMomentsOnlyMoveRowsWithHistory) {
  // Dense mode: a row never retrieved so far has zero moments, so it stays put.
  RunConfig cfg = tiny();
  LanguageModel<float> model(cfg.model, 4);
  AdamW<float> opt(optimizer_config(cfg.train));
  const auto initial = snapshot(model);
  std::vector<std::vector<std::uint8_t>> ever;
  for (std::uint64_t step = 0; step < 3; ++step) {
    train_step(model, opt, corpus().sample(2, 16, 1, step), 1e-3);
    const auto params = model.parameters();
    if (ever.empty())
      for (const auto& p : params) ever.emplace_back(p.touched ? p.touched->size() : 0, 0);
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].touched)
        for (std::size_t r = 0; r < ever[i].size(); ++r) ever[i][r] |= (*params[i].touched)[r];
  }
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].kind != ParamKind::table) continue;
    const std::size_t width = params[i].tables->out_dim();
    for (std::size_t r = 0; r < ever[i].size(); ++r) {
      if (ever[i][r]) continue;
      for (std::size_t j = r * width; j < (r + 1) * width; ++j) ASSERT_EQ((*params[i].value)[j], initial[i][j]);
    }
  }
}

TEST(TrainStep, IdenticalSeedsGiveIdenticalTrajectories) {
  RunConfig cfg = tiny();
  auto run = [&] {
    Trainer t(cfg, shared_corpus());
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(t.train_one().loss);
    return losses;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a, b);
  cfg.train.seed = 2;
  EXPECT_NE(run(), a);
}

TEST(TrainStep, OverfitsSingleBatch) {
  RunConfig cfg = micro();
  LanguageModel<float> model(cfg.model, cfg.train.seed);
  AdamW<float> opt(optimizer_config(cfg.train));
  const Batch batch = corpus().sample(4, 64, 5, 0);
  double loss = 0;
  for (int step = 0; step < 200; ++step) loss = train_step(model, opt, batch, 3e-3);
  EXPECT_LT(loss, 0.1);
}

TEST(TrainStep, NonFiniteLossAborts) {
  RunConfig cfg = tiny();
  LanguageModel<float> model(cfg.model, 5);
  AdamW<float> opt(optimizer_config(cfg.train));
  for (auto& p : model.parameters())
    if (p.name == "head") (*p.value)[0] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(train_step(model, opt, corpus().sample(2, 16, 1, 0), 1e-3), DivergenceError);
}

// ---- evaluation -------------------------------------------------------------

TEST(EvaluatePpl, UntrainedMicroModelIsNearUniform) {
  const RunConfig cfg = micro();
  LanguageModel<float> model(cfg.model, 1);
  const EvalResult e = evaluate_ppl(model, corpus(), 128, 16, 16);
  EXPECT_NEAR(e.ppl, 256.0, 25.6);
  EXPECT_DOUBLE_EQ(e.ppl, std::exp(e.loss));
  EXPECT_EQ(e.tokens, 16u * 128u);
}

TEST(EvaluatePpl, TrainingLowersPerplexity) {
  RunConfig cfg = tiny();
  cfg.train.steps = 60;
  Trainer t(cfg, shared_corpus());
  const EvalResult before = t.evaluate();
  while (!t.done()) t.train_one();
  const EvalResult after = t.evaluate();
  EXPECT_LT(after.ppl, before.ppl);
  EXPECT_DOUBLE_EQ(after.ppl, std::exp(after.loss));
}

TEST(EvaluatePpl, HeldOutLossFallsOverFirst500Steps) {
  RunConfig cfg = micro();
  cfg.train.steps = 500;
  Trainer t(cfg, shared_corpus());
  std::vector<double> losses;
  while (!t.done()) {
    t.train_one();
    if (t.step() % 100 == 0) losses.push_back(evaluate_ppl(t.model(), corpus(), 128, 16, 32).loss);
  }
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LT(losses[i], losses[i - 1]) << "after step " << 100 * (i + 1);
}

// ---- checkpoints ------------------------------------------------------------

TEST(Checkpoint, RoundTripRestoresModelAndOptimizer) {
  RunConfig cfg = tiny();
  Trainer a(cfg, shared_corpus());
  for (int i = 0; i < 3; ++i) a.train_one();
  const fs::path dir = scratch("ckpt_roundtrip");
  a.save(dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.cfg"));
  EXPECT_TRUE(fs::exists(dir / "optimizer.bin"));
  EXPECT_TRUE(fs::exists(dir / "params" / "block0.q.tables.mfht"));
  EXPECT_TRUE(fs::exists(dir / "params" / "head.mftn"));

  Trainer b(cfg, shared_corpus());
  b.resume(dir);
  EXPECT_EQ(b.step(), 3u);
  EXPECT_EQ(snapshot(b.model()), snapshot(a.model()));
  // Same state, same batches: the continuation is bit-identical.
  for (int i = 0; i < 3; ++i) EXPECT_EQ(a.train_one().loss, b.train_one().loss);
  EXPECT_EQ(read_checkpoint_info(dir).step, 3u);
  EXPECT_EQ(to_ini(read_checkpoint_info(dir).config), to_ini(cfg));
}

TEST(Checkpoint, SameSeedGivesBitIdenticalCheckpoints) {
  RunConfig cfg = tiny();
  const fs::path d1 = scratch("ckpt_det_a"), d2 = scratch("ckpt_det_b");
  for (const auto& d : {d1, d2}) {
    Trainer t(cfg, shared_corpus());
    for (int i = 0; i < 4; ++i) t.train_one();
    t.save(d);
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d1)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(d2 / fs::relative(e.path(), d1))) << e.path();
  }
  EXPECT_GT(files, 10u);
}

TEST(Checkpoint, ResumedRunMatchesUnbrokenRun) {
  RunConfig cfg = tiny();
  cfg.train.steps = 6;
  cfg.train.checkpoint_interval = 3;
  const fs::path whole = scratch("run_whole"), parts = scratch("run_parts");
  TrainOptions o;
  o.out_dir = whole;
  const TrainSummary full = run_training(cfg, o);

  // Interrupted after the step-3 checkpoint: drop the final one and resume.
  o.out_dir = parts;
  run_training(cfg, o);
  fs::remove_all(checkpoint_dir(parts, 6));
  ASSERT_EQ(latest_checkpoint(parts), checkpoint_dir(parts, 3));
  o.resume = true;
  const TrainSummary resumed = run_training(cfg, o);
  EXPECT_EQ(resumed.resumed_from, 3u);
  EXPECT_EQ(resumed.steps, 6u);
  EXPECT_DOUBLE_EQ(resumed.final_eval.loss, full.final_eval.loss);

  auto losses = [](const fs::path& csv) {
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    std::vector<std::string> rows;
    while (std::getline(in, line)) rows.push_back(line.substr(0, line.find(',', line.find(',') + 1)));
    return rows;
  };
  EXPECT_EQ(losses(whole / "metrics.csv"), losses(parts / "metrics.csv"));
  EXPECT_EQ(losses(whole / "metrics.csv").size(), 6u);
}

TEST(Checkpoint, MissingDirectoryThrows) {
  EXPECT_THROW(read_checkpoint_info("/nonexistent/ckpt"), std::runtime_error);
  EXPECT_TRUE(latest_checkpoint("/nonexistent/run").empty());
}
