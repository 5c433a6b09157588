// memoryformer: train, evaluate, verify and account for MemoryFormer models.
//
// Exit codes: 0 ok, 1 verification failure, 2 config/usage error,
// 3 training divergence.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "memoryformer/ablation.h"
#include "memoryformer/accounting.h"
#include "memoryformer/checkpoint.h"
#include "memoryformer/gradcheck.h"
#include "memoryformer/trainer.h"
#include "memoryformer/version.h"

namespace fs = std::filesystem;
using namespace mf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;

fs::path output_root() {
  const char* env = std::getenv("MEMORYFORMER_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, variant, out;
  std::vector<std::string> overrides;
  std::size_t steps = 0, log_every = 100;
  std::uint64_t seed = 0;
  bool seed_set = false, resume = false, quiet = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  fs::path out = a.out;
  if (a.config.empty()) {
    if (!a.resume || out.empty()) throw ConfigError("train: --config is required (or --resume with --out)");
    cfg = load_run_config(out / "run.cfg");
  } else {
    cfg = load_run_config(a.config);
  }
  if (!a.variant.empty()) apply_override(cfg, "model.variant", a.variant);
  for (const auto& o : a.overrides) apply_override(cfg, o);
  if (a.steps) {
    cfg.train.steps = a.steps;
    cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, a.steps);
  }
  if (a.seed_set) cfg.train.seed = a.seed;
  cfg.validate();
  if (out.empty()) {
    const std::string stem = fs::path(a.config).stem().string();
    out = output_root() / (stem + (a.variant.empty() ? "" : "-" + a.variant) + "-seed" + std::to_string(cfg.train.seed));
  }
  TrainOptions opts;
  opts.out_dir = out;
  opts.resume = a.resume;
  opts.log = a.quiet ? nullptr : &std::cout;
  opts.log_every = a.log_every;
  if (!a.quiet) {
    std::cout << "run directory " << out.string() << "\n"
              << to_string(cfg.model.variant) << "  N=" << cfg.model.n_layers << " d=" << cfg.model.hidden
              << " H=" << cfg.model.heads;
    if (cfg.model.variant == Variant::memoryformer) {
      std::cout << " tau=" << cfg.model.tau << " K=" << cfg.model.chunks << " e=" << cfg.model.expand_bits;
    }
    std::cout << "  steps=" << cfg.train.steps << " seed=" << cfg.train.seed << std::endl;
  }
  const TrainSummary s = run_training(cfg, opts);
  std::cout << "final step " << s.steps << "  val_loss " << fixed(s.final_eval.loss, 4) << "  val_ppl "
            << fixed(s.final_eval.ppl, 3) << "\ncheckpoint " << s.last_checkpoint.string() << std::endl;
  return kExitOk;
}

// ---- eval ------------------------------------------------------------------

fs::path resolve_checkpoint(const fs::path& p) {
  if (fs::exists(p / "manifest.cfg")) return p;
  const fs::path latest = latest_checkpoint(p);
  if (latest.empty()) throw std::runtime_error("no checkpoint found at " + p.string());
  return latest;
}

struct EvalArgs {
  std::string checkpoint, corpus, prompt;
  std::size_t windows = 0, generate = 64;
};

int cmd_eval(const EvalArgs& a) {
  const fs::path dir = resolve_checkpoint(a.checkpoint);
  const CheckpointInfo info = read_checkpoint_info(dir);
  LanguageModel<float> model(info.config.model, info.config.train.seed);
  load_checkpoint(dir, model, nullptr);
  const std::string corpus = a.corpus.empty() ? info.config.train.corpus : a.corpus;
  const CorpusDataset data = CorpusDataset::from_file(corpus, info.config.train.eval_fraction);
  const EvalResult e = evaluate_ppl(model, data, info.config.seq_len(), info.config.train.batch_size,
                                    a.windows ? a.windows : info.config.train.eval_windows);
  std::cout << "checkpoint " << dir.string() << " (step " << info.step << ")\n"
            << "val_loss " << fixed(e.loss, 4) << "  val_ppl " << fixed(e.ppl, 3) << "  tokens " << e.tokens << '\n';
  if (!a.prompt.empty()) {
    const auto out = model.generate(encode_bytes(a.prompt), a.generate);
    std::cout << "greedy: " << a.prompt << decode_bytes(out) << '\n';
  }
  return kExitOk;
}

// ---- gradcheck -------------------------------------------------------------

struct GradcheckArgs {
  std::string scope = "all";
  std::uint64_t seed = 0;
  std::size_t seeds = 20;
  bool inject_bug = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<GradcheckScope> scopes;
  if (a.scope == "all") {
    scopes = {GradcheckScope::lsh, GradcheckScope::memory_layer, GradcheckScope::block, GradcheckScope::model};
  } else {
    scopes = {parse_gradcheck_scope(a.scope)};
  }
  bool ok = true;
  std::vector<std::vector<std::string>> rows;
  for (auto scope : scopes) {
    const GradcheckResult r = run_gradcheck(scope, {a.seed, a.seeds, a.inject_bug});
    std::ostringstream worst, tol;
    worst << std::scientific << std::setprecision(3) << r.worst;
    tol << std::scientific << std::setprecision(0) << r.tolerance;
    rows.push_back({to_string(scope), worst.str(), tol.str(), std::to_string(r.seeds), std::to_string(r.checked),
                    std::to_string(r.skipped), r.worst_at, r.pass() ? "PASS" : "FAIL"});
    ok = ok && r.pass();
  }
  std::cout << format_table({"scope", "worst_rel_err", "tolerance", "seeds", "checked", "skipped", "worst_at", "result"}, rows);
  return ok ? kExitOk : kExitVerify;
}

// ---- flops / memsize -------------------------------------------------------

std::string giga(double v) { return fixed(to_giga(v), 3); }

int print_reference(const std::string& kinds) {
  std::vector<std::vector<std::string>> rows;
  std::size_t passed = 0;
  const auto checks = check_reference_cells(kinds);
  for (const auto& c : checks) {
    rows.push_back({c.cell.id, c.cell.model, c.cell.quantity, fixed(c.cell.expected, 1) + " " + c.cell.unit,
                    fixed(c.computed, 3) + " " + c.cell.unit, c.pass ? "PASS" : "FAIL"});
    passed += c.pass;
  }
  std::cout << format_table({"cell", "model", "quantity", "reference", "computed", "result"}, rows)
            << passed << "/" << checks.size() << " cells match\n";
  return passed == checks.size() ? kExitOk : kExitVerify;
}

struct FlopsArgs {
  std::size_t s = 2048, d = 512, tau = 8, K = 0, e = 2;
  std::string mode = "both", out;
  bool ratio = false, reference = false;
};

int cmd_flops(const FlopsArgs& a) {
  if (a.reference) return print_reference("flops");
  if (a.ratio) {
    std::cout << "crossover ratio (s=" << a.s << ", d=" << a.d << ", tau=" << a.tau << "): "
              << fixed(crossover_ratio(a.s, a.d, a.tau), 4) << '\n';
    return kExitOk;
  }
  if (a.mode != "formula" && a.mode != "exact" && a.mode != "both") throw ConfigError("flops: --mode must be formula, exact or both");
  const std::size_t K = a.K ? a.K : (a.tau ? a.d / a.tau : 0);
  std::vector<std::pair<std::string, FlopsReport>> reports{{"standard", flops_standard_block(a.s, a.d)}};
  if (a.mode != "exact") reports.emplace_back("memoryformer", flops_memoryformer_block(a.s, a.d, a.tau, K, a.e, FlopsMode::formula));
  if (a.mode != "formula") reports.emplace_back("memoryformer", flops_memoryformer_block(a.s, a.d, a.tau, K, a.e, FlopsMode::exact));
  std::vector<std::vector<std::string>> rows;
  for (const auto& [label, r] : reports) {
    rows.push_back({label, r.mode, giga(r.qkv), giga(r.output_projection), giga(r.ffn), giga(r.attention()),
                    giga(r.non_attention()), giga(r.total())});
  }
  std::cout << "s=" << a.s << " d=" << a.d << " tau=" << a.tau << " K=" << K << " e=" << a.e << "  (GFLOPs, MAC = 1)\n"
            << format_table({"block", "mode", "qkv", "out_proj", "ffn", "attention", "non_attention", "total"}, rows);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream csv(fs::path(a.out) / "flops_report.csv");
    write_flops_csv(csv, reports);
  }
  return kExitOk;
}

struct MemsizeArgs {
  std::size_t tau = 8, K = 64, d = 0, h = 0, e = 2, bytes = 2;
  std::string out;
  bool reference = false;
};

int cmd_memsize(const MemsizeArgs& a) {
  if (a.reference) return print_reference("memory");
  const std::size_t d = a.d ? a.d : a.tau * a.K;
  const std::size_t h = a.h ? a.h : d;
  const std::uint64_t layer = table_memory_bytes(a.tau, a.K, h, a.bytes);
  const MemoryReport block = memory_block_bytes(a.tau, a.K, d, a.e, a.bytes);
  std::vector<std::vector<std::string>> rows{
      {"memory layer (h=" + std::to_string(h) + ")", std::to_string(layer), fixed(to_megabytes(layer), 1)},
      {"memory block layer1", std::to_string(block.layer1), fixed(to_megabytes(block.layer1), 1)},
      {"memory block layer2", std::to_string(block.layer2), fixed(to_megabytes(block.layer2), 1)},
      {"memory block", std::to_string(block.block()), fixed(to_megabytes(block.block()), 1)},
  };
  std::cout << "tau=" << a.tau << " K=" << a.K << " d=" << d << " e=" << a.e << " bytes/element=" << a.bytes << '\n'
            << format_table({"component", "bytes", "MB"}, rows);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream csv(fs::path(a.out) / "memory_report.csv");
    write_memory_csv(csv, {{"tau" + std::to_string(a.tau) + "_K" + std::to_string(a.K) + "_e" + std::to_string(a.e), block}});
  }
  return kExitOk;
}

// ---- buckets ---------------------------------------------------------------

struct BucketArgs {
  std::string checkpoint, corpus, out;
  std::size_t tokens = 65536, tau = 8, samples = 65536;
  std::uint64_t seed = 0;
  bool synthetic = false;
};

int cmd_buckets(const BucketArgs& a) {
  std::vector<BucketHistogram> hists;
  if (a.synthetic) {
    hists.push_back(synthetic_bucket_stats(a.tau, a.samples, a.seed));
  } else {
    if (a.checkpoint.empty()) throw ConfigError("buckets: --checkpoint is required unless --synthetic");
    const fs::path dir = resolve_checkpoint(a.checkpoint);
    const CheckpointInfo info = read_checkpoint_info(dir);
    LanguageModel<float> model(info.config.model, info.config.train.seed);
    load_checkpoint(dir, model, nullptr);
    const CorpusDataset data = CorpusDataset::from_file(a.corpus.empty() ? info.config.train.corpus : a.corpus,
                                                        info.config.train.eval_fraction);
    const auto val = data.validation();
    hists = bucket_stats(model, val.first(std::min(a.tokens, val.size())), info.config.seq_len());
  }
  write_bucket_summary(std::cout, hists);
  double worst = 0;
  for (const auto& h : hists) worst = std::max(worst, h.max_over_mean());
  std::cout << "worst max/mean " << fixed(worst, 3) << '\n';
  const fs::path out = a.out.empty() ? output_root() / "buckets" : fs::path(a.out);
  fs::create_directories(out);
  std::ofstream csv(out / "bucket_hist.csv");
  write_bucket_csv(csv, hists);
  std::cout << "wrote " << (out / "bucket_hist.csv").string() << '\n';
  return kExitOk;
}

// ---- ablate ----------------------------------------------------------------

struct AblateArgs {
  std::string grid, out;
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  bool seed_set = false, dry_run = false, quiet = false;
};

int cmd_ablate(const AblateArgs& a) {
  const AblationGrid grid = load_grid(a.grid);
  const auto runs = expand_grid(grid);
  const fs::path out = a.out.empty() ? output_root() / ("ablate-" + fs::path(a.grid).stem().string()) : fs::path(a.out);
  std::vector<AblationRow> rows;
  if (a.dry_run) {
    for (const auto& [name, cfg] : runs) rows.push_back(describe_run(name, cfg));
  } else {
    AblationOptions opts;
    opts.out_dir = out;
    if (a.steps) opts.steps = a.steps;
    if (a.seed_set) opts.seed = a.seed;
    opts.log = a.quiet ? nullptr : &std::cout;
    rows = run_ablation(runs, opts);
  }
  std::vector<std::vector<std::string>> table;
  for (const auto& r : rows) {
    const auto& m = r.config.model;
    table.push_back({r.name, to_string(m.variant), std::to_string(m.tau), std::to_string(m.chunks),
                     std::to_string(m.expand_bits), m.block_gelu ? "yes" : "no",
                     fixed(r.config.train.table_lr_multiplier, 1), std::to_string(r.steps),
                     a.dry_run ? "-" : fixed(r.val_loss, 4), a.dry_run ? "-" : fixed(r.val_ppl, 2), fixed(r.layer_gflops, 3), fixed(r.block_mb, 1), r.status});
  }
  std::cout << format_table({"run", "variant", "tau", "K", "e", "gelu", "lr_x", "steps", "val_loss", "val_ppl",
                             "layer_GFLOPs", "block_MB", "status"},
                            table);
  if (!a.dry_run) {
    fs::create_directories(out);
    std::ofstream csv(out / "ablation.csv");
    write_ablation_csv(csv, rows);
    std::cout << "wrote " << (out / "ablation.csv").string() << '\n';
  }
  for (const auto& r : rows)
    if (r.status != "ok") return kExitVerify;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MemoryFormer: hash-table memory layers in place of fully-connected layers"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model from a config file");
  t->add_option("-c,--config", train.config, "Run config (.cfg)");
  t->add_option("--steps", train.steps, "Override train.steps");
  t->add_option("--variant", train.variant, "memoryformer or baseline");
  t->add_option("--set", train.overrides, "Override a config key, e.g. --set model.tau=4");
  auto* seed_opt = t->add_option("--seed", train.seed, "Override train.seed");
  t->add_option("-o,--out", train.out, "Run directory (default $MEMORYFORMER_OUTPUT_ROOT/<config>-seed<N>)");
  t->add_flag("--resume", train.resume, "Continue from the latest checkpoint in the run directory");
  t->add_option("--log-every", train.log_every, "Progress line interval");
  t->add_flag("-q,--quiet", train.quiet, "No progress output");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Validation loss and perplexity of a checkpoint");
  e->add_option("checkpoint", eval.checkpoint, "Checkpoint or run directory")->required();
  e->add_option("--corpus", eval.corpus, "Override the corpus");
  e->add_option("--windows", eval.windows, "Validation windows (0 = config value)");
  e->add_option("--prompt", eval.prompt, "Print a greedy continuation of this text");
  e->add_option("--generate", eval.generate, "Tokens to generate with --prompt");

  GradcheckArgs grad;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient verification (64-bit)");
  g->add_option("scope", grad.scope, "lsh | memory-layer | block | model | all")
      ->check(CLI::IsMember({"lsh", "memory-layer", "block", "model", "all"}));
  g->add_option("--seed", grad.seed, "Base seed");
  g->add_option("--seeds", grad.seeds, "Number of random instances");
  g->add_flag("--inject-bug", grad.inject_bug, "Negate one gradient term (the check must then fail)");

  FlopsArgs flops;
  auto* f = app.add_subcommand("flops", "FLOPs of a standard and a MemoryFormer block");
  f->add_option("-s,--seq", flops.s, "Sequence length");
  f->add_option("-d,--hidden", flops.d, "Hidden size");
  f->add_option("--tau", flops.tau, "Bits per chunk");
  f->add_option("-K,--chunks", flops.K, "Tables per layer (default d/tau)");
  f->add_option("-e,--expand", flops.e, "Memory block expansion bits");
  f->add_option("--mode", flops.mode, "formula | exact | both");
  f->add_flag("--ratio", flops.ratio, "Print the memoryformer/standard total ratio");
  f->add_flag("--paper-tables", flops.reference, "Check every published FLOPs figure");
  f->add_option("-o,--out", flops.out, "Write flops_report.csv into this directory");

  MemsizeArgs mem;
  auto* m = app.add_subcommand("memsize", "Hash-table storage of a memory layer and memory block");
  m->add_option("--tau", mem.tau, "Bits per chunk");
  m->add_option("-K,--chunks", mem.K, "Tables per layer");
  m->add_option("-d,--hidden", mem.d, "Hidden size (default tau*K)");
  m->add_option("--out-width", mem.h, "Memory layer output width (default d)");
  m->add_option("-e,--expand", mem.e, "Memory block expansion bits");
  m->add_option("--bytes", mem.bytes, "Bytes per element");
  m->add_flag("--paper-tables", mem.reference, "Check every published size figure");
  m->add_option("-o,--out", mem.out, "Write memory_report.csv into this directory");

  BucketArgs buckets;
  auto* b = app.add_subcommand("buckets", "Bucket retrieval histograms");
  b->add_option("--checkpoint", buckets.checkpoint, "Checkpoint or run directory");
  b->add_option("--corpus", buckets.corpus, "Override the corpus");
  b->add_option("--tokens", buckets.tokens, "Held-out tokens to hash");
  b->add_flag("--synthetic", buckets.synthetic, "i.i.d. standard-normal chunks instead of a model");
  b->add_option("--tau", buckets.tau, "Bits (synthetic mode)");
  b->add_option("--samples", buckets.samples, "Samples (synthetic mode)");
  b->add_option("--seed", buckets.seed, "Seed (synthetic mode)");
  b->add_option("-o,--out", buckets.out, "Output directory for bucket_hist.csv");

  AblateArgs ablate;
  auto* a = app.add_subcommand("ablate", "Train every run of an ablation grid");
  a->add_option("grid", ablate.grid, "Grid file")->required();
  a->add_option("--steps", ablate.steps, "Override every run's step budget");
  auto* ablate_seed = a->add_option("--seed", ablate.seed, "Shared seed");
  a->add_option("-o,--out", ablate.out, "Output directory");
  a->add_flag("--dry-run", ablate.dry_run, "Only print the accounting columns");
  a->add_flag("-q,--quiet", ablate.quiet, "No progress output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (t->parsed()) {
      train.seed_set = seed_opt->count() > 0;
      return cmd_train(train);
    }
    if (e->parsed()) return cmd_eval(eval);
    if (g->parsed()) return cmd_gradcheck(grad);
    if (f->parsed()) return cmd_flops(flops);
    if (m->parsed()) return cmd_memsize(mem);
    if (b->parsed()) return cmd_buckets(buckets);
    if (a->parsed()) {
      ablate.seed_set = ablate_seed->count() > 0;
      return cmd_ablate(ablate);
    }
  } catch (const DivergenceError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitDiverged;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}
