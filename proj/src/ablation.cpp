#include "memoryformer/ablation.h"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "memoryformer/accounting.h"
#include "memoryformer/trainer.h"

namespace mf {

std::vector<std::pair<std::string, RunConfig>> expand_grid(const AblationGrid& grid) {
  const RunConfig base = load_run_config(grid.base);
  std::vector<std::pair<std::string, RunConfig>> out;
  for (const auto& run : grid.runs) {
    RunConfig cfg = base;
    for (const auto& [k, v] : grid.common) apply_override(cfg, k, v);
    for (const auto& [k, v] : run.overrides) apply_override(cfg, k, v);
    try {
      cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("grid run " + run.name + ": " + e.what());
    }
    out.emplace_back(run.name, std::move(cfg));
  }
  return out;
}

AblationRow describe_run(const std::string& name, const RunConfig& cfg) {
  AblationRow row;
  row.name = name;
  row.config = cfg;
  const auto& m = cfg.model;
  const std::size_t s = kReferenceSeq;
  if (m.variant == Variant::memoryformer) {
    row.layer_gflops = to_giga(memory_layer_flops(s, m.tau, m.chunks, m.hidden));
    row.block_gflops = to_giga(flops_memoryformer_block(s, m.hidden, m.tau, m.chunks, m.expand_bits).total());
    row.layer_mb = to_megabytes(table_memory_bytes(m.tau, m.chunks, m.hidden, 2));
    row.block_mb = to_megabytes(memory_block_bytes(m.tau, m.chunks, m.hidden, m.expand_bits, 2).block());
    row.model_table_mb = to_megabytes(model_table_bytes(m, 2));
  } else {
    row.layer_gflops = to_giga(static_cast<double>(s) * m.hidden * m.hidden);
    row.block_gflops = to_giga(flops_standard_block(s, m.hidden).total());
  }
  return row;
}

std::vector<AblationRow> run_ablation(const std::vector<std::pair<std::string, RunConfig>>& runs,
                                      const AblationOptions& options) {
  std::vector<AblationRow> rows;
  for (const auto& [name, base] : runs) {
    RunConfig cfg = base;
    if (options.steps) {
      cfg.train.steps = *options.steps;
      cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, cfg.train.steps);
    }
    if (options.seed) cfg.train.seed = *options.seed;
    AblationRow row = describe_run(name, cfg);
    if (options.log) *options.log << "== " << name << " ==" << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      TrainOptions topts;
      topts.out_dir = options.out_dir / name;
      topts.log = options.log;
      const TrainSummary s = run_training(cfg, topts);
      row.steps = s.steps;
      row.val_loss = s.final_eval.loss;
      row.val_ppl = s.final_eval.ppl;
    } catch (const std::exception& e) {
      row.status = std::string("error: ") + e.what();
      if (options.log) *options.log << name << " failed: " << e.what() << std::endl;
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

}  // namespace

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "run,variant,n_layers,hidden,tau,chunks,expand_bits,block_gelu,table_lr_multiplier,steps,val_loss,val_ppl,"
        "layer_gflops,block_gflops,layer_mb,block_mb,model_table_mb,seconds,status\n";
  for (const auto& r : rows) {
    const auto& m = r.config.model;
    os << csv_field(r.name) << ',' << to_string(m.variant) << ',' << m.n_layers << ',' << m.hidden << ',' << m.tau
       << ',' << m.chunks << ',' << m.expand_bits << ',' << (m.block_gelu ? 1 : 0) << ','
       << r.config.train.table_lr_multiplier << ',' << r.steps << ',' << std::setprecision(6) << r.val_loss << ','
       << r.val_ppl << ',' << std::setprecision(4) << r.layer_gflops << ',' << r.block_gflops << ',' << r.layer_mb
       << ',' << r.block_mb << ',' << r.model_table_mb << ',' << std::setprecision(4) << r.seconds << ','
       << csv_field(r.status) << '\n';
  }
}

}  // namespace mf
