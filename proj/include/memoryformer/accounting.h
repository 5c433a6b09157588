#pragma once

// FLOPs and storage arithmetic for standard and MemoryFormer blocks, plus
// bucket-usage histograms. One multiply-accumulate counts as one operation;
// softmax, norms and elementwise work are not counted. Megabytes are 1e6 bytes.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "memoryformer/model.h"

namespace mf {

enum class FlopsMode {
  formula,  // 6Ksd for the five memory layers
  exact,    // s(tau+h)K per memory layer with the real widths
};

struct FlopsReport {
  std::string mode;
  double qkv = 0;                // Q/K/V projections or memory layers
  double output_projection = 0;  // standard block only
  double ffn = 0;                // feed-forward or memory block
  double attention_scores = 0;   // QK^T
  double attention_values = 0;   // PV

  double attention() const { return attention_scores + attention_values; }
  double non_attention() const { return qkv + output_projection + ffn; }
  double total() const { return attention() + non_attention(); }
};

FlopsReport flops_standard_block(std::size_t s, std::size_t d);
FlopsReport flops_memoryformer_block(std::size_t s, std::size_t d, std::size_t tau, std::size_t K,
                                     std::size_t expand_bits = 2, FlopsMode mode = FlopsMode::formula);
// One memory layer: s tokens, K tables, tau hashing cost and h accumulations.
double memory_layer_flops(std::size_t s, std::size_t tau, std::size_t K, std::size_t h);

// memoryformer total / standard total, formula mode.
double crossover_ratio(std::size_t s, std::size_t d, std::size_t tau);

std::uint64_t table_memory_bytes(std::size_t tau, std::size_t K, std::size_t h, std::size_t bytes_per_element);

struct MemoryReport {
  std::size_t bytes_per_element = 2;
  std::uint64_t layer1 = 0, layer2 = 0;
  std::uint64_t block() const { return layer1 + layer2; }
};

MemoryReport memory_block_bytes(std::size_t tau, std::size_t K, std::size_t d, std::size_t expand_bits,
                                std::size_t bytes_per_element = 2);

// Attention memory layers plus memory block, for N blocks.
std::uint64_t model_table_bytes(const ModelConfig& cfg, std::size_t bytes_per_element = 2);

inline double to_megabytes(std::uint64_t bytes) { return static_cast<double>(bytes) / 1e6; }
inline double to_giga(double flops) { return flops / 1e9; }

// ---- reference figures ------------------------------------------------------

struct ReferenceCell {
  std::string id, kind, model;
  std::size_t s = 0, d = 0, tau = 0, K = 0, h = 0, e = 0, bytes = 0;
  std::string quantity;
  double expected = 0, tolerance = 0;
  std::string unit;
};

struct CellCheck {
  ReferenceCell cell;
  double computed = 0;
  bool pass = false;
};

// Parsed from the CSV compiled into the library.
const std::vector<ReferenceCell>& reference_cells();
std::vector<ReferenceCell> parse_reference_csv(std::istream& is);

// kinds: "flops" selects flops_*; "memory" selects *_bytes.
std::vector<CellCheck> check_reference_cells(const std::string& kinds);

// ---- bucket usage -----------------------------------------------------------

struct BucketHistogram {
  std::string layer;
  std::size_t table = 0;
  std::vector<std::uint64_t> counts;  // 2^tau
  std::uint64_t samples = 0;

  std::uint64_t max() const;
  std::uint64_t min() const;
  double mean() const;
  double max_over_mean() const { return static_cast<double>(max()) / mean(); }
};

// One histogram per (memory layer, table), counting every retrieval made by
// forward passes over `tokens` cut into windows of `seq`.
std::vector<BucketHistogram> bucket_stats(const LanguageModel<float>& model, std::span<const std::int32_t> tokens,
                                          std::size_t seq);

// `samples` i.i.d. standard-normal chunks of width tau hashed into one table.
BucketHistogram synthetic_bucket_stats(std::size_t tau, std::size_t samples, std::uint64_t seed);

// ---- reports ----------------------------------------------------------------

void write_flops_csv(std::ostream& os, const std::vector<std::pair<std::string, FlopsReport>>& rows);
void write_memory_csv(std::ostream& os, const std::vector<std::pair<std::string, MemoryReport>>& rows);
void write_bucket_csv(std::ostream& os, const std::vector<BucketHistogram>& hists);
void write_bucket_summary(std::ostream& os, const std::vector<BucketHistogram>& hists);

// Fixed-width text table.
std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

}  // namespace mf
