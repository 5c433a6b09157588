#include "memoryformer/accounting.h"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mf {

namespace detail {
extern const char* const kReferenceCsv;
}

FlopsReport flops_standard_block(std::size_t s, std::size_t d) {
  if (s == 0 || d == 0) throw std::invalid_argument("flops: s and d must be >= 1");
  const double S = static_cast<double>(s), D = static_cast<double>(d);
  FlopsReport r;
  r.mode = "standard";
  r.qkv = 3 * S * D * D;
  r.output_projection = S * D * D;
  r.ffn = 2 * S * D * (4 * D);
  r.attention_scores = S * S * D;
  r.attention_values = S * S * D;
  return r;
}

double memory_layer_flops(std::size_t s, std::size_t tau, std::size_t K, std::size_t h) {
  return static_cast<double>(s) * static_cast<double>(tau + h) * static_cast<double>(K);
}

FlopsReport flops_memoryformer_block(std::size_t s, std::size_t d, std::size_t tau, std::size_t K,
                                     std::size_t expand_bits, FlopsMode mode) {
  if (s == 0 || d == 0 || tau == 0 || K == 0) throw std::invalid_argument("flops: dimensions must be >= 1");
  if (tau * K != d) {
    throw std::invalid_argument("flops: d (" + std::to_string(d) + ") must equal tau * K (" + std::to_string(tau) +
                                " * " + std::to_string(K) + ")");
  }
  const double S = static_cast<double>(s), D = static_cast<double>(d), k = static_cast<double>(K);
  FlopsReport r;
  r.attention_scores = S * S * D;
  r.attention_values = S * S * D;
  if (mode == FlopsMode::formula) {
    r.mode = "formula";
    r.qkv = 3 * k * S * D;
    r.ffn = 3 * k * S * D;
  } else {
    r.mode = "exact";
    const std::size_t wide = tau + expand_bits;
    r.qkv = 3 * memory_layer_flops(s, tau, K, d);
    r.ffn = memory_layer_flops(s, tau, K, wide * K) + memory_layer_flops(s, wide, K, d);
  }
  return r;
}

double crossover_ratio(std::size_t s, std::size_t d, std::size_t tau) {
  if (tau == 0 || d % tau != 0) throw std::invalid_argument("crossover_ratio: d must be divisible by tau");
  return flops_memoryformer_block(s, d, tau, d / tau).total() / flops_standard_block(s, d).total();
}

std::uint64_t table_memory_bytes(std::size_t tau, std::size_t K, std::size_t h, std::size_t bytes_per_element) {
  if (tau == 0 || K == 0 || h == 0 || bytes_per_element == 0) {
    throw std::invalid_argument("table_memory_bytes: arguments must be >= 1");
  }
  if (tau >= 63) throw std::invalid_argument("table_memory_bytes: tau too large");
  return static_cast<std::uint64_t>(K) * (std::uint64_t{1} << tau) * h * bytes_per_element;
}

MemoryReport memory_block_bytes(std::size_t tau, std::size_t K, std::size_t d, std::size_t expand_bits,
                                std::size_t bytes_per_element) {
  if (tau * K != d) throw std::invalid_argument("memory_block_bytes: d must equal tau * K");
  MemoryReport r;
  r.bytes_per_element = bytes_per_element;
  r.layer1 = table_memory_bytes(tau, K, (tau + expand_bits) * K, bytes_per_element);
  r.layer2 = table_memory_bytes(tau + expand_bits, K, d, bytes_per_element);
  return r;
}

std::uint64_t model_table_bytes(const ModelConfig& cfg, std::size_t bytes_per_element) {
  if (cfg.variant != Variant::memoryformer) return 0;
  const std::uint64_t per_block = 3 * table_memory_bytes(cfg.tau, cfg.chunks, cfg.hidden, bytes_per_element) +
                                  memory_block_bytes(cfg.tau, cfg.chunks, cfg.hidden, cfg.expand_bits, bytes_per_element).block();
  return cfg.n_layers * per_block;
}

// ---- reference figures ------------------------------------------------------

std::vector<ReferenceCell> parse_reference_csv(std::istream& is) {
  std::vector<ReferenceCell> cells;
  std::string line;
  bool header = true;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    if (f.size() != 14) throw std::runtime_error("reference csv: expected 14 columns in '" + line + "'");
    ReferenceCell c;
    c.id = f[0];
    c.kind = f[1];
    c.model = f[2];
    c.s = std::stoul(f[3]);
    c.d = std::stoul(f[4]);
    c.tau = std::stoul(f[5]);
    c.K = std::stoul(f[6]);
    c.h = std::stoul(f[7]);
    c.e = std::stoul(f[8]);
    c.bytes = std::stoul(f[9]);
    c.quantity = f[10];
    c.expected = std::stod(f[11]);
    c.unit = f[12];
    c.tolerance = std::stod(f[13]);
    cells.push_back(std::move(c));
  }
  return cells;
}

const std::vector<ReferenceCell>& reference_cells() {
  static const std::vector<ReferenceCell> cells = [] {
    std::istringstream is(detail::kReferenceCsv);
    return parse_reference_csv(is);
  }();
  return cells;
}

namespace {

double compute_cell(const ReferenceCell& c) {
  if (c.kind == "flops_standard" || c.kind == "flops_memoryformer") {
    const FlopsReport r = c.kind == "flops_standard" ? flops_standard_block(c.s, c.d)
                                                     : flops_memoryformer_block(c.s, c.d, c.tau, c.K, c.e);
    return to_giga(c.quantity == "total" ? r.total() : r.non_attention());
  }
  if (c.kind == "table_bytes") return to_megabytes(table_memory_bytes(c.tau, c.K, c.h, c.bytes));
  if (c.kind == "block_bytes") return to_megabytes(memory_block_bytes(c.tau, c.K, c.d, c.e, c.bytes).block());
  throw std::runtime_error("reference csv: unknown kind " + c.kind);
}

}  // namespace

std::vector<CellCheck> check_reference_cells(const std::string& kinds) {
  std::vector<CellCheck> out;
  for (const auto& c : reference_cells()) {
    const bool is_flops = c.kind.rfind("flops", 0) == 0;
    if ((kinds == "flops") != is_flops) continue;
    CellCheck check{c, compute_cell(c), false};
    check.pass = std::abs(check.computed - c.expected) <= c.tolerance + 1e-9;
    out.push_back(std::move(check));
  }
  return out;
}

// ---- bucket usage -----------------------------------------------------------

std::uint64_t BucketHistogram::max() const { return counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end()); }
std::uint64_t BucketHistogram::min() const { return counts.empty() ? 0 : *std::min_element(counts.begin(), counts.end()); }
double BucketHistogram::mean() const {
  return counts.empty() ? 0.0 : static_cast<double>(samples) / static_cast<double>(counts.size());
}

namespace {

void accumulate(std::vector<BucketHistogram>& hists, std::size_t& slot, const std::string& layer,
                const RetrievalTrace<float>& trace) {
  const std::size_t K = trace.spec.chunks;
  if (hists.size() < slot + K) {
    for (std::size_t k = 0; k < K; ++k) {
      hists.push_back({layer, k, std::vector<std::uint64_t>(trace.spec.buckets(), 0), 0});
    }
  }
  for (std::size_t i = 0; i < trace.indices.size(); ++i) {
    auto& h = hists[slot + i % K];
    ++h.counts[trace.indices[i]];
    ++h.samples;
  }
  slot += K;
}

}  // namespace

std::vector<BucketHistogram> bucket_stats(const LanguageModel<float>& model, std::span<const std::int32_t> tokens,
                                          std::size_t seq) {
  if (model.config().variant != Variant::memoryformer) {
    throw std::invalid_argument("bucket_stats: model has no memory layers");
  }
  if (tokens.empty()) throw std::invalid_argument("bucket_stats: empty token stream");
  seq = std::min(seq ? seq : model.config().context, model.config().context);
  std::vector<BucketHistogram> hists;
  for (std::size_t start = 0; start < tokens.size(); start += seq) {
    const auto window = tokens.subspan(start, std::min(seq, tokens.size() - start));
    ModelCache<float> cache;
    model.forward(window, 1, &cache);
    std::size_t slot = 0;
    for (std::size_t b = 0; b < cache.mf_blocks.size(); ++b) {
      const auto& c = cache.mf_blocks[b];
      const std::string p = "block" + std::to_string(b);
      accumulate(hists, slot, p + ".q", c.trace_q);
      accumulate(hists, slot, p + ".k", c.trace_k);
      accumulate(hists, slot, p + ".v", c.trace_v);
      accumulate(hists, slot, p + ".ffn.layer1", c.ffn.trace1);
      accumulate(hists, slot, p + ".ffn.layer2", c.ffn.trace2);
    }
  }
  return hists;
}

BucketHistogram synthetic_bucket_stats(std::size_t tau, std::size_t samples, std::uint64_t seed) {
  if (tau == 0 || tau > kMaxBits) throw std::invalid_argument("synthetic_bucket_stats: bad tau");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  BucketHistogram h{"synthetic", 0, std::vector<std::uint64_t>(std::size_t{1} << tau, 0), samples};
  std::vector<double> z(tau);
  for (std::size_t i = 0; i < samples; ++i) {
    for (auto& v : z) v = n01(rng);
    ++h.counts[hash_chunk<double>(z)];
  }
  return h;
}

// ---- reports ----------------------------------------------------------------

void write_flops_csv(std::ostream& os, const std::vector<std::pair<std::string, FlopsReport>>& rows) {
  os << "label,mode,qkv,output_projection,ffn,attention_scores,attention_values,attention,non_attention,total\n";
  os << std::setprecision(12);
  for (const auto& [label, r] : rows) {
    os << label << ',' << r.mode << ',' << r.qkv << ',' << r.output_projection << ',' << r.ffn << ','
       << r.attention_scores << ',' << r.attention_values << ',' << r.attention() << ',' << r.non_attention() << ','
       << r.total() << '\n';
  }
}

void write_memory_csv(std::ostream& os, const std::vector<std::pair<std::string, MemoryReport>>& rows) {
  os << "label,bytes_per_element,layer1_bytes,layer2_bytes,block_bytes,block_mb\n";
  for (const auto& [label, r] : rows) {
    os << label << ',' << r.bytes_per_element << ',' << r.layer1 << ',' << r.layer2 << ',' << r.block() << ','
       << std::fixed << std::setprecision(3) << to_megabytes(r.block()) << std::defaultfloat << '\n';
  }
}

void write_bucket_csv(std::ostream& os, const std::vector<BucketHistogram>& hists) {
  os << "layer,table,bucket,count\n";
  for (const auto& h : hists)
    for (std::size_t b = 0; b < h.counts.size(); ++b) os << h.layer << ',' << h.table << ',' << b << ',' << h.counts[b] << '\n';
}

void write_bucket_summary(std::ostream& os, const std::vector<BucketHistogram>& hists) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& h : hists) {
    std::ostringstream mean, ratio;
    mean << std::fixed << std::setprecision(2) << h.mean();
    ratio << std::fixed << std::setprecision(3) << h.max_over_mean();
    rows.push_back({h.layer, std::to_string(h.table), std::to_string(h.counts.size()), std::to_string(h.samples),
                    std::to_string(h.min()), std::to_string(h.max()), mean.str(), ratio.str()});
  }
  os << format_table({"layer", "table", "buckets", "samples", "min", "max", "mean", "max/mean"}, rows);
}

std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string& v = c < cells.size() ? cells[c] : std::string();
      os << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << v;
    }
    os << '\n';
  };
  line(header);
  std::vector<std::string> rule;
  for (auto w : width) rule.emplace_back(w, '-');
  line(rule);
  for (const auto& r : rows) line(r);
  return os.str();
}

}  // namespace mf
