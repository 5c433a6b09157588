#include "memoryformer/data.h"

#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace mf {

std::vector<std::int32_t> encode_bytes(std::string_view text) {
  std::vector<std::int32_t> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

std::string decode_bytes(std::span<const std::int32_t> tokens) {
  std::string s(tokens.size(), '\0');
  for (std::size_t i = 0; i < tokens.size(); ++i) s[i] = static_cast<char>(tokens[i] & 0xFF);
  return s;
}

CorpusDataset::CorpusDataset(const std::string& bytes, double eval_fraction) : tokens_(encode_bytes(bytes)) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw std::invalid_argument("corpus: eval fraction must be in (0, 1)");
  }
  split_ = tokens_.size() - static_cast<std::size_t>(eval_fraction * static_cast<double>(tokens_.size()));
  if (split_ < 2 || split_ >= tokens_.size()) throw std::invalid_argument("corpus: too small to split");
}

CorpusDataset CorpusDataset::from_file(const std::filesystem::path& path, double eval_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return CorpusDataset(ss.str(), eval_fraction);
}

Batch CorpusDataset::sample(std::size_t batch, std::size_t seq, std::uint64_t seed, std::uint64_t step) const {
  if (batch == 0 || seq == 0) throw std::invalid_argument("sample: empty batch");
  if (split_ < seq + 1) throw std::invalid_argument("sample: training shard shorter than one window");
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
  std::mt19937_64 rng(ss);
  std::uniform_int_distribution<std::size_t> start(0, split_ - seq - 1);
  Batch b{batch, seq, {}, {}};
  b.tokens.reserve(batch * seq);
  b.targets.reserve(batch * seq);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t s0 = start(rng);
    b.tokens.insert(b.tokens.end(), tokens_.begin() + s0, tokens_.begin() + s0 + seq);
    b.targets.insert(b.targets.end(), tokens_.begin() + s0 + 1, tokens_.begin() + s0 + seq + 1);
  }
  return b;
}

std::vector<Batch> CorpusDataset::validation_batches(std::size_t batch, std::size_t seq,
                                                     std::size_t max_windows) const {
  const auto val = validation();
  if (val.size() < seq + 1) throw std::invalid_argument("validation shard shorter than one window");
  std::size_t windows = (val.size() - 1) / seq;
  if (max_windows) windows = std::min(windows, max_windows);
  std::vector<Batch> out;
  for (std::size_t w = 0; w < windows; w += batch) {
    const std::size_t n = std::min(batch, windows - w);
    Batch b{n, seq, {}, {}};
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t s0 = (w + i) * seq;
      b.tokens.insert(b.tokens.end(), val.begin() + s0, val.begin() + s0 + seq);
      b.targets.insert(b.targets.end(), val.begin() + s0 + 1, val.begin() + s0 + seq + 1);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace mf
