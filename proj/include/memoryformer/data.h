#pragma once

// Byte-level corpus: every byte is a token (vocab 256). The last
// `eval_fraction` of the file is held out for validation.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mf {

inline constexpr std::size_t kByteVocab = 256;

struct Batch {
  std::size_t batch = 0, seq = 0;
  std::vector<std::int32_t> tokens;   // [batch * seq]
  std::vector<std::int32_t> targets;  // tokens shifted left by one
};

class CorpusDataset {
 public:
  CorpusDataset() = default;
  CorpusDataset(const std::string& bytes, double eval_fraction);
  static CorpusDataset from_file(const std::filesystem::path& path, double eval_fraction);

  std::size_t vocab() const { return kByteVocab; }
  std::size_t size() const { return tokens_.size(); }
  std::size_t split() const { return split_; }
  std::span<const std::int32_t> train() const { return std::span(tokens_).first(split_); }
  std::span<const std::int32_t> validation() const { return std::span(tokens_).subspan(split_); }

  // `batch` random training windows of seq+1 tokens. The draw depends only on
  // (seed, step), so a resumed run sees the same batches.
  Batch sample(std::size_t batch, std::size_t seq, std::uint64_t seed, std::uint64_t step) const;

  // Non-overlapping validation windows from the start of the held-out shard,
  // at most `max_windows` (0 = all).
  std::vector<Batch> validation_batches(std::size_t batch, std::size_t seq, std::size_t max_windows) const;

 private:
  std::vector<std::int32_t> tokens_;
  std::size_t split_ = 0;
};

std::vector<std::int32_t> encode_bytes(std::string_view text);
std::string decode_bytes(std::span<const std::int32_t> tokens);

}  // namespace mf
