#pragma once

// Sign-pattern locality-sensitive hashing and the closed-form bucket
// probability used to weight retrieved table rows.
//
// Conventions:
//   sign(0) = +1.
//   Bit i of a bucket index is set iff entry i of the chunk is non-negative
//   (little-endian: entry i carries weight 2^i).

#include <cstdint>
#include <span>
#include <vector>

namespace mf {

inline constexpr double kDefaultTemperature = 1.0;
inline constexpr std::size_t kMaxBits = 24;

struct ChunkSpec {
  std::size_t dim = 0;     // input width d
  std::size_t chunks = 0;  // K
  std::size_t bits = 0;    // tau

  // d = chunks * bits; throws on an invalid combination.
  static ChunkSpec from_chunks(std::size_t dim, std::size_t chunks);
  static ChunkSpec from_bits(std::size_t dim, std::size_t bits);

  void validate() const;
  std::size_t buckets() const { return std::size_t{1} << bits; }
  bool operator==(const ChunkSpec&) const = default;
};

// One retrieval: the bucket a chunk hashed to, its probability weight and a
// view of the chunk values.
template <typename T>
struct BucketCode {
  std::uint32_t index = 0;
  T weight = 0;
  std::span<const T> chunk;
};

template <typename T>
std::vector<int> sign_binarize(std::span<const T> z);

// Throws if an entry is not +-1 or the pattern is wider than kMaxBits.
std::uint32_t encode_index(std::span<const int> signs);

std::vector<int> decode_index(std::uint32_t index, std::size_t bits);

// encode_index(sign_binarize(z)) without allocating.
template <typename T>
std::uint32_t hash_chunk(std::span<const T> z) {
  std::uint32_t idx = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i] >= T(0)) idx |= std::uint32_t{1} << i;
  }
  return idx;
}

template <typename T>
std::vector<std::span<const T>> split_chunks(std::span<const T> x, const ChunkSpec& spec);

// p(z) = 1 / prod_i (1 + exp(-2|z_i| / t)), evaluated in log space.
template <typename T>
T bucket_weight(std::span<const T> z, T temperature);

// Full softmax over all 2^tau buckets with similarity <z, decode_index(i)>.
// Reference path; only for small tau.
template <typename T>
std::vector<T> bucket_weight_naive(std::span<const T> z, T temperature);

// dp/dz_i = p * sign(z_i) * (2/t) / (1 + exp(2|z_i|/t)).
template <typename T>
std::vector<T> bucket_weight_grad(std::span<const T> z, T temperature);

// Writes the gradient into `out` given the already computed weight p.
template <typename T>
void bucket_weight_grad_into(std::span<const T> z, T temperature, T weight, std::span<T> out);

// Test hook: when on, bucket_weight_grad_into negates the first entry of
// every chunk gradient. Used to prove the gradient checks can fail.
namespace fault {
void set_flip_weight_gradient(bool on);
bool flip_weight_gradient();
}  // namespace fault

}  // namespace mf
