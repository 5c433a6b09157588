#include "memoryformer/lsh.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mf {

namespace {

template <typename T>
void require_positive_temperature(T t) {
  if (!(t > T(0))) throw std::invalid_argument("temperature must be positive");
}

}  // namespace

ChunkSpec ChunkSpec::from_chunks(std::size_t dim, std::size_t chunks) {
  if (chunks == 0 || dim % chunks != 0) {
    throw std::invalid_argument("chunk spec: width " + std::to_string(dim) + " is not divisible into " +
                                std::to_string(chunks) + " chunks");
  }
  ChunkSpec spec{dim, chunks, dim / chunks};
  spec.validate();
  return spec;
}

ChunkSpec ChunkSpec::from_bits(std::size_t dim, std::size_t bits) {
  if (bits == 0 || dim % bits != 0) {
    throw std::invalid_argument("chunk spec: width " + std::to_string(dim) + " is not a multiple of " +
                                std::to_string(bits) + " bits");
  }
  ChunkSpec spec{dim, dim / bits, bits};
  spec.validate();
  return spec;
}

void ChunkSpec::validate() const {
  if (bits < 1 || chunks < 1) throw std::invalid_argument("chunk spec: bits and chunks must be >= 1");
  if (bits > kMaxBits) throw std::invalid_argument("chunk spec: more than 24 bits per chunk");
  if (dim != chunks * bits) throw std::invalid_argument("chunk spec: dim != chunks * bits");
}

template <typename T>
std::vector<int> sign_binarize(std::span<const T> z) {
  std::vector<int> s(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!std::isfinite(z[i])) throw std::invalid_argument("sign_binarize: non-finite entry");
    s[i] = z[i] < T(0) ? -1 : 1;
  }
  return s;
}

std::uint32_t encode_index(std::span<const int> signs) {
  if (signs.size() > kMaxBits) throw std::invalid_argument("encode_index: pattern wider than 24 bits");
  std::uint32_t idx = 0;
  for (std::size_t i = 0; i < signs.size(); ++i) {
    if (signs[i] == 1) {
      idx |= std::uint32_t{1} << i;
    } else if (signs[i] != -1) {
      throw std::invalid_argument("encode_index: entry " + std::to_string(i) + " is not +-1");
    }
  }
  return idx;
}

std::vector<int> decode_index(std::uint32_t index, std::size_t bits) {
  if (bits > kMaxBits || index >= (std::uint64_t{1} << bits)) {
    throw std::out_of_range("decode_index: index " + std::to_string(index) + " outside [0, 2^" +
                            std::to_string(bits) + ")");
  }
  std::vector<int> s(bits);
  for (std::size_t i = 0; i < bits; ++i) s[i] = (index >> i) & 1u ? 1 : -1;
  return s;
}

template <typename T>
std::vector<std::span<const T>> split_chunks(std::span<const T> x, const ChunkSpec& spec) {
  spec.validate();
  if (x.size() != spec.dim) {
    throw std::invalid_argument("split_chunks: input width " + std::to_string(x.size()) + " != " +
                                std::to_string(spec.dim));
  }
  std::vector<std::span<const T>> out;
  out.reserve(spec.chunks);
  for (std::size_t k = 0; k < spec.chunks; ++k) out.push_back(x.subspan(k * spec.bits, spec.bits));
  return out;
}

template <typename T>
T bucket_weight(std::span<const T> z, T temperature) {
  require_positive_temperature(temperature);
  const T scale = T(2) / temperature;
  T log_p = 0;
  for (T v : z) log_p -= std::log1p(std::exp(-scale * std::abs(v)));
  return std::exp(log_p);
}

template <typename T>
std::vector<T> bucket_weight_naive(std::span<const T> z, T temperature) {
  require_positive_temperature(temperature);
  if (z.size() > 16) throw std::invalid_argument("bucket_weight_naive: too many bits to enumerate");
  const std::size_t n = std::size_t{1} << z.size();
  std::vector<T> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::vector<int> s = decode_index(static_cast<std::uint32_t>(i), z.size());
    T sim = 0;
    for (std::size_t j = 0; j < z.size(); ++j) sim += z[j] * static_cast<T>(s[j]);
    logits[i] = sim / temperature;
  }
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  for (T& v : logits) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (T& v : logits) v /= sum;
  return logits;
}

namespace {
std::atomic<bool> g_flip_first_weight_grad{false};
}  // namespace

namespace fault {
void set_flip_weight_gradient(bool on) { g_flip_first_weight_grad.store(on); }
bool flip_weight_gradient() { return g_flip_first_weight_grad.load(); }
}  // namespace fault

template <typename T>
void bucket_weight_grad_into(std::span<const T> z, T temperature, T weight, std::span<T> out) {
  require_positive_temperature(temperature);
  const T scale = T(2) / temperature;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T sgn = z[i] < T(0) ? T(-1) : T(1);
    // scale / (1 + exp(scale*|z|)) written to stay finite for large |z|.
    const T e = std::exp(-scale * std::abs(z[i]));
    out[i] = weight * sgn * scale * e / (T(1) + e);
  }
  if (!out.empty() && fault::flip_weight_gradient()) out[0] = -out[0];
}

template <typename T>
std::vector<T> bucket_weight_grad(std::span<const T> z, T temperature) {
  std::vector<T> g(z.size());
  bucket_weight_grad_into<T>(z, temperature, bucket_weight(z, temperature), g);
  return g;
}

#define MF_INSTANTIATE_LSH(T)                                                                      \
  template std::vector<int> sign_binarize<T>(std::span<const T>);                                  \
  template std::vector<std::span<const T>> split_chunks<T>(std::span<const T>, const ChunkSpec&); \
  template T bucket_weight<T>(std::span<const T>, T);                                              \
  template std::vector<T> bucket_weight_naive<T>(std::span<const T>, T);                           \
  template std::vector<T> bucket_weight_grad<T>(std::span<const T>, T);                            \
  template void bucket_weight_grad_into<T>(std::span<const T>, T, T, std::span<T>);

MF_INSTANTIATE_LSH(float)
MF_INSTANTIATE_LSH(double)

#undef MF_INSTANTIATE_LSH

}  // namespace mf
