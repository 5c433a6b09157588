#pragma once

// Memory Layer: a d -> h feature map built from K hash tables of 2^tau rows.
// Each token is split into K chunks; chunk k selects row hash(z_k) of table k,
// scaled by its bucket probability p(z_k), and the K rows are summed.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "memoryformer/lsh.h"
#include "memoryformer/tensor.h"

namespace mf {

template <typename T>
class HashTableSet {
 public:
  HashTableSet() = default;
  // Zero-filled tables.
  HashTableSet(ChunkSpec spec, std::size_t out_dim, T temperature);
  HashTableSet(ChunkSpec spec, std::size_t out_dim, T temperature, Tensor<T> tables);

  const ChunkSpec& spec() const { return spec_; }
  std::size_t out_dim() const { return out_dim_; }
  T temperature() const { return temperature_; }

  // [K x 2^tau x h]
  const Tensor<T>& tables() const { return tables_; }
  Tensor<T>& tables() { return tables_; }

  std::span<const T> row(std::size_t table, std::size_t bucket) const;
  std::span<T> row(std::size_t table, std::size_t bucket);

  std::size_t parameter_count() const { return tables_.size(); }
  void validate() const;

  template <typename U>
  HashTableSet<U> cast() const {
    return HashTableSet<U>(spec_, out_dim_, static_cast<U>(temperature_), tables_.template cast<U>());
  }

 private:
  ChunkSpec spec_;
  std::size_t out_dim_ = 0;
  T temperature_ = T(1);
  Tensor<T> tables_;
};

// Per-token, per-chunk retrieval record kept for the backward pass.
template <typename T>
struct RetrievalTrace {
  ChunkSpec spec;
  std::size_t out_dim = 0;
  const void* owner = nullptr;
  Tensor<T> input;                     // [s x d]
  std::vector<std::uint32_t> indices;  // [s * K]
  std::vector<T> weights;              // [s * K]

  std::size_t tokens() const { return input.rows(); }
  std::size_t size() const { return indices.size(); }
  BucketCode<T> code(std::size_t token, std::size_t chunk) const;
};

template <typename T>
struct MemoryForward {
  Tensor<T> output;  // [s x h]
  RetrievalTrace<T> trace;
};

template <typename T>
struct TableRowGrad {
  std::uint32_t table = 0;
  std::uint32_t row = 0;
  std::vector<T> grad;
};

template <typename T>
struct MemoryLayerGrads {
  Tensor<T> input;                     // [s x d]
  std::vector<TableRowGrad<T>> rows;   // sorted by (table, row), one entry per retrieved row

  // dense[table][row] += grad for each entry.
  void accumulate_into(Tensor<T>& dense) const;
};

template <typename T>
MemoryForward<T> memory_forward(const Tensor<T>& x, const HashTableSet<T>& params);

template <typename T>
MemoryLayerGrads<T> memory_backward(const Tensor<T>& grad_y, const RetrievalTrace<T>& trace,
                                    const HashTableSet<T>& params);

// Same gradients, but table gradients are added straight into `dense_grad`
// ([K x 2^tau x h]). If `touched` is non-null it is sized K*2^tau and marks
// every retrieved row. Returns dL/dx.
template <typename T>
Tensor<T> memory_backward_dense(const Tensor<T>& grad_y, const RetrievalTrace<T>& trace,
                                const HashTableSet<T>& params, Tensor<T>& dense_grad,
                                std::vector<std::uint8_t>* touched = nullptr);

// Mean of p(z)^2 for z ~ N(0, I_tau).
double expected_squared_weight(std::size_t bits, double temperature);

inline constexpr double kLinearInitStd = 0.02;

// kLinearInitStd / sqrt(K).
double default_table_init_std(const ChunkSpec& spec);

// Table std giving the same output std on unit-normal input as a d -> h
// linear layer initialised with std kLinearInitStd. Much larger than the
// default once p(z) shrinks the rows; trains worse under Adam.
double matched_table_init_std(const ChunkSpec& spec, double temperature);

// Entries i.i.d. normal. std <= 0 selects default_table_init_std.
template <typename T>
HashTableSet<T> init_tables(const ChunkSpec& spec, std::size_t out_dim, std::uint64_t seed,
                            double temperature = kDefaultTemperature, double std = 0.0);

// Binary layout (little-endian):
//   "MFHT" | u32 version=1 | u32 tau | u32 K | u32 h | f32 temperature |
//   K*2^tau*h f32, row-major [table][bucket][column]
void write_tables(std::ostream& os, const HashTableSet<float>& params);
HashTableSet<float> read_tables(std::istream& is);

}  // namespace mf
