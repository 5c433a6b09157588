#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "memoryformer/attention.h"
#include "memoryformer/memory_layer.h"
#include "memoryformer/ops.h"
#include "memoryformer/tensor.h"

namespace mf {

enum class Variant { memoryformer, baseline };
enum class ResidualWiring {
  prenorm,  // Y = Z + MemoryBlock(Z)
  literal,  // Z = Norm(X) + MHA, Y = Z + MemoryBlock(Norm(X))
};

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
std::string to_string(ResidualWiring w);
ResidualWiring parse_residual(const std::string& s);

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden = 64;
  std::size_t heads = 2;
  std::size_t tau = 8;
  std::size_t chunks = 8;
  std::size_t expand_bits = 2;
  double temperature = kDefaultTemperature;
  std::size_t vocab = 256;
  std::size_t context = 128;
  Variant variant = Variant::memoryformer;
  bool block_gelu = false;
  ResidualWiring residual = ResidualWiring::prenorm;
  double table_init_std = 0.0;  // <= 0: 0.02 / sqrt(K)

  void validate() const;
  ChunkSpec input_spec() const { return {hidden, chunks, tau}; }
  std::size_t expanded_width() const { return (tau + expand_bits) * chunks; }
  ChunkSpec expanded_spec() const { return {expanded_width(), chunks, tau + expand_bits}; }
};

enum class ParamKind { table, matrix, vector };

template <typename T>
struct ParamRef {
  std::string name;
  ParamKind kind;
  Tensor<T>* value = nullptr;
  Tensor<T>* grad = nullptr;
  HashTableSet<T>* tables = nullptr;         // kind == table
  std::vector<std::uint8_t>* touched = nullptr;  // kind == table; rows retrieved since zero_grad
};

template <typename T>
struct LayerNormParams {
  DualTensor<T> gain, bias;
  explicit LayerNormParams(std::size_t d = 0)
      : gain(Tensor<T>::full({d}, T(1))), bias(Tensor<T>({d})) {}
  Tensor<T> forward(const Tensor<T>& x, LayerNormCache<T>* cache) const;
  Tensor<T> backward(const Tensor<T>& grad_out, const LayerNormCache<T>& cache);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
};

template <typename T>
struct LinearParams {
  DualTensor<T> weight, bias;
  LinearParams() = default;
  LinearParams(Tensor<T> w, std::size_t out) : weight(std::move(w)), bias(Tensor<T>({out})) {}
  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight.value, bias.value); }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& grad_out);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
};

template <typename T>
struct MemoryLayerParams {
  HashTableSet<T> tables;
  Tensor<T> grad;
  std::vector<std::uint8_t> touched;
  MemoryLayerParams() = default;
  explicit MemoryLayerParams(HashTableSet<T> t);
  MemoryForward<T> forward(const Tensor<T>& x) const { return memory_forward(x, tables); }
  Tensor<T> backward(const Tensor<T>& grad_out, const RetrievalTrace<T>& trace);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
};

// Two memory layers, each preceded by a norm; optional GELU after the first.
template <typename T>
struct MemoryBlock {
  struct Cache {
    LayerNormCache<T> norm1, norm2;
    RetrievalTrace<T> trace1, trace2;
    Tensor<T> hidden;  // first layer output, pre-activation
  };

  LayerNormParams<T> norm1, norm2;
  MemoryLayerParams<T> layer1, layer2;
  bool gelu = false;

  MemoryBlock() = default;
  MemoryBlock(const ModelConfig& cfg, std::uint64_t seed_a, std::uint64_t seed_b);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache = nullptr) const;
  Tensor<T> backward(const Tensor<T>& grad_out, const Cache& cache);
  std::size_t table_parameter_count() const { return layer1.tables.parameter_count() + layer2.tables.parameter_count(); }
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
};

// X -> Norm -> memory-layer Q/K/V -> attention, plus the memory block.
template <typename T>
struct MemoryFormerBlock {
  struct Cache {
    LayerNormCache<T> norm;
    Tensor<T> normalized;
    RetrievalTrace<T> trace_q, trace_k, trace_v;
    AttentionCache<T> attention;
    typename MemoryBlock<T>::Cache ffn;
  };

  LayerNormParams<T> norm;
  MemoryLayerParams<T> q, k, v;
  MemoryBlock<T> ffn;
  std::size_t heads = 1;
  ResidualWiring residual = ResidualWiring::prenorm;

  MemoryFormerBlock() = default;
  MemoryFormerBlock(const ModelConfig& cfg, std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& x, std::size_t batch, Cache* cache = nullptr) const;
  Tensor<T> backward(const Tensor<T>& grad_out, std::size_t batch, const Cache& cache);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
};

// Standard pre-norm block: linear Q/K/V/O and a 4x GELU feed-forward.
template <typename T>
struct BaselineBlock {
  struct Cache {
    LayerNormCache<T> norm1, norm2;
    Tensor<T> normalized1, normalized2;
    AttentionCache<T> attention;
    Tensor<T> attended, hidden, activated;
  };

  LayerNormParams<T> norm1, norm2;
  LinearParams<T> q, k, v, o, fc1, fc2;
  std::size_t heads = 1;

  BaselineBlock() = default;
  BaselineBlock(const ModelConfig& cfg, std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& x, std::size_t batch, Cache* cache = nullptr) const;
  Tensor<T> backward(const Tensor<T>& grad_out, std::size_t batch, const Cache& cache);
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out);
};

template <typename T>
struct ModelCache {
  std::vector<std::int32_t> tokens;
  std::size_t batch = 0, seq = 0;
  std::vector<typename MemoryFormerBlock<T>::Cache> mf_blocks;
  std::vector<typename BaselineBlock<T>::Cache> baseline_blocks;
  LayerNormCache<T> final_norm;
  Tensor<T> final_hidden;
};

inline constexpr double kEmbeddingInitStd = 0.02;

template <typename T>
class LanguageModel {
 public:
  LanguageModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // tokens holds `batch` sequences of equal length <= context, back to back.
  // Returns logits [tokens.size() x vocab].
  Tensor<T> forward(std::span<const std::int32_t> tokens, std::size_t batch, ModelCache<T>* cache = nullptr) const;
  // Accumulates parameter gradients.
  void backward(const Tensor<T>& grad_logits, const ModelCache<T>& cache);

  // Mean cross-entropy of next-token targets; fills gradients when `train`.
  double loss(std::span<const std::int32_t> tokens, std::span<const std::int32_t> targets, std::size_t batch,
              bool train);

  // Greedy continuation of `prompt` by `count` tokens; the window slides once
  // the context is full.
  std::vector<std::int32_t> generate(std::span<const std::int32_t> prompt, std::size_t count) const;

  void zero_grad();
  std::vector<ParamRef<T>> parameters();
  std::size_t parameter_count();
  std::size_t table_parameter_count();

  // Copies every parameter from a model with the same config.
  template <typename U>
  void copy_parameters_from(LanguageModel<U>& other);

  std::vector<MemoryFormerBlock<T>>& memoryformer_blocks() { return mf_blocks_; }
  const std::vector<MemoryFormerBlock<T>>& memoryformer_blocks() const { return mf_blocks_; }
  std::vector<BaselineBlock<T>>& baseline_blocks() { return baseline_blocks_; }

 private:
  ModelConfig cfg_;
  DualTensor<T> token_embedding_, position_embedding_;
  std::vector<MemoryFormerBlock<T>> mf_blocks_;
  std::vector<BaselineBlock<T>> baseline_blocks_;
  LayerNormParams<T> final_norm_;
  DualTensor<T> head_;
};

template <typename T>
template <typename U>
void LanguageModel<T>::copy_parameters_from(LanguageModel<U>& other) {
  auto dst = parameters();
  auto src = other.parameters();
  if (dst.size() != src.size()) throw std::invalid_argument("copy_parameters_from: parameter lists differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].value->shape() != src[i].value->shape()) {
      throw std::invalid_argument("copy_parameters_from: shape mismatch at " + dst[i].name);
    }
    for (std::size_t j = 0; j < dst[i].value->size(); ++j) (*dst[i].value)[j] = static_cast<T>((*src[i].value)[j]);
  }
}

}  // namespace mf
