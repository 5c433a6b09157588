#pragma once

// Dense primitives with hand-written backward passes. All per-token ops act
// on 2-D tensors [rows x features]; batch and sequence are folded into rows.

#include <cstdint>
#include <span>
#include <vector>

#include "memoryformer/tensor.h"

namespace mf {

template <typename T>
struct MatmulGrads {
  Tensor<T> a;
  Tensor<T> b;
};

// [m x k] . [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// grad_a = grad_out . b^T, grad_b = a^T . grad_out
template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out);

// [m x k] . [n x k]^T -> [m x n]
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

// a += b, shapes must agree.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// x . w + bias, with bias broadcast over rows. bias may be empty.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out);

template <typename T>
struct LayerNormCache {
  Tensor<T> normalized;  // pre-affine
  std::vector<T> inv_std;
};

template <typename T>
struct LayerNormGrads {
  Tensor<T> input;
  Tensor<T> gain;
  Tensor<T> bias;
};

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps,
                     LayerNormCache<T>* cache = nullptr);

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& grad_out, const Tensor<T>& gain,
                                      const LayerNormCache<T>& cache);

// Row-wise softmax over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);

// Given y = softmax_rows(x) and dL/dy, returns dL/dx.
template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& grad_y);

template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;  // mean negative log-likelihood
  Tensor<T> grad;     // dloss/dlogits
};

template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

// Splits [rows x (heads*hd)] into [heads x rows x hd].
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);

// Inverse of split_heads.
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x);

// out[i] = table[ids[i]]
template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int32_t> ids);

// grad_table[ids[i]] += grad_out[i]
template <typename T>
void embedding_scatter_add(Tensor<T>& grad_table, std::span<const std::int32_t> ids, const Tensor<T>& grad_out);

inline constexpr double kMaskedScore = -1e30;

// Sets scores[i][j] = kMaskedScore for j > i on a square [s x s] tensor.
template <typename T>
void apply_causal_mask(Tensor<T>& scores);

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& grad_out);

}  // namespace mf
