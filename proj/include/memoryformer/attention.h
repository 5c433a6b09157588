#pragma once

#include "memoryformer/tensor.h"

namespace mf {

// Rows of Q/K/V are `batch` sequences of `seq` tokens laid out back to back.
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq = 0;
  std::size_t heads = 1;
  bool causal = true;
};

template <typename T>
struct AttentionCache {
  Tensor<T> q, k, v;
  Tensor<T> probs;  // [batch * heads x seq x seq]
};

template <typename T>
struct AttentionGrads {
  Tensor<T> q, k, v;
};

// Scaled dot-product attention per head (scale 1/sqrt(d/H)), head outputs
// concatenated. No output projection.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionShape& shape, AttentionCache<T>* cache = nullptr);

template <typename T>
AttentionGrads<T> multi_head_attention_backward(const Tensor<T>& grad_out, const AttentionCache<T>& cache,
                                                const AttentionShape& shape);

}  // namespace mf
