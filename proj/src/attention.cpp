#include "memoryformer/attention.h"

#include <algorithm>
#include <cmath>

#include "memoryformer/ops.h"

namespace mf {

namespace {

void check_shape(const Shape& s, const AttentionShape& a, const char* what) {
  if (s.size() != 2 || a.heads == 0 || a.seq == 0 || s[0] != a.batch * a.seq || s[1] % a.heads != 0) {
    throw std::invalid_argument(std::string("multi_head_attention: ") + what + " " + shape_string(s) +
                                " does not fit batch=" + std::to_string(a.batch) + " seq=" +
                                std::to_string(a.seq) + " heads=" + std::to_string(a.heads));
  }
}

// Copies the [seq x hd] slice of sequence b, head h.
template <typename T>
Tensor<T> head_slice(const Tensor<T>& x, std::size_t b, std::size_t h, std::size_t seq, std::size_t hd) {
  const std::size_t d = x.dim(1);
  Tensor<T> out({seq, hd});
  for (std::size_t i = 0; i < seq; ++i) std::copy_n(x.data() + (b * seq + i) * d + h * hd, hd, out.data() + i * hd);
  return out;
}

template <typename T>
void head_store(Tensor<T>& x, const Tensor<T>& slice, std::size_t b, std::size_t h, std::size_t seq, std::size_t hd) {
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < seq; ++i) std::copy_n(slice.data() + i * hd, hd, x.data() + (b * seq + i) * d + h * hd);
}

}  // namespace

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionShape& shape, AttentionCache<T>* cache) {
  check_shape(q.shape(), shape, "Q");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw std::invalid_argument("multi_head_attention: Q, K, V shapes differ");
  }
  const std::size_t d = q.dim(1), s = shape.seq, hd = d / shape.heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));
  Tensor<T> out(q.shape());
  Tensor<T> probs;
  if (cache) probs = Tensor<T>({shape.batch * shape.heads, s, s});
  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < shape.heads; ++h) {
      const Tensor<T> qh = head_slice(q, b, h, s, hd);
      const Tensor<T> kh = head_slice(k, b, h, s, hd);
      const Tensor<T> vh = head_slice(v, b, h, s, hd);
      Tensor<T> scores = scale(matmul_transposed(qh, kh), scale_factor);
      if (shape.causal) apply_causal_mask(scores);
      const Tensor<T> p = softmax_rows(scores);
      head_store(out, matmul(p, vh), b, h, s, hd);
      if (cache) std::copy(p.values().begin(), p.values().end(), probs.data() + (b * shape.heads + h) * s * s);
    }
  }
  if (cache) {
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->probs = std::move(probs);
  }
  return out;
}

template <typename T>
AttentionGrads<T> multi_head_attention_backward(const Tensor<T>& grad_out, const AttentionCache<T>& cache,
                                                const AttentionShape& shape) {
  check_shape(grad_out.shape(), shape, "gradient");
  const std::size_t d = grad_out.dim(1), s = shape.seq, hd = d / shape.heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));
  AttentionGrads<T> g{Tensor<T>(grad_out.shape()), Tensor<T>(grad_out.shape()), Tensor<T>(grad_out.shape())};
  for (std::size_t b = 0; b < shape.batch; ++b) {
    for (std::size_t h = 0; h < shape.heads; ++h) {
      const Tensor<T> qh = head_slice(cache.q, b, h, s, hd);
      const Tensor<T> kh = head_slice(cache.k, b, h, s, hd);
      const Tensor<T> vh = head_slice(cache.v, b, h, s, hd);
      const Tensor<T> go = head_slice(grad_out, b, h, s, hd);
      const T* pbase = cache.probs.data() + (b * shape.heads + h) * s * s;
      const Tensor<T> p({s, s}, std::vector<T>(pbase, pbase + s * s));
      auto pv = matmul_backward(p, vh, go);
      const Tensor<T> dscores = scale(softmax_rows_backward(p, pv.a), scale_factor);
      head_store(g.q, matmul(dscores, kh), b, h, s, hd);
      head_store(g.k, matmul(transpose(dscores), qh), b, h, s, hd);
      head_store(g.v, pv.b, b, h, s, hd);
    }
  }
  return g;
}

template Tensor<float> multi_head_attention(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                            const AttentionShape&, AttentionCache<float>*);
template Tensor<double> multi_head_attention(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                             const AttentionShape&, AttentionCache<double>*);
template AttentionGrads<float> multi_head_attention_backward(const Tensor<float>&, const AttentionCache<float>&,
                                                             const AttentionShape&);
template AttentionGrads<double> multi_head_attention_backward(const Tensor<double>&, const AttentionCache<double>&,
                                                              const AttentionShape&);

}  // namespace mf
