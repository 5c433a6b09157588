#include "memoryformer/ops.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace mf {

namespace {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor, got " + shape_string(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

// c[m x n] += a[m x k] . b[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] . b[n x k]^T, via a transposed copy of b so the inner
// loop is the same vectorisable axpy as gemm_nn.
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

// c[k x n] += a[m x k]^T . b[m x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_string(a.shape()) + " . " +
                                shape_string(b.shape()));
  }
  Tensor<T> out({a.dim(0), b.dim(1)});
  gemm_nn(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), out.data());
  ensure_finite(out, "matmul");
  return out;
}

template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& grad_out) {
  require_matrix(grad_out, "matmul_backward");
  if (grad_out.dim(0) != a.dim(0) || grad_out.dim(1) != b.dim(1)) {
    throw std::invalid_argument("matmul_backward: gradient shape " + shape_string(grad_out.shape()));
  }
  MatmulGrads<T> g{Tensor<T>(a.shape()), Tensor<T>(b.shape())};
  gemm_nt(a.dim(0), b.dim(1), a.dim(1), grad_out.data(), b.data(), g.a.data());
  gemm_tn(a.dim(0), a.dim(1), b.dim(1), a.data(), grad_out.data(), g.b.data());
  ensure_finite(g.a, "matmul_backward");
  ensure_finite(g.b, "matmul_backward");
  return g;
}

template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a, "matmul_transposed");
  require_matrix(b, "matmul_transposed");
  if (a.dim(1) != b.dim(1)) throw std::invalid_argument("matmul_transposed: inner dimensions differ");
  Tensor<T> out({a.dim(0), b.dim(0)});
  gemm_nt(a.dim(0), a.dim(1), b.dim(0), a.data(), b.data(), out.data());
  ensure_finite(out, "matmul_transposed");
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  ensure_finite(out, "add");
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = a;
  for (T& v : out.values()) v *= factor;
  ensure_finite(out, "scale");
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_matrix(x, "linear");
  require_matrix(weight, "linear");
  if (x.dim(1) != weight.dim(0)) throw std::invalid_argument("linear: input width does not match weight rows");
  const std::size_t m = x.dim(0), n = weight.dim(1);
  Tensor<T> out({m, n});
  if (!bias.empty()) {
    if (bias.size() != n) throw std::invalid_argument("linear: bias width mismatch");
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.data(), bias.data() + n, out.data() + i * n);
  }
  gemm_nn(m, x.dim(1), n, x.data(), weight.data(), out.data());
  ensure_finite(out, "linear");
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out) {
  auto mm = matmul_backward(x, weight, grad_out);
  Tensor<T> gb({weight.dim(1)});
  for (std::size_t i = 0; i < grad_out.dim(0); ++i) {
    auto r = grad_out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) gb[j] += r[j];
  }
  return {std::move(mm.a), std::move(mm.b), std::move(gb)};
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps,
                     LayerNormCache<T>* cache) {
  require_matrix(x, "layer_norm");
  const std::size_t d = x.dim(1);
  if (d == 0) throw std::invalid_argument("layer_norm: zero-width rows");
  if (gain.size() != d || bias.size() != d) throw std::invalid_argument("layer_norm: affine width mismatch");
  const std::size_t rows = x.dim(0);
  Tensor<T> out(x.shape());
  Tensor<T> normalized(x.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (T v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[r] = static_cast<T>(istd);
    auto nrow = normalized.row(r);
    auto orow = out.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      nrow[j] = static_cast<T>((in[j] - mean) * istd);
      orow[j] = nrow[j] * gain[j] + bias[j];
    }
  }
  ensure_finite(out, "layer_norm");
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& grad_out, const Tensor<T>& gain,
                                      const LayerNormCache<T>& cache) {
  const Tensor<T>& xhat = cache.normalized;
  require_same_shape(grad_out, xhat, "layer_norm_backward");
  const std::size_t rows = xhat.dim(0), d = xhat.dim(1);
  LayerNormGrads<T> g{Tensor<T>(xhat.shape()), Tensor<T>({d}), Tensor<T>({d})};
  std::vector<T> dxhat(d);
  for (std::size_t r = 0; r < rows; ++r) {
    auto go = grad_out.row(r);
    auto xh = xhat.row(r);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      g.gain[j] += go[j] * xh[j];
      g.bias[j] += go[j];
      dxhat[j] = go[j] * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xh[j];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    auto gi = g.input.row(r);
    const double istd = cache.inv_std[r];
    for (std::size_t j = 0; j < d; ++j) {
      gi[j] = static_cast<T>(istd * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat));
    }
  }
  ensure_finite(g.input, "layer_norm_backward");
  return g;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() == 0 || x.cols() == 0) throw std::invalid_argument("softmax_rows: empty last axis");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum = 0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const T inv = T(1) / sum;
    for (T& v : o) v *= inv;
  }
  ensure_finite(out, "softmax_rows");
  return out;
}

template <typename T>
Tensor<T> softmax_rows_backward(const Tensor<T>& y, const Tensor<T>& grad_y) {
  require_same_shape(y, grad_y, "softmax_rows_backward");
  Tensor<T> out(y.shape());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto yr = y.row(r);
    auto gr = grad_y.row(r);
    T dot = 0;
    for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
    auto o = out.row(r);
    for (std::size_t j = 0; j < yr.size(); ++j) o[j] = yr[j] * (gr[j] - dot);
  }
  ensure_finite(out, "softmax_rows_backward");
  return out;
}

template <typename T>
CrossEntropyResult<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) throw std::invalid_argument("cross_entropy: target count differs from rows");
  CrossEntropyResult<T> res{0.0, Tensor<T>(logits.shape())};
  const T inv_rows = T(1) / static_cast<T>(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                              std::to_string(vocab) + ")");
    }
    auto in = logits.row(r);
    auto g = res.grad.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      g[j] = std::exp(in[j] - mx);
      sum += g[j];
    }
    total += std::log(sum) + mx - in[t];
    const T inv = static_cast<T>(1.0 / sum);
    for (std::size_t j = 0; j < vocab; ++j) g[j] *= inv * inv_rows;
    g[t] -= inv_rows;
  }
  res.loss = total / static_cast<double>(rows);
  if (!std::isfinite(res.loss)) throw NonFiniteError("cross_entropy: non-finite loss");
  ensure_finite(res.grad, "cross_entropy");
  return res;
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  require_matrix(x, "split_heads");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("split_heads: width not divisible by heads");
  const std::size_t hd = d / heads;
  Tensor<T> out({heads, rows, hd});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      std::copy_n(x.data() + r * d + h * hd, hd, out.data() + (h * rows + r) * hd);
  return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  if (x.rank() != 3) throw std::invalid_argument("merge_heads: expected [heads x rows x hd]");
  const std::size_t heads = x.dim(0), rows = x.dim(1), hd = x.dim(2);
  Tensor<T> out({rows, heads * hd});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(x.data() + (h * rows + r) * hd, hd, out.data() + r * heads * hd + h * hd);
  return out;
}

template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  require_matrix(table, "embedding_gather");
  const std::size_t d = table.dim(1);
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
      throw std::out_of_range("embedding_gather: id " + std::to_string(ids[i]) + " out of range");
    }
    std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  return out;
}

template <typename T>
void embedding_scatter_add(Tensor<T>& grad_table, std::span<const std::int32_t> ids, const Tensor<T>& grad_out) {
  const std::size_t d = grad_table.dim(1);
  if (grad_out.rank() != 2 || grad_out.dim(0) != ids.size() || grad_out.dim(1) != d) {
    throw std::invalid_argument("embedding_scatter_add: gradient shape mismatch");
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    T* dst = grad_table.data() + static_cast<std::size_t>(ids[i]) * d;
    const T* src = grad_out.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
  }
}

template <typename T>
void apply_causal_mask(Tensor<T>& scores) {
  require_matrix(scores, "apply_causal_mask");
  if (scores.dim(0) != scores.dim(1)) throw std::invalid_argument("apply_causal_mask: scores must be square");
  const std::size_t s = scores.dim(0);
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = i + 1; j < s; ++j) scores[i * s + j] = static_cast<T>(kMaskedScore);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  ensure_finite(out, "gelu");
  return out;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  require_same_shape(x, grad_out, "gelu_backward");
  Tensor<T> out(x.shape());
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  const T inv_sqrt2pi = static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
    out[i] = grad_out[i] * (cdf + x[i] * pdf);
  }
  ensure_finite(out, "gelu_backward");
  return out;
}

#define MF_INSTANTIATE_OPS(T)                                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template MatmulGrads<T> matmul_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> matmul_transposed(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose(const Tensor<T>&);                                                        \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                                         \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T,                 \
                                LayerNormCache<T>*);                                                     \
  template LayerNormGrads<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&,                     \
                                                 const LayerNormCache<T>&);                              \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                                     \
  template Tensor<T> softmax_rows_backward(const Tensor<T>&, const Tensor<T>&);                          \
  template CrossEntropyResult<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);         \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                                         \
  template Tensor<T> merge_heads(const Tensor<T>&);                                                      \
  template Tensor<T> embedding_gather(const Tensor<T>&, std::span<const std::int32_t>);                  \
  template void embedding_scatter_add(Tensor<T>&, std::span<const std::int32_t>, const Tensor<T>&);      \
  template void apply_causal_mask(Tensor<T>&);                                                           \
  template Tensor<T> gelu(const Tensor<T>&);                                                             \
  template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);

MF_INSTANTIATE_OPS(float)
MF_INSTANTIATE_OPS(double)

#undef MF_INSTANTIATE_OPS

}  // namespace mf
