#include "memoryformer/memory_layer.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>

#include "memoryformer/binary_io.h"

namespace mf {

template <typename T>
HashTableSet<T>::HashTableSet(ChunkSpec spec, std::size_t out_dim, T temperature)
    : HashTableSet(spec, out_dim, temperature, Tensor<T>({spec.chunks, spec.buckets(), out_dim})) {}

template <typename T>
HashTableSet<T>::HashTableSet(ChunkSpec spec, std::size_t out_dim, T temperature, Tensor<T> tables)
    : spec_(spec), out_dim_(out_dim), temperature_(temperature), tables_(std::move(tables)) {
  validate();
}

template <typename T>
void HashTableSet<T>::validate() const {
  spec_.validate();
  if (out_dim_ == 0) throw std::invalid_argument("hash tables: output width must be positive");
  if (!(temperature_ > T(0))) throw std::invalid_argument("hash tables: temperature must be positive");
  const Shape expected{spec_.chunks, spec_.buckets(), out_dim_};
  if (tables_.shape() != expected) {
    throw std::invalid_argument("hash tables: storage " + shape_string(tables_.shape()) + " != " +
                                shape_string(expected));
  }
  ensure_finite(tables_, "hash tables");
}

template <typename T>
std::span<const T> HashTableSet<T>::row(std::size_t table, std::size_t bucket) const {
  return std::span<const T>(tables_.data() + (table * spec_.buckets() + bucket) * out_dim_, out_dim_);
}

template <typename T>
std::span<T> HashTableSet<T>::row(std::size_t table, std::size_t bucket) {
  return std::span<T>(tables_.data() + (table * spec_.buckets() + bucket) * out_dim_, out_dim_);
}

template <typename T>
BucketCode<T> RetrievalTrace<T>::code(std::size_t token, std::size_t chunk) const {
  const std::size_t i = token * spec.chunks + chunk;
  return {indices.at(i), weights.at(i), input.row(token).subspan(chunk * spec.bits, spec.bits)};
}

template <typename T>
void MemoryLayerGrads<T>::accumulate_into(Tensor<T>& dense) const {
  if (dense.rank() != 3) throw std::invalid_argument("accumulate_into: expected [K x 2^tau x h]");
  const std::size_t buckets = dense.dim(1), h = dense.dim(2);
  for (const auto& r : rows) {
    if (r.table >= dense.dim(0) || r.row >= buckets || r.grad.size() != h) {
      throw std::invalid_argument("accumulate_into: row gradient does not fit the table");
    }
    T* dst = dense.data() + (static_cast<std::size_t>(r.table) * buckets + r.row) * h;
    for (std::size_t j = 0; j < h; ++j) dst[j] += r.grad[j];
  }
}

template <typename T>
MemoryForward<T> memory_forward(const Tensor<T>& x, const HashTableSet<T>& params) {
  const ChunkSpec& spec = params.spec();
  if (x.rank() != 2 || x.dim(1) != spec.dim) {
    throw std::invalid_argument("memory_forward: input " + shape_string(x.shape()) + " does not have width " +
                                std::to_string(spec.dim));
  }
  const std::size_t s = x.dim(0), K = spec.chunks, tau = spec.bits, h = params.out_dim();
  const std::size_t B = spec.buckets();
  const T t = params.temperature();

  MemoryForward<T> fw;
  fw.output = Tensor<T>({s, h});
  fw.trace.spec = spec;
  fw.trace.out_dim = h;
  fw.trace.owner = &params;
  fw.trace.input = x;
  fw.trace.indices.resize(s * K);
  fw.trace.weights.resize(s * K);

  const T* tables = params.tables().data();
  for (std::size_t r = 0; r < s; ++r) {
    auto xr = x.row(r);
    T* y = fw.output.data() + r * h;
    for (std::size_t k = 0; k < K; ++k) {
      auto z = xr.subspan(k * tau, tau);
      const std::uint32_t idx = hash_chunk(z);
      const T w = bucket_weight(z, t);
      fw.trace.indices[r * K + k] = idx;
      fw.trace.weights[r * K + k] = w;
      const T* src = tables + (k * B + idx) * h;
      for (std::size_t j = 0; j < h; ++j) y[j] += w * src[j];
    }
  }
  ensure_finite(fw.output, "memory_forward");
  return fw;
}

namespace {

template <typename T>
void check_trace(const Tensor<T>& grad_y, const RetrievalTrace<T>& trace, const HashTableSet<T>& params) {
  if (trace.owner != &params || !(trace.spec == params.spec()) || trace.out_dim != params.out_dim() ||
      trace.indices.size() != trace.tokens() * trace.spec.chunks) {
    throw std::logic_error("memory_backward: trace was not produced by these tables");
  }
  if (grad_y.rank() != 2 || grad_y.dim(0) != trace.tokens() || grad_y.dim(1) != params.out_dim()) {
    throw std::invalid_argument("memory_backward: gradient " + shape_string(grad_y.shape()) +
                                " does not match the traced forward");
  }
}

// Computes dL/dx and hands every (table, row, weight, grad_y row) to `sink`.
template <typename T, typename Sink>
Tensor<T> backward_impl(const Tensor<T>& grad_y, const RetrievalTrace<T>& trace, const HashTableSet<T>& params,
                        Sink&& sink) {
  check_trace(grad_y, trace, params);
  const ChunkSpec& spec = params.spec();
  const std::size_t s = trace.tokens(), K = spec.chunks, tau = spec.bits, h = params.out_dim();
  const std::size_t B = spec.buckets();
  const T t = params.temperature();
  const T* tables = params.tables().data();

  Tensor<T> grad_x({s, spec.dim});
  for (std::size_t r = 0; r < s; ++r) {
    const T* gy = grad_y.data() + r * h;
    auto xr = trace.input.row(r);
    auto gx = grad_x.row(r);
    for (std::size_t k = 0; k < K; ++k) {
      const std::uint32_t idx = trace.indices[r * K + k];
      const T w = trace.weights[r * K + k];
      const T* row = tables + (k * B + idx) * h;
      T dot = 0;
      for (std::size_t j = 0; j < h; ++j) dot += gy[j] * row[j];
      auto gz = gx.subspan(k * tau, tau);
      bucket_weight_grad_into<T>(xr.subspan(k * tau, tau), t, w, gz);
      for (T& v : gz) v *= dot;
      sink(k, idx, w, gy);
    }
  }
  ensure_finite(grad_x, "memory_backward");
  return grad_x;
}

}  // namespace

template <typename T>
MemoryLayerGrads<T> memory_backward(const Tensor<T>& grad_y, const RetrievalTrace<T>& trace,
                                    const HashTableSet<T>& params) {
  const std::size_t K = params.spec().chunks, B = params.spec().buckets(), h = params.out_dim();
  std::vector<std::int64_t> slot(K * B, -1);
  std::vector<TableRowGrad<T>> rows;
  MemoryLayerGrads<T> g;
  g.input = backward_impl(grad_y, trace, params, [&](std::size_t k, std::uint32_t idx, T w, const T* gy) {
    std::int64_t& s = slot[k * B + idx];
    if (s < 0) {
      s = static_cast<std::int64_t>(rows.size());
      rows.push_back({static_cast<std::uint32_t>(k), idx, std::vector<T>(h, T(0))});
    }
    T* dst = rows[static_cast<std::size_t>(s)].grad.data();
    for (std::size_t j = 0; j < h; ++j) dst[j] += w * gy[j];
  });
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.table != b.table ? a.table < b.table : a.row < b.row;
  });
  g.rows = std::move(rows);
  return g;
}

template <typename T>
Tensor<T> memory_backward_dense(const Tensor<T>& grad_y, const RetrievalTrace<T>& trace,
                                const HashTableSet<T>& params, Tensor<T>& dense_grad,
                                std::vector<std::uint8_t>* touched) {
  if (dense_grad.shape() != params.tables().shape()) {
    throw std::invalid_argument("memory_backward_dense: gradient buffer does not match the tables");
  }
  const std::size_t B = params.spec().buckets(), h = params.out_dim();
  if (touched) touched->resize(params.spec().chunks * B, 0);
  T* base = dense_grad.data();
  return backward_impl(grad_y, trace, params, [&](std::size_t k, std::uint32_t idx, T w, const T* gy) {
    T* dst = base + (k * B + idx) * h;
    for (std::size_t j = 0; j < h; ++j) dst[j] += w * gy[j];
    if (touched) (*touched)[k * B + idx] = 1;
  });
}

double expected_squared_weight(std::size_t bits, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  // Simpson's rule for 2 * int_0^L phi(z) q(z)^2 dz with q = 1 / (1 + exp(-2z/t)).
  constexpr int n = 4000;
  constexpr double L = 12.0;
  const double hstep = L / n;
  auto f = [&](double z) {
    const double q = 1.0 / (1.0 + std::exp(-2.0 * z / temperature));
    return std::exp(-0.5 * z * z) * q * q;
  };
  double acc = f(0.0) + f(L);
  for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * f(i * hstep);
  const double m2 = 2.0 * acc * hstep / 3.0 / std::sqrt(2.0 * std::numbers::pi);
  return std::pow(m2, static_cast<double>(bits));
}

double default_table_init_std(const ChunkSpec& spec) {
  spec.validate();
  return kLinearInitStd / std::sqrt(static_cast<double>(spec.chunks));
}

double matched_table_init_std(const ChunkSpec& spec, double temperature) {
  spec.validate();
  // Var(y_j) = K * std^2 * E[p^2] must equal d * kLinearInitStd^2.
  const double ep2 = expected_squared_weight(spec.bits, temperature);
  return kLinearInitStd * std::sqrt(static_cast<double>(spec.dim) / (static_cast<double>(spec.chunks) * ep2));
}

template <typename T>
HashTableSet<T> init_tables(const ChunkSpec& spec, std::size_t out_dim, std::uint64_t seed, double temperature,
                            double std) {
  spec.validate();
  if (std <= 0.0) std = default_table_init_std(spec);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std);
  Tensor<T> tables({spec.chunks, spec.buckets(), out_dim});
  for (T& v : tables.values()) v = static_cast<T>(dist(rng));
  return HashTableSet<T>(spec, out_dim, static_cast<T>(temperature), std::move(tables));
}

void write_tables(std::ostream& os, const HashTableSet<float>& params) {
  io::write_magic(os, "MFHT");
  io::write_u32(os, 1);
  io::write_u32(os, static_cast<std::uint32_t>(params.spec().bits));
  io::write_u32(os, static_cast<std::uint32_t>(params.spec().chunks));
  io::write_u32(os, static_cast<std::uint32_t>(params.out_dim()));
  io::write_f32(os, params.temperature());
  for (float v : params.tables().values()) io::write_f32(os, v);
}

HashTableSet<float> read_tables(std::istream& is) {
  io::expect_magic(is, "MFHT");
  const std::uint32_t version = io::read_u32(is);
  if (version != 1) throw std::runtime_error("hash tables: unsupported version " + std::to_string(version));
  const std::uint32_t tau = io::read_u32(is);
  const std::uint32_t K = io::read_u32(is);
  const std::uint32_t h = io::read_u32(is);
  const float t = io::read_f32(is);
  if (tau == 0 || tau > kMaxBits || K == 0 || h == 0) throw std::runtime_error("hash tables: corrupt header");
  const ChunkSpec spec{static_cast<std::size_t>(tau) * K, K, tau};
  Tensor<float> tables({spec.chunks, spec.buckets(), h});
  for (float& v : tables.values()) v = io::read_f32(is);
  return HashTableSet<float>(spec, h, t, std::move(tables));
}

#define MF_INSTANTIATE_MEMORY(T)                                                                             \
  template class HashTableSet<T>;                                                                            \
  template struct RetrievalTrace<T>;                                                                         \
  template struct MemoryLayerGrads<T>;                                                                       \
  template MemoryForward<T> memory_forward(const Tensor<T>&, const HashTableSet<T>&);                        \
  template MemoryLayerGrads<T> memory_backward(const Tensor<T>&, const RetrievalTrace<T>&,                   \
                                               const HashTableSet<T>&);                                      \
  template Tensor<T> memory_backward_dense(const Tensor<T>&, const RetrievalTrace<T>&, const HashTableSet<T>&, \
                                           Tensor<T>&, std::vector<std::uint8_t>*);                          \
  template HashTableSet<T> init_tables<T>(const ChunkSpec&, std::size_t, std::uint64_t, double, double);

MF_INSTANTIATE_MEMORY(float)
MF_INSTANTIATE_MEMORY(double)

#undef MF_INSTANTIATE_MEMORY

}  // namespace mf
