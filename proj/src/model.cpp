#include "memoryformer/model.h"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace mf {

std::string to_string(Variant v) { return v == Variant::memoryformer ? "memoryformer" : "baseline"; }

Variant parse_variant(const std::string& s) {
  if (s == "memoryformer" || s == "mf") return Variant::memoryformer;
  if (s == "baseline") return Variant::baseline;
  throw std::invalid_argument("unknown variant '" + s + "' (expected memoryformer or baseline)");
}

std::string to_string(ResidualWiring w) { return w == ResidualWiring::prenorm ? "prenorm" : "literal"; }

ResidualWiring parse_residual(const std::string& s) {
  if (s == "prenorm") return ResidualWiring::prenorm;
  if (s == "literal") return ResidualWiring::literal;
  throw std::invalid_argument("unknown residual wiring '" + s + "' (expected prenorm or literal)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (hidden == 0 || heads == 0 || hidden % heads != 0) fail("hidden must be a positive multiple of heads");
  if (vocab == 0 || context == 0) fail("vocab and context must be positive");
  if (!(temperature > 0.0)) fail("temperature must be positive");
  if (variant == Variant::memoryformer) {
    if (tau == 0 || chunks == 0 || tau * chunks != hidden) {
      fail("hidden (" + std::to_string(hidden) + ") must equal tau * chunks (" + std::to_string(tau) + " * " +
           std::to_string(chunks) + ")");
    }
    if (tau + expand_bits > kMaxBits) fail("tau + expand_bits exceeds 24");
  }
}

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor<T> t(std::move(shape));
  for (T& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
void push(std::vector<ParamRef<T>>& out, std::string name, ParamKind kind, DualTensor<T>& p) {
  out.push_back({std::move(name), kind, &p.value, &p.grad, nullptr, nullptr});
}

}  // namespace

// ---- building blocks -------------------------------------------------------

template <typename T>
Tensor<T> LayerNormParams<T>::forward(const Tensor<T>& x, LayerNormCache<T>* cache) const {
  return layer_norm(x, gain.value, bias.value, static_cast<T>(kLayerNormEps), cache);
}

template <typename T>
Tensor<T> LayerNormParams<T>::backward(const Tensor<T>& grad_out, const LayerNormCache<T>& cache) {
  auto g = layer_norm_backward(grad_out, gain.value, cache);
  add_inplace(gain.grad, g.gain);
  add_inplace(bias.grad, g.bias);
  return std::move(g.input);
}

template <typename T>
void LayerNormParams<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  push(out, prefix + ".gain", ParamKind::vector, gain);
  push(out, prefix + ".bias", ParamKind::vector, bias);
}

template <typename T>
Tensor<T> LinearParams<T>::backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  auto g = linear_backward(x, weight.value, grad_out);
  add_inplace(weight.grad, g.weight);
  add_inplace(bias.grad, g.bias);
  return std::move(g.input);
}

template <typename T>
void LinearParams<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  push(out, prefix + ".weight", ParamKind::matrix, weight);
  push(out, prefix + ".bias", ParamKind::vector, bias);
}

template <typename T>
MemoryLayerParams<T>::MemoryLayerParams(HashTableSet<T> t)
    : tables(std::move(t)), grad(tables.tables().shape()), touched(tables.spec().chunks * tables.spec().buckets(), 0) {}

template <typename T>
Tensor<T> MemoryLayerParams<T>::backward(const Tensor<T>& grad_out, const RetrievalTrace<T>& trace) {
  return memory_backward_dense(grad_out, trace, tables, grad, &touched);
}

template <typename T>
void MemoryLayerParams<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  out.push_back({prefix + ".tables", ParamKind::table, &tables.tables(), &grad, &tables, &touched});
}

// ---- memory block -----------------------------------------------------------

template <typename T>
MemoryBlock<T>::MemoryBlock(const ModelConfig& cfg, std::uint64_t seed_a, std::uint64_t seed_b)
    : norm1(cfg.hidden),
      norm2(cfg.expanded_width()),
      layer1(init_tables<T>(cfg.input_spec(), cfg.expanded_width(), seed_a, cfg.temperature, cfg.table_init_std)),
      layer2(init_tables<T>(cfg.expanded_spec(), cfg.hidden, seed_b, cfg.temperature, cfg.table_init_std)),
      gelu(cfg.block_gelu) {}

template <typename T>
Tensor<T> MemoryBlock<T>::forward(const Tensor<T>& x, Cache* cache) const {
  LayerNormCache<T> c1, c2;
  auto first = layer1.forward(norm1.forward(x, &c1));
  const Tensor<T> mid = gelu ? mf::gelu(first.output) : first.output;
  auto second = layer2.forward(norm2.forward(mid, &c2));
  if (cache) {
    cache->norm1 = std::move(c1);
    cache->norm2 = std::move(c2);
    cache->trace1 = std::move(first.trace);
    cache->trace2 = std::move(second.trace);
    cache->hidden = std::move(first.output);
  }
  return std::move(second.output);
}

template <typename T>
Tensor<T> MemoryBlock<T>::backward(const Tensor<T>& grad_out, const Cache& cache) {
  Tensor<T> g = norm2.backward(layer2.backward(grad_out, cache.trace2), cache.norm2);
  if (gelu) g = gelu_backward(cache.hidden, g);
  return norm1.backward(layer1.backward(g, cache.trace1), cache.norm1);
}

template <typename T>
void MemoryBlock<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  norm1.collect(prefix + ".norm1", out);
  layer1.collect(prefix + ".layer1", out);
  norm2.collect(prefix + ".norm2", out);
  layer2.collect(prefix + ".layer2", out);
}

// ---- memoryformer block -----------------------------------------------------

template <typename T>
MemoryFormerBlock<T>::MemoryFormerBlock(const ModelConfig& cfg, std::uint64_t seed) : heads(cfg.heads), residual(cfg.residual) {
  std::mt19937_64 rng(seed);
  const ChunkSpec spec = cfg.input_spec();
  norm = LayerNormParams<T>(cfg.hidden);
  q = MemoryLayerParams<T>(init_tables<T>(spec, cfg.hidden, rng(), cfg.temperature, cfg.table_init_std));
  k = MemoryLayerParams<T>(init_tables<T>(spec, cfg.hidden, rng(), cfg.temperature, cfg.table_init_std));
  v = MemoryLayerParams<T>(init_tables<T>(spec, cfg.hidden, rng(), cfg.temperature, cfg.table_init_std));
  const std::uint64_t a = rng(), b = rng();
  ffn = MemoryBlock<T>(cfg, a, b);
}

template <typename T>
Tensor<T> MemoryFormerBlock<T>::forward(const Tensor<T>& x, std::size_t batch, Cache* cache) const {
  LayerNormCache<T> nc;
  Tensor<T> xn = norm.forward(x, &nc);
  auto fq = q.forward(xn);
  auto fk = k.forward(xn);
  auto fv = v.forward(xn);
  const AttentionShape shape{batch, x.dim(0) / batch, heads, true};
  AttentionCache<T> ac;
  Tensor<T> attended = multi_head_attention(fq.output, fk.output, fv.output, shape, cache ? &ac : nullptr);
  Tensor<T> z = add(residual == ResidualWiring::prenorm ? x : xn, attended);
  typename MemoryBlock<T>::Cache fc;
  Tensor<T> y = ffn.forward(residual == ResidualWiring::prenorm ? z : xn, cache ? &fc : nullptr);
  add_inplace(y, z);
  if (cache) {
    cache->norm = std::move(nc);
    cache->normalized = std::move(xn);
    cache->trace_q = std::move(fq.trace);
    cache->trace_k = std::move(fk.trace);
    cache->trace_v = std::move(fv.trace);
    cache->attention = std::move(ac);
    cache->ffn = std::move(fc);
  }
  return y;
}

template <typename T>
Tensor<T> MemoryFormerBlock<T>::backward(const Tensor<T>& grad_out, std::size_t batch, const Cache& cache) {
  const AttentionShape shape{batch, grad_out.dim(0) / batch, heads, true};
  Tensor<T> grad_ffn_in = ffn.backward(grad_out, cache.ffn);
  Tensor<T> grad_z = grad_out;
  Tensor<T> grad_xn(grad_out.shape());
  Tensor<T> grad_x(grad_out.shape());
  if (residual == ResidualWiring::prenorm) {
    add_inplace(grad_z, grad_ffn_in);
    grad_x = grad_z;
  } else {
    add_inplace(grad_xn, grad_ffn_in);
    add_inplace(grad_xn, grad_z);
  }
  auto ga = multi_head_attention_backward(grad_z, cache.attention, shape);
  add_inplace(grad_xn, q.backward(ga.q, cache.trace_q));
  add_inplace(grad_xn, k.backward(ga.k, cache.trace_k));
  add_inplace(grad_xn, v.backward(ga.v, cache.trace_v));
  add_inplace(grad_x, norm.backward(grad_xn, cache.norm));
  return grad_x;
}

template <typename T>
void MemoryFormerBlock<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  norm.collect(prefix + ".norm", out);
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  ffn.collect(prefix + ".ffn", out);
}

// ---- baseline block ---------------------------------------------------------

template <typename T>
BaselineBlock<T>::BaselineBlock(const ModelConfig& cfg, std::uint64_t seed) : heads(cfg.heads) {
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.hidden, f = 4 * cfg.hidden;
  norm1 = LayerNormParams<T>(d);
  norm2 = LayerNormParams<T>(d);
  q = LinearParams<T>(normal_tensor<T>({d, d}, kLinearInitStd, rng), d);
  k = LinearParams<T>(normal_tensor<T>({d, d}, kLinearInitStd, rng), d);
  v = LinearParams<T>(normal_tensor<T>({d, d}, kLinearInitStd, rng), d);
  o = LinearParams<T>(normal_tensor<T>({d, d}, kLinearInitStd, rng), d);
  fc1 = LinearParams<T>(normal_tensor<T>({d, f}, kLinearInitStd, rng), f);
  fc2 = LinearParams<T>(normal_tensor<T>({f, d}, kLinearInitStd, rng), d);
}

template <typename T>
Tensor<T> BaselineBlock<T>::forward(const Tensor<T>& x, std::size_t batch, Cache* cache) const {
  LayerNormCache<T> c1, c2;
  Tensor<T> xn = norm1.forward(x, &c1);
  const AttentionShape shape{batch, x.dim(0) / batch, heads, true};
  AttentionCache<T> ac;
  Tensor<T> attended =
      multi_head_attention(q.forward(xn), k.forward(xn), v.forward(xn), shape, cache ? &ac : nullptr);
  Tensor<T> z = add(x, o.forward(attended));
  Tensor<T> zn = norm2.forward(z, &c2);
  Tensor<T> hidden = fc1.forward(zn);
  Tensor<T> activated = gelu(hidden);
  Tensor<T> y = add(z, fc2.forward(activated));
  if (cache) {
    cache->norm1 = std::move(c1);
    cache->norm2 = std::move(c2);
    cache->normalized1 = std::move(xn);
    cache->normalized2 = std::move(zn);
    cache->attention = std::move(ac);
    cache->attended = std::move(attended);
    cache->hidden = std::move(hidden);
    cache->activated = std::move(activated);
  }
  return y;
}

template <typename T>
Tensor<T> BaselineBlock<T>::backward(const Tensor<T>& grad_out, std::size_t batch, const Cache& cache) {
  const AttentionShape shape{batch, grad_out.dim(0) / batch, heads, true};
  Tensor<T> g_act = fc2.backward(cache.activated, grad_out);
  Tensor<T> g_hidden = gelu_backward(cache.hidden, g_act);
  Tensor<T> g_zn = fc1.backward(cache.normalized2, g_hidden);
  Tensor<T> grad_z = add(grad_out, norm2.backward(g_zn, cache.norm2));
  Tensor<T> g_att = o.backward(cache.attended, grad_z);
  auto ga = multi_head_attention_backward(g_att, cache.attention, shape);
  Tensor<T> g_xn = q.backward(cache.normalized1, ga.q);
  add_inplace(g_xn, k.backward(cache.normalized1, ga.k));
  add_inplace(g_xn, v.backward(cache.normalized1, ga.v));
  return add(grad_z, norm1.backward(g_xn, cache.norm1));
}

template <typename T>
void BaselineBlock<T>::collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
  norm1.collect(prefix + ".norm1", out);
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
  norm2.collect(prefix + ".norm2", out);
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

// ---- language model ---------------------------------------------------------

template <typename T>
LanguageModel<T>::LanguageModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  token_embedding_ = DualTensor<T>(normal_tensor<T>({cfg.vocab, cfg.hidden}, kEmbeddingInitStd, rng));
  position_embedding_ = DualTensor<T>(normal_tensor<T>({cfg.context, cfg.hidden}, kEmbeddingInitStd, rng));
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::uint64_t block_seed = rng();
    if (cfg.variant == Variant::memoryformer) {
      mf_blocks_.emplace_back(cfg, block_seed);
    } else {
      baseline_blocks_.emplace_back(cfg, block_seed);
    }
  }
  final_norm_ = LayerNormParams<T>(cfg.hidden);
  head_ = DualTensor<T>(normal_tensor<T>({cfg.hidden, cfg.vocab}, kLinearInitStd, rng));
}

template <typename T>
Tensor<T> LanguageModel<T>::forward(std::span<const std::int32_t> tokens, std::size_t batch,
                                    ModelCache<T>* cache) const {
  if (batch == 0 || tokens.empty() || tokens.size() % batch != 0) {
    throw std::invalid_argument("model forward: token count is not a multiple of the batch size");
  }
  const std::size_t seq = tokens.size() / batch, d = cfg_.hidden;
  if (seq > cfg_.context) {
    throw std::invalid_argument("model forward: sequence length " + std::to_string(seq) + " exceeds context " +
                                std::to_string(cfg_.context));
  }
  for (std::int32_t t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) {
      throw std::out_of_range("model forward: token " + std::to_string(t) + " outside the vocabulary");
    }
  }
  Tensor<T> x = embedding_gather(token_embedding_.value, tokens);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const T* pos = position_embedding_.value.data() + (r % seq) * d;
    T* dst = x.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += pos[j];
  }
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->batch = batch;
    cache->seq = seq;
    cache->mf_blocks.assign(mf_blocks_.size(), {});
    cache->baseline_blocks.assign(baseline_blocks_.size(), {});
  }
  for (std::size_t i = 0; i < mf_blocks_.size(); ++i) {
    x = mf_blocks_[i].forward(x, batch, cache ? &cache->mf_blocks[i] : nullptr);
  }
  for (std::size_t i = 0; i < baseline_blocks_.size(); ++i) {
    x = baseline_blocks_[i].forward(x, batch, cache ? &cache->baseline_blocks[i] : nullptr);
  }
  LayerNormCache<T> fc;
  Tensor<T> h = final_norm_.forward(x, &fc);
  Tensor<T> logits = matmul(h, head_.value);
  if (cache) {
    cache->final_norm = std::move(fc);
    cache->final_hidden = std::move(h);
  }
  return logits;
}

template <typename T>
void LanguageModel<T>::backward(const Tensor<T>& grad_logits, const ModelCache<T>& cache) {
  auto hg = matmul_backward(cache.final_hidden, head_.value, grad_logits);
  add_inplace(head_.grad, hg.b);
  Tensor<T> g = final_norm_.backward(hg.a, cache.final_norm);
  for (std::size_t i = baseline_blocks_.size(); i-- > 0;) {
    g = baseline_blocks_[i].backward(g, cache.batch, cache.baseline_blocks[i]);
  }
  for (std::size_t i = mf_blocks_.size(); i-- > 0;) {
    g = mf_blocks_[i].backward(g, cache.batch, cache.mf_blocks[i]);
  }
  embedding_scatter_add(token_embedding_.grad, std::span<const std::int32_t>(cache.tokens), g);
  const std::size_t d = cfg_.hidden;
  for (std::size_t r = 0; r < cache.tokens.size(); ++r) {
    T* dst = position_embedding_.grad.data() + (r % cache.seq) * d;
    const T* src = g.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
  }
}

template <typename T>
double LanguageModel<T>::loss(std::span<const std::int32_t> tokens, std::span<const std::int32_t> targets,
                              std::size_t batch, bool train) {
  ModelCache<T> cache;
  Tensor<T> logits = forward(tokens, batch, train ? &cache : nullptr);
  auto ce = cross_entropy(logits, targets);
  if (train) backward(ce.grad, cache);
  return ce.loss;
}

template <typename T>
std::vector<std::int32_t> LanguageModel<T>::generate(std::span<const std::int32_t> prompt, std::size_t count) const {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  std::vector<std::int32_t> seq(prompt.begin(), prompt.end());
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t len = std::min(seq.size(), cfg_.context);
    const Tensor<T> logits = forward(std::span<const std::int32_t>(seq).last(len), 1);
    const auto last = logits.row(len - 1);
    seq.push_back(static_cast<std::int32_t>(std::max_element(last.begin(), last.end()) - last.begin()));
  }
  return std::vector<std::int32_t>(seq.begin() + prompt.size(), seq.end());
}

template <typename T>
void LanguageModel<T>::zero_grad() {
  for (auto& p : parameters()) {
    p.grad->zero();
    if (p.touched) std::fill(p.touched->begin(), p.touched->end(), 0);
  }
}

template <typename T>
std::vector<ParamRef<T>> LanguageModel<T>::parameters() {
  std::vector<ParamRef<T>> out;
  push(out, "token_embedding", ParamKind::matrix, token_embedding_);
  push(out, "position_embedding", ParamKind::matrix, position_embedding_);
  for (std::size_t i = 0; i < mf_blocks_.size(); ++i) mf_blocks_[i].collect("block" + std::to_string(i), out);
  for (std::size_t i = 0; i < baseline_blocks_.size(); ++i) {
    baseline_blocks_[i].collect("block" + std::to_string(i), out);
  }
  final_norm_.collect("final_norm", out);
  push(out, "head", ParamKind::matrix, head_);
  return out;
}

template <typename T>
std::size_t LanguageModel<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.value->size();
  return n;
}

template <typename T>
std::size_t LanguageModel<T>::table_parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (p.kind == ParamKind::table) n += p.value->size();
  }
  return n;
}

#define MF_INSTANTIATE_MODEL(T)          \
  template struct LayerNormParams<T>;    \
  template struct LinearParams<T>;       \
  template struct MemoryLayerParams<T>;  \
  template struct MemoryBlock<T>;        \
  template struct MemoryFormerBlock<T>;  \
  template struct BaselineBlock<T>;      \
  template class LanguageModel<T>;

MF_INSTANTIATE_MODEL(float)
MF_INSTANTIATE_MODEL(double)

#undef MF_INSTANTIATE_MODEL

}  // namespace mf
