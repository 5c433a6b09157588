#include "memoryformer/gradcheck.h"

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include "memoryformer/model.h"

namespace mf {

GradcheckScope parse_gradcheck_scope(const std::string& s) {
  if (s == "lsh") return GradcheckScope::lsh;
  if (s == "memory-layer") return GradcheckScope::memory_layer;
  if (s == "block") return GradcheckScope::block;
  if (s == "model") return GradcheckScope::model;
  throw std::invalid_argument("unknown gradcheck scope '" + s + "' (lsh, memory-layer, block, model)");
}

std::string to_string(GradcheckScope s) {
  switch (s) {
    case GradcheckScope::lsh: return "lsh";
    case GradcheckScope::memory_layer: return "memory-layer";
    case GradcheckScope::block: return "block";
    case GradcheckScope::model: return "model";
  }
  return "?";
}

double gradcheck_tolerance(GradcheckScope s) {
  return (s == GradcheckScope::lsh || s == GradcheckScope::memory_layer) ? 1e-4 : 1e-3;
}

namespace {

constexpr double kStep = 1e-5;
using Signature = std::vector<std::uint32_t>;
using Eval = std::function<std::pair<double, Signature>()>;

struct FaultGuard {
  explicit FaultGuard(bool on) { fault::set_flip_weight_gradient(on); }
  ~FaultGuard() { fault::set_flip_weight_gradient(false); }
};

class Checker {
 public:
  Checker(GradcheckResult& r, double floor) : r_(r), floor_(floor) {}

  void compare(const std::string& where, Tensor<double>& x, const Tensor<double>& analytic, const Eval& eval) {
    const Signature base = eval().second;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + kStep;
      const auto up = eval();
      x[i] = saved - kStep;
      const auto down = eval();
      x[i] = saved;
      if (up.second != base || down.second != base) {
        ++r_.skipped;
        continue;
      }
      ++r_.checked;
      const double numeric = (up.first - down.first) / (2 * kStep);
      const double err = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), floor_});
      if (err > r_.worst || !std::isfinite(err)) {
        r_.worst = std::isfinite(err) ? err : INFINITY;
        r_.worst_at = where + "[" + std::to_string(i) + "]";
      }
    }
  }

 private:
  GradcheckResult& r_;
  double floor_;
};

Tensor<double> normal(Shape shape, std::mt19937_64& rng, double std = 1.0) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

double contract(const Tensor<double>& y, const Tensor<double>& w) {
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

void append(Signature& s, const RetrievalTrace<double>& t) { s.insert(s.end(), t.indices.begin(), t.indices.end()); }

Signature signature(const MemoryBlock<double>::Cache& c) {
  Signature s;
  append(s, c.trace1);
  append(s, c.trace2);
  return s;
}

Signature signature(const MemoryFormerBlock<double>::Cache& c) {
  Signature s = signature(c.ffn);
  append(s, c.trace_q);
  append(s, c.trace_k);
  append(s, c.trace_v);
  return s;
}

Signature signature(const BaselineBlock<double>::Cache&) { return {}; }

Signature signature(const ModelCache<double>& c) {
  Signature s;
  for (const auto& b : c.mf_blocks) {
    const auto bs = signature(b);
    s.insert(s.end(), bs.begin(), bs.end());
  }
  return s;
}

ModelConfig block_config(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.tau = 4;
  cfg.chunks = 4;
  cfg.vocab = 11;
  cfg.context = 8;
  cfg.table_init_std = 0.5;
  cfg.block_gelu = seed % 2 == 1;
  cfg.residual = seed % 4 == 3 ? ResidualWiring::literal : ResidualWiring::prenorm;
  return cfg;
}

void lsh_case(Checker& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.05, 2.0), temp(0.3, 3.0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t tau = 1; tau <= 10; ++tau) {
    Tensor<double> z({tau});
    for (auto& v : z.values()) v = coin(rng) ? mag(rng) : -mag(rng);
    const double t = temp(rng);
    const Tensor<double> g({tau}, bucket_weight_grad<double>(z.values(), t));
    c.compare("dp/dz tau=" + std::to_string(tau), z, g, [&] {
      return std::make_pair(bucket_weight<double>(z.values(), t), Signature{hash_chunk<double>(z.values())});
    });
  }
}

void memory_layer_case(Checker& c, std::mt19937_64& rng, std::uint64_t seed) {
  auto params = init_tables<double>(ChunkSpec::from_bits(8, 4), 5, seed, 1.0, 0.5);
  Tensor<double> x = normal({3, 8}, rng);
  const auto fw = memory_forward(x, params);
  const auto g = memory_backward(fw.output, fw.trace, params);
  Tensor<double> dense(params.tables().shape());
  g.accumulate_into(dense);
  const Eval eval = [&] {
    const auto f = memory_forward(x, params);
    double l = 0;
    for (double v : f.output.values()) l += 0.5 * v * v;
    return std::make_pair(l, f.trace.indices);
  };
  c.compare("memory_layer.input", x, g.input, eval);
  c.compare("memory_layer.tables", params.tables(), dense, eval);
}

template <typename Block, typename Fwd, typename Bwd>
void block_case(Checker& c, Block& block, Tensor<double> x, std::mt19937_64& rng, const std::string& name, Fwd fwd,
                Bwd bwd) {
  std::vector<ParamRef<double>> refs;
  block.collect(name, refs);
  for (auto& r : refs) r.grad->zero();
  typename Block::Cache cache;
  const Tensor<double> y = fwd(x, &cache);
  const Tensor<double> w = normal(y.shape(), rng);
  const Tensor<double> gx = bwd(w, cache);
  const Eval eval = [&] {
    typename Block::Cache cc;
    const Tensor<double> out = fwd(x, &cc);
    return std::make_pair(contract(out, w), signature(cc));
  };
  c.compare(name + ".input", x, gx, eval);
  for (auto& r : refs) c.compare(r.name, *r.value, *r.grad, eval);
}

void block_scope(Checker& c, std::mt19937_64& rng, std::uint64_t seed) {
  const ModelConfig cfg = block_config(seed);
  MemoryFormerBlock<double> block(cfg, seed);
  block_case(
      c, block, normal({3, 16}, rng), rng, "memoryformer_block",
      [&](const Tensor<double>& x, MemoryFormerBlock<double>::Cache* k) { return block.forward(x, 1, k); },
      [&](const Tensor<double>& g, const MemoryFormerBlock<double>::Cache& k) { return block.backward(g, 1, k); });
  if (seed % 4 == 0) {
    ModelConfig bcfg = cfg;
    bcfg.variant = Variant::baseline;
    BaselineBlock<double> base(bcfg, seed);
    std::vector<ParamRef<double>> refs;
    base.collect("baseline_block", refs);
    for (auto& r : refs)
      for (auto& v : r.value->values()) v += 0.3 * std::normal_distribution<double>()(rng);
    block_case(
        c, base, normal({3, 16}, rng), rng, "baseline_block",
        [&](const Tensor<double>& x, BaselineBlock<double>::Cache* k) { return base.forward(x, 1, k); },
        [&](const Tensor<double>& g, const BaselineBlock<double>::Cache& k) { return base.backward(g, 1, k); });
  }
}

void model_scope(Checker& c, std::mt19937_64& rng, std::uint64_t seed) {
  ModelConfig cfg = block_config(seed);
  cfg.hidden = 8;
  cfg.chunks = 2;
  cfg.context = 5;
  if (seed % 5 == 4) cfg.variant = Variant::baseline;
  LanguageModel<double> model(cfg, seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(cfg.vocab) - 1);
  std::vector<std::int32_t> tokens(8), targets(8);
  for (auto& t : tokens) t = tok(rng);
  for (auto& t : targets) t = tok(rng);
  model.zero_grad();
  model.loss(tokens, targets, 2, true);
  const Eval eval = [&] {
    ModelCache<double> cache;
    const auto logits = model.forward(tokens, 2, &cache);
    return std::make_pair(cross_entropy(logits, std::span<const std::int32_t>(targets)).loss, signature(cache));
  };
  for (auto& p : model.parameters()) c.compare(p.name, *p.value, *p.grad, eval);
}

}  // namespace

GradcheckResult run_gradcheck(GradcheckScope scope, const GradcheckOptions& options) {
  FaultGuard guard(options.inject_bug);
  GradcheckResult r;
  r.scope = scope;
  r.tolerance = gradcheck_tolerance(scope);
  r.seeds = options.seeds;
  // Gradients smaller than the floor are compared absolutely.
  Checker checker(r, scope == GradcheckScope::lsh || scope == GradcheckScope::memory_layer ? 1e-10 : 1e-6);
  for (std::size_t i = 0; i < options.seeds; ++i) {
    const std::uint64_t seed = options.seed * 1000003ULL + i;
    std::mt19937_64 rng(seed);
    switch (scope) {
      case GradcheckScope::lsh: lsh_case(checker, rng); break;
      case GradcheckScope::memory_layer: memory_layer_case(checker, rng, seed); break;
      case GradcheckScope::block: block_scope(checker, rng, seed); break;
      case GradcheckScope::model: model_scope(checker, rng, seed); break;
    }
  }
  return r;
}

}  // namespace mf
