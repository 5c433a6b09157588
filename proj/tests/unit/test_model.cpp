#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "finite_diff.h"
#include "memoryformer/model.h"

using namespace mf;
using mf::testing::normal_tensor;
using mf::testing::piecewise_gradient_error;
using mf::testing::uniform_tensor;
using mf::testing::weighted_sum;

namespace {

using Signature = std::vector<std::uint32_t>;

// Gradients below this magnitude are compared absolutely.
constexpr double kGradFloor = 1e-6;
constexpr double kGradTol = 1e-3;

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.tau = 4;
  cfg.chunks = 4;
  cfg.vocab = 11;
  cfg.context = 8;
  cfg.table_init_std = 0.5;
  return cfg;
}

void append(Signature& sig, const RetrievalTrace<double>& t) { sig.insert(sig.end(), t.indices.begin(), t.indices.end()); }

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

Signature signature(const ModelCache<double>& c) {
  Signature s;
  for (const auto& b : c.mf_blocks) {
    const auto bs = signature(b);
    s.insert(s.end(), bs.begin(), bs.end());
  }
  return s;
}

template <typename Refs>
void zero_grads(Refs& refs) {
  for (auto& r : refs) r.grad->zero();
}

// Checks dL/dX and every parameter of a block-like object whose forward takes
// (x, cache) and whose backward returns dL/dX.
template <typename Block, typename Forward, typename Backward>
void check_block_gradients(Block& block, Tensor<double> x, std::mt19937_64& rng, Forward fwd, Backward bwd) {
  std::vector<ParamRef<double>> refs;
  block.collect("b", refs);
  zero_grads(refs);
  typename Block::Cache cache;
  const Tensor<double> y = fwd(x, &cache);
  const Tensor<double> w = normal_tensor(y.shape(), rng);
  const Tensor<double> gx = bwd(w, cache);
  std::function<std::pair<double, Signature>()> eval = [&] {
    typename Block::Cache c;
    const Tensor<double> out = fwd(x, &c);
    return std::make_pair(weighted_sum(out, w), signature(c));
  };
  auto r = piecewise_gradient_error(x, gx, eval, kGradFloor);
  EXPECT_LT(r.worst, kGradTol) << "input";
  EXPECT_GT(r.checked, r.skipped) << "input";
  for (auto& p : refs) {
    auto rp = piecewise_gradient_error(*p.value, *p.grad, eval, kGradFloor);
    EXPECT_LT(rp.worst, kGradTol) << p.name;
    EXPECT_GT(rp.checked, rp.skipped) << p.name;
  }
}

template <typename Block>
void zero_tables(Block& block) {
  std::vector<ParamRef<double>> refs;
  block.collect("b", refs);
  for (auto& r : refs)
    if (r.kind == ParamKind::table) r.value->zero();
}

// Independent attention: explicit loops over heads, queries and keys.
Tensor<double> naive_attention(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v,
                               std::size_t heads, bool causal) {
  const std::size_t s = q.rows(), d = q.cols(), hd = d / heads;
  Tensor<double> out({s, d});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<double> score(s, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s; ++j) {
        if (causal && j > i) continue;
        double dot = 0;
        for (std::size_t c = 0; c < hd; ++c) dot += q.at(i, h * hd + c) * k.at(j, h * hd + c);
        score[j] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, score[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < s; ++j) z += std::exp(score[j] - mx);
      for (std::size_t j = 0; j < s; ++j) {
        const double p = std::exp(score[j] - mx) / z;
        for (std::size_t c = 0; c < hd; ++c) out.at(i, h * hd + c) += p * v.at(j, h * hd + c);
      }
    }
  }
  return out;
}

std::vector<std::int32_t> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<std::int32_t> dist(0, static_cast<std::int32_t>(vocab) - 1);
  std::vector<std::int32_t> t(n);
  for (auto& v : t) v = dist(rng);
  return t;
}

}  // namespace

TEST(ModelConfig, ExpandedWidth) {
  ModelConfig cfg;
  cfg.hidden = 512;
  cfg.tau = 8;
  cfg.chunks = 64;
  cfg.expand_bits = 2;
  cfg.validate();
  EXPECT_EQ(cfg.expanded_width(), 640u);
  EXPECT_EQ(cfg.expanded_spec().bits, 10u);
  EXPECT_EQ(cfg.expanded_spec().chunks, 64u);
  EXPECT_EQ(cfg.expanded_spec().buckets(), 1024u);
}

TEST(ModelConfig, Validation) {
  ModelConfig cfg = small_config();
  cfg.tau = 5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.temperature = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.variant = Variant::baseline;
  cfg.tau = 5;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(parse_variant("baseline"), Variant::baseline);
  EXPECT_THROW(parse_variant("mlp"), std::invalid_argument);
  EXPECT_EQ(parse_residual(to_string(ResidualWiring::literal)), ResidualWiring::literal);
}

TEST(MemoryBlock, ZeroTablesGiveZeroOutput) {
  std::mt19937_64 rng(1);
  MemoryBlock<double> block(small_config(), 1, 2);
  zero_tables(block);
  const auto y = block.forward(normal_tensor({5, 16}, rng));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(MemoryBlock, ShapesAndParameterCount) {
  const ModelConfig cfg = small_config();
  MemoryBlock<float> block(cfg, 1, 2);
  EXPECT_EQ(block.layer1.tables.out_dim(), 24u);
  EXPECT_EQ(block.layer2.tables.spec().bits, 6u);
  EXPECT_EQ(block.layer2.tables.out_dim(), 16u);
  const std::size_t K = 4, tau = 4, e = 2, d = 16;
  EXPECT_EQ(block.table_parameter_count(), K * (1u << tau) * (tau + e) * K + K * (1u << (tau + e)) * d);
}

TEST(MemoryBlock, GradientMatchesFiniteDifferences) {
  for (bool gelu : {false, true}) {
    ModelConfig cfg = small_config();
    cfg.block_gelu = gelu;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::mt19937_64 rng(seed);
      MemoryBlock<double> block(cfg, seed + 10, seed + 20);
      check_block_gradients(
          block, normal_tensor({3, 16}, rng), rng,
          [&](const Tensor<double>& x, MemoryBlock<double>::Cache* c) { return block.forward(x, c); },
          [&](const Tensor<double>& g, const MemoryBlock<double>::Cache& c) { return block.backward(g, c); });
    }
  }
}

TEST(MemoryBlock, FiniteOnBoundedInputs) {
  ModelConfig cfg = small_config();
  std::mt19937_64 rng(2);
  const Tensor<double> x = uniform_tensor({6, 16}, rng, -3.0, 3.0);
  for (std::uint64_t draw = 0; draw < 1000; ++draw) {
    cfg.table_init_std = std::uniform_real_distribution<double>(0.01, 10.0)(rng);
    MemoryBlock<double> block(cfg, 2 * draw, 2 * draw + 1);
    ASSERT_TRUE(all_finite<double>(block.forward(x).values())) << "draw " << draw;
  }
}

TEST(Attention, SingleTokenReturnsValue) {
  std::mt19937_64 rng(3);
  const auto q = normal_tensor({1, 8}, rng), k = normal_tensor({1, 8}, rng), v = normal_tensor({1, 8}, rng);
  const auto out = multi_head_attention(q, k, v, {1, 1, 2, true});
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out[i], v[i], 1e-15);
}

TEST(Attention, ZeroValuesGiveZero) {
  std::mt19937_64 rng(4);
  const auto q = normal_tensor({4, 8}, rng), k = normal_tensor({4, 8}, rng);
  const auto out = multi_head_attention(q, k, Tensor<double>({4, 8}), {1, 4, 2, true});
  for (double x : out.values()) EXPECT_EQ(x, 0.0);
}

TEST(Attention, MatchesNaiveLoops) {
  std::mt19937_64 rng(5);
  for (bool causal : {true, false}) {
    const auto q = normal_tensor({4, 8}, rng), k = normal_tensor({4, 8}, rng), v = normal_tensor({4, 8}, rng);
    const auto out = multi_head_attention(q, k, v, {1, 4, 2, causal});
    const auto ref = naive_attention(q, k, v, 2, causal);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-6);
  }
}

TEST(Attention, BatchedSequencesAreIndependent) {
  std::mt19937_64 rng(6);
  const auto q = normal_tensor({6, 8}, rng), k = normal_tensor({6, 8}, rng), v = normal_tensor({6, 8}, rng);
  const auto both = multi_head_attention(q, k, v, {2, 3, 2, true});
  for (std::size_t b = 0; b < 2; ++b) {
    auto slice = [&](const Tensor<double>& t) {
      return Tensor<double>({3, 8}, std::vector<double>(t.data() + b * 24, t.data() + (b + 1) * 24));
    };
    const auto ref = naive_attention(slice(q), slice(k), slice(v), 2, true);
    for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(both[b * 24 + i], ref[i], 1e-12);
  }
}

TEST(Attention, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto q = normal_tensor({5, 8}, rng), k = normal_tensor({5, 8}, rng), v = normal_tensor({5, 8}, rng);
  const AttentionShape shape{1, 5, 2, true};
  AttentionCache<double> cache;
  const auto out = multi_head_attention(q, k, v, shape, &cache);
  const auto w = normal_tensor(out.shape(), rng);
  const auto g = multi_head_attention_backward(w, cache, shape);
  auto loss = [&] { return weighted_sum(multi_head_attention(q, k, v, shape), w); };
  EXPECT_LT(mf::testing::worst_gradient_error(q, g.q, loss), 1e-6);
  EXPECT_LT(mf::testing::worst_gradient_error(k, g.k, loss), 1e-6);
  EXPECT_LT(mf::testing::worst_gradient_error(v, g.v, loss), 1e-6);
}

TEST(Attention, ShapeErrors) {
  EXPECT_THROW(multi_head_attention(Tensor<double>({4, 9}), Tensor<double>({4, 9}), Tensor<double>({4, 9}),
                                    {1, 4, 2, true}),
               std::invalid_argument);
  EXPECT_THROW(multi_head_attention(Tensor<double>({4, 8}), Tensor<double>({3, 8}), Tensor<double>({4, 8}),
                                    {1, 4, 2, true}),
               std::invalid_argument);
}

TEST(MemoryFormerBlock, IdentityWhenTablesAreZero) {
  std::mt19937_64 rng(8);
  MemoryFormerBlock<double> block(small_config(), 3);
  zero_tables(block);
  const auto x = normal_tensor({5, 16}, rng);
  EXPECT_EQ(block.forward(x, 1), x);
}

TEST(MemoryFormerBlock, LiteralWiringWithZeroTablesReturnsNormalizedInput) {
  ModelConfig cfg = small_config();
  cfg.residual = ResidualWiring::literal;
  std::mt19937_64 rng(9);
  MemoryFormerBlock<double> block(cfg, 3);
  zero_tables(block);
  const auto x = normal_tensor({5, 16}, rng);
  const auto y = block.forward(x, 1);
  const auto xn = block.norm.forward(x, nullptr);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_EQ(y[i], xn[i]);
}

TEST(MemoryFormerBlock, OutputShapeMatchesInput) {
  std::mt19937_64 rng(10);
  MemoryFormerBlock<float> block(small_config(), 4);
  EXPECT_EQ(block.forward(normal_tensor<float>({12, 16}, rng), 3).shape(), (Shape{12, 16}));
  EXPECT_THROW(block.forward(normal_tensor<float>({12, 8}, rng), 3), std::invalid_argument);
}

TEST(MemoryFormerBlock, GradientMatchesFiniteDifferences) {
  for (ResidualWiring wiring : {ResidualWiring::prenorm, ResidualWiring::literal}) {
    ModelConfig cfg = small_config();
    cfg.residual = wiring;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::mt19937_64 rng(100 + seed);
      MemoryFormerBlock<double> block(cfg, seed);
      check_block_gradients(
          block, normal_tensor({3, 16}, rng), rng,
          [&](const Tensor<double>& x, MemoryFormerBlock<double>::Cache* c) { return block.forward(x, 1, c); },
          [&](const Tensor<double>& g, const MemoryFormerBlock<double>::Cache& c) { return block.backward(g, 1, c); });
    }
  }
}

TEST(BaselineBlock, IdentityWhenWeightsAreZero) {
  ModelConfig cfg = small_config();
  cfg.variant = Variant::baseline;
  std::mt19937_64 rng(11);
  BaselineBlock<double> block(cfg, 5);
  std::vector<ParamRef<double>> refs;
  block.collect("b", refs);
  for (auto& r : refs)
    if (r.kind == ParamKind::matrix) r.value->zero();
  const auto x = normal_tensor({4, 16}, rng);
  EXPECT_EQ(block.forward(x, 1), x);
  EXPECT_EQ(block.fc1.weight.value.shape(), (Shape{16, 64}));
}

TEST(BaselineBlock, GradientMatchesFiniteDifferences) {
  ModelConfig cfg = small_config();
  cfg.variant = Variant::baseline;
  std::mt19937_64 rng(12);
  BaselineBlock<double> block(cfg, 6);
  std::vector<ParamRef<double>> refs;
  block.collect("b", refs);
  for (auto& r : refs)  // lift weights off the tiny init so every path matters
    for (auto& v : r.value->values()) v += 0.3 * std::normal_distribution<double>()(rng);
  auto x = normal_tensor({3, 16}, rng);
  zero_grads(refs);
  BaselineBlock<double>::Cache cache;
  const auto y = block.forward(x, 1, &cache);
  const auto w = normal_tensor(y.shape(), rng);
  const auto gx = block.backward(w, 1, cache);
  auto loss = [&] { return weighted_sum(block.forward(x, 1), w); };
  auto err = [&](Tensor<double>& v, const Tensor<double>& g) {
    double worst = 0;
    for (std::size_t i = 0; i < v.size(); ++i)
      worst = std::max(worst, mf::testing::relative_error(g[i], mf::testing::numeric_partial(v, i, loss), kGradFloor));
    return worst;
  };
  EXPECT_LT(err(x, gx), kGradTol);
  for (auto& r : refs) EXPECT_LT(err(*r.value, *r.grad), kGradTol) << r.name;
}

TEST(LanguageModel, LogitsShapeAndErrors) {
  const ModelConfig cfg = small_config();
  LanguageModel<float> model(cfg, 1);
  const std::vector<std::int32_t> tokens{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(model.forward(tokens, 2).shape(), (Shape{6, 11}));
  const std::vector<std::int32_t> bad{1, 11};
  EXPECT_THROW(model.forward(bad, 1), std::out_of_range);
  const std::vector<std::int32_t> overlong(9, 1);
  EXPECT_THROW(model.forward(overlong, 1), std::invalid_argument);
}

TEST(LanguageModel, CausalityByExhaustivePerturbation) {
  for (Variant variant : {Variant::memoryformer, Variant::baseline}) {
    ModelConfig cfg = small_config();
    cfg.variant = variant;
    cfg.context = 16;
    LanguageModel<float> model(cfg, 2);
    std::mt19937_64 rng(13);
    const auto tokens = random_tokens(rng, 16, cfg.vocab);
    const auto base = model.forward(tokens, 1);
    for (std::size_t j = 0; j < 16; ++j) {
      auto changed = tokens;
      changed[j] = (changed[j] + 1 + static_cast<std::int32_t>(j) % 5) % static_cast<std::int32_t>(cfg.vocab);
      const auto out = model.forward(changed, 1);
      for (std::size_t i = 0; i < j * cfg.vocab; ++i) ASSERT_EQ(out[i], base[i]) << "position " << j;
    }
  }
}

TEST(LanguageModel, UntrainedLossIsNearLogVocab) {
  ModelConfig cfg = small_config();
  cfg.vocab = 256;
  cfg.context = 32;
  cfg.table_init_std = 0.0;
  for (Variant variant : {Variant::memoryformer, Variant::baseline}) {
    cfg.variant = variant;
    LanguageModel<float> model(cfg, 3);
    std::mt19937_64 rng(14);
    const auto tokens = random_tokens(rng, 4 * 32, 256), targets = random_tokens(rng, 4 * 32, 256);
    const double loss = model.loss(tokens, targets, 4, false);
    EXPECT_NEAR(loss, std::log(256.0), 0.05 * std::log(256.0));
  }
}

TEST(LanguageModel, GradientMatchesFiniteDifferences) {
  ModelConfig cfg = small_config();
  cfg.hidden = 8;
  cfg.chunks = 2;
  cfg.context = 5;
  LanguageModel<double> model(cfg, 4);
  std::mt19937_64 rng(15);
  const auto tokens = random_tokens(rng, 8, cfg.vocab), targets = random_tokens(rng, 8, cfg.vocab);
  model.zero_grad();
  model.loss(tokens, targets, 2, true);
  std::function<std::pair<double, Signature>()> eval = [&] {
    ModelCache<double> cache;
    const auto logits = model.forward(tokens, 2, &cache);
    return std::make_pair(cross_entropy(logits, std::span<const std::int32_t>(targets)).loss, signature(cache));
  };
  for (auto& p : model.parameters()) {
    auto r = piecewise_gradient_error(*p.value, *p.grad, eval, kGradFloor);
    EXPECT_LT(r.worst, kGradTol) << p.name;
    EXPECT_GT(r.checked, r.skipped) << p.name;
  }
}

TEST(LanguageModel, ParameterCountAudit) {
  const ModelConfig cfg = small_config();
  LanguageModel<float> model(cfg, 5);
  const std::size_t K = 4, tau = 4, e = 2, d = 16;
  const std::size_t per_layer = K * (1u << tau) * d;
  const std::size_t per_block = K * (1u << tau) * (tau + e) * K + K * (1u << (tau + e)) * d;
  EXPECT_EQ(model.table_parameter_count(), 3 * per_layer + per_block);
  const std::size_t norms = 2 * d + 2 * d + 2 * (tau + e) * K + 2 * d;  // block norm, ffn norms, final norm
  EXPECT_EQ(model.parameter_count(), model.table_parameter_count() + norms + (11 + 8) * d + d * 11);
  for (auto& p : model.parameters())
    if (p.kind == ParamKind::table) EXPECT_EQ(p.value->size(), p.tables->spec().chunks * p.tables->spec().buckets() * p.tables->out_dim());
}

TEST(LanguageModel, CopyParametersAcrossPrecisions) {
  const ModelConfig cfg = small_config();
  LanguageModel<float> a(cfg, 6);
  LanguageModel<double> b(cfg, 7);
  b.copy_parameters_from(a);
  const std::vector<std::int32_t> tokens{1, 5, 2, 7};
  const auto la = a.forward(tokens, 1);
  const auto lb = b.forward(tokens, 1);
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_NEAR(la[i], lb[i], 1e-4);
}

TEST(LanguageModel, GreedyGenerationIsDeterministic) {
  LanguageModel<float> model(small_config(), 8);
  const std::vector<std::int32_t> prompt{1, 2, 3};
  const auto a = model.generate(prompt, 12);
  EXPECT_EQ(a.size(), 12u);
  EXPECT_EQ(a, model.generate(prompt, 12));
  for (auto t : a) EXPECT_LT(t, 11);
}
