#include "lifeiqa/decoder.hpp"
#include "lifeiqa/errors.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace lifeiqa;

namespace {

void set_identity(Linear& l) {
  l.weight.value = Tensor::identity(l.in_features());
  l.bias.value.fill(0.0);
}

void zero(Linear& l) {
  l.weight.value.fill(0.0);
  l.bias.value.fill(0.0);
}

DecoderConfig small_config() {
  DecoderConfig c;
  c.num_layers = 2;
  c.num_queries = 4;
  c.embed_dim = 8;
  c.num_heads = 2;
  c.ffn_hidden = 12;
  c.grid_side = 3;
  return c;
}

StageFeatures random_features(std::mt19937_64& rng, std::size_t side3 = 7, std::size_t side4 = 3) {
  return {test::random_tensor({side3, side3, 5}, rng), test::random_tensor({side4, side4, 6}, rng)};
}

// ---- init_queries ----------------------------------------------------------

TEST(InitQueries, ZeroStage4AddsOnlyBias) {
  std::mt19937_64 rng(1);
  Linear p4("p4", 6, 8, rng);
  const Tensor q = test::random_tensor({4, 8}, rng);
  EXPECT_EQ(init_queries(Tensor({3, 3, 6}), q, p4), q);
  p4.bias.value.fill(0.5);
  const Tensor out = init_queries(Tensor({3, 3, 6}), q, p4);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_DOUBLE_EQ(out[i], q[i] + 0.5);
}

TEST(InitQueries, ZeroQueriesConstantMapGivesIdenticalRows) {
  std::mt19937_64 rng(2);
  Linear p4("p4", 6, 8, rng);
  const Tensor out = init_queries(Tensor({2, 2, 6}, 0.7), Tensor({5, 8}), p4);
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out(r, c), out(0, c));
}

TEST(InitQueries, RowOffsetEqualsConvThenPoolContext) {
  std::mt19937_64 rng(3);
  Linear p4("p4", 6, 8, rng);
  p4.bias.value = test::random_tensor({8}, rng);
  const Tensor stage4 = test::random_tensor({3, 4, 6}, rng);
  const Tensor q = test::random_tensor({5, 8}, rng);
  // Oracle: project every position (1×1 conv) first, then average.
  std::vector<double> v_global(8, 0.0);
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t d = 0; d < 8; ++d) {
        double s = p4.bias.value[d];
        for (std::size_t c = 0; c < 6; ++c) s += stage4.at(y, x, c) * p4.weight.value(c, d);
        v_global[d] += s / 12.0;
      }
  const Tensor out = init_queries(stage4, q, p4);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(out(r, d) - q(r, d), v_global[d], 1e-12);
}

TEST(InitQueries, UnitSlopeInQueryInit) {
  std::mt19937_64 rng(4);
  Linear p4("p4", 6, 8, rng);
  const Tensor stage4 = test::random_tensor({2, 2, 6}, rng);
  // Integer-valued queries and offsets keep the additions exact.
  Tensor q({3, 8}), delta({3, 8});
  std::uniform_int_distribution<int> ints(-8, 8);
  for (double& v : q.values()) v = ints(rng);
  for (double& v : delta.values()) v = ints(rng);
  const Tensor diff = init_queries(stage4, q + delta, p4) - init_queries(stage4, q, p4);
  EXPECT_LT(max_abs_diff(diff, delta), 1e-13);
}

TEST(InitQueries, ChannelMismatchIsDimensionError) {
  std::mt19937_64 rng(5);
  Linear p4("p4", 6, 8, rng);
  EXPECT_THROW(init_queries(Tensor({2, 2, 5}), Tensor({3, 8}), p4), DimensionError);
}

// ---- gcn_refine ------------------------------------------------------------

TEST(GcnRefine, IdentityPropagationOnNonnegativeInput) {
  std::mt19937_64 rng(6);
  GcnBlock block("gcn", 3, 4, rng);
  for (int i = 0; i < 3; ++i) {
    block.adjacency[i].value = Tensor::identity(3);
    block.weight[i].value = Tensor::identity(4);
  }
  Tensor q = test::random_tensor({3, 4}, rng);
  for (double& v : q.values()) v = std::abs(v);
  EXPECT_EQ(gcn_refine(q, block), q);
}

TEST(GcnRefine, ZeroAdjacencyGivesZero) {
  std::mt19937_64 rng(7);
  GcnBlock block("gcn", 3, 4, rng);
  for (auto& a : block.adjacency) a.value.fill(0.0);
  EXPECT_EQ(gcn_refine(test::random_tensor({3, 4}, rng), block), Tensor({3, 4}));
}

TEST(GcnRefine, MatchesMatrixChainOracle) {
  std::mt19937_64 rng(8);
  GcnBlock block("gcn", 3, 5, rng);
  for (auto& a : block.adjacency) a.value = test::random_tensor({3, 3}, rng);
  const Tensor q = test::random_tensor({3, 5}, rng);
  auto layer = [&](const Tensor& x, int i) {
    return test::naive_matmul(test::naive_matmul(block.adjacency[i].value, x), block.weight[i].value);
  };
  const Tensor h1 = test::naive_relu(layer(q, 0));
  const Tensor h2 = test::naive_relu(layer(h1, 1));
  const Tensor expected = layer(h2, 2);  // no activation on the last round
  EXPECT_LT(max_abs_diff(gcn_refine(q, block), expected), 1e-12);
}

TEST(GcnRefine, AdjacencyInitIsNearIdentity) {
  std::mt19937_64 rng(9);
  GcnBlock block("gcn", 6, 4, rng);
  for (const auto& a : block.adjacency) EXPECT_LT(max_abs_diff(a.value, Tensor::identity(6)), 0.06);
}

// ---- partition_pool --------------------------------------------------------

TEST(PartitionPool, ConstantFieldProjectsToP3OfValue) {
  std::mt19937_64 rng(10);
  Linear p3("p3", 2, 3, rng);
  const Tensor out = partition_pool(Tensor({5, 7, 2}, 1.25), 3, p3);
  const Tensor expected = p3.forward(Tensor({1, 2}, 1.25));
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out(r, c), expected(0, c), 1e-14);
}

TEST(PartitionPool, FourCellAverages) {
  std::vector<double> v(16);
  std::iota(v.begin(), v.end(), 1.0);
  std::mt19937_64 rng(11);
  Linear p3("p3", 1, 1, rng);
  set_identity(p3);
  const Tensor out = partition_pool(Tensor({4, 4, 1}, v), 2, p3);
  EXPECT_EQ(out, Tensor({4, 1}, {3.5, 5.5, 11.5, 13.5}));
}

TEST(PartitionPool, UnitGridIsGlobalPooling) {
  std::mt19937_64 rng(12);
  Linear p3("p3", 4, 3, rng);
  const Tensor s3 = test::random_tensor({5, 6, 4}, rng);
  const Tensor gap = global_average_pool(s3);
  EXPECT_LT(max_abs_diff(partition_pool(s3, 1, p3), p3.forward(gap.reshaped({1, 4}))), 1e-14);
}

TEST(PartitionPool, UnevenGridCoversEveryPixelOnce) {
  // 5×7 map, g=3: rows split [0,1),[1,3),[3,5); cols [0,2),[2,4),[4,7)
  std::mt19937_64 rng(13);
  const Tensor s3 = test::random_tensor({5, 7, 1}, rng);
  const Tensor cells = pool_cells(s3, 3);
  const std::size_t rb[] = {0, 1, 3, 5}, cb[] = {0, 2, 4, 7};
  double weighted = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (std::size_t y = rb[i]; y < rb[i + 1]; ++y)
        for (std::size_t x = cb[j]; x < cb[j + 1]; ++x) s += s3.at(y, x, 0);
      const double area = static_cast<double>((rb[i + 1] - rb[i]) * (cb[j + 1] - cb[j]));
      EXPECT_NEAR(cells(i * 3 + j, 0), s / area, 1e-14);
      weighted += cells(i * 3 + j, 0) * area;
    }
  double total = 0.0;
  for (double v : s3.values()) total += v;
  EXPECT_NEAR(weighted, total, 1e-12);
}

TEST(PartitionPool, GridLargerThanMapIsConfigError) {
  EXPECT_THROW(pool_cells(Tensor({3, 5, 1}), 4), ConfigError);
}

// ---- cross_attend ----------------------------------------------------------

TEST(CrossAttend, SingleSourceTokenIsCopied) {
  std::mt19937_64 rng(14);
  CrossAttention attn("attn", 4, 2, rng);
  set_identity(attn.query_proj);
  set_identity(attn.key_proj);
  set_identity(attn.value_proj);
  set_identity(attn.out_proj);
  const Tensor s = test::random_tensor({1, 4}, rng);
  const Tensor out = cross_attend(test::random_tensor({3, 4}, rng), s, attn);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out(r, c), s(0, c), 1e-14);
}

TEST(CrossAttend, IdenticalSourceRowsGiveThatRow) {
  std::mt19937_64 rng(15);
  CrossAttention attn("attn", 4, 2, rng);
  set_identity(attn.value_proj);
  set_identity(attn.out_proj);
  const Tensor row = test::random_tensor({1, 4}, rng);
  Tensor s({2, 4});
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) s(r, c) = row(0, c);
  const Tensor out = cross_attend(test::random_tensor({3, 4}, rng), s, attn);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out(r, c), row(0, c), 1e-14);
}

TEST(CrossAttend, MatchesBruteForceSingleHead) {
  std::mt19937_64 rng(16);
  CrossAttention attn("attn", 3, 1, rng);
  for (Linear* l : {&attn.query_proj, &attn.key_proj, &attn.value_proj, &attn.out_proj})
    l->bias.value = test::random_tensor({3}, rng);
  const Tensor q = test::random_tensor({2, 3}, rng);
  const Tensor s = test::random_tensor({3, 3}, rng);

  const Tensor Q = test::naive_affine(q, attn.query_proj.weight.value, attn.query_proj.bias.value);
  const Tensor K = test::naive_affine(s, attn.key_proj.weight.value, attn.key_proj.bias.value);
  const Tensor V = test::naive_affine(s, attn.value_proj.weight.value, attn.value_proj.bias.value);
  Tensor merged({2, 3});
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> logits(3);
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t d = 0; d < 3; ++d) logits[j] += Q(i, d) * K(j, d);
      logits[j] /= std::sqrt(3.0);
    }
    const auto w = test::naive_softmax(logits);
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t j = 0; j < 3; ++j) merged(i, d) += w[j] * V(j, d);
  }
  const Tensor expected = test::naive_affine(merged, attn.out_proj.weight.value, attn.out_proj.bias.value);
  EXPECT_LT(max_abs_diff(cross_attend(q, s, attn), expected), 1e-12);
}

TEST(CrossAttend, SourcePermutationInvariance) {
  std::mt19937_64 rng(17);
  CrossAttention attn("attn", 8, 4, rng);
  const Tensor q = test::random_tensor({5, 8}, rng);
  const Tensor s = test::random_tensor({9, 8}, rng);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor sp({9, 8});
    for (std::size_t r = 0; r < 9; ++r)
      for (std::size_t c = 0; c < 8; ++c) sp(r, c) = s(perm[r], c);
    EXPECT_LT(max_abs_diff(cross_attend(q, s, attn), cross_attend(q, sp, attn)), 1e-12);
  }
}

// ---- ffn -------------------------------------------------------------------

TEST(Ffn, ZeroWeightsGiveZero) {
  std::mt19937_64 rng(18);
  FeedForward block("ffn", 4, 6, rng);
  zero(block.fc1);
  zero(block.fc2);
  EXPECT_EQ(ffn(test::random_tensor({3, 4}, rng), block), Tensor({3, 4}));
}

TEST(Ffn, MatchesTwoMatmulOracle) {
  std::mt19937_64 rng(19);
  FeedForward block("ffn", 4, 6, rng);
  block.fc1.bias.value = test::random_tensor({6}, rng);
  block.fc2.bias.value = test::random_tensor({4}, rng);
  const Tensor x = test::random_tensor({1, 4}, rng);
  const Tensor hidden = test::naive_relu(test::naive_affine(x, block.fc1.weight.value, block.fc1.bias.value));
  const Tensor expected = test::naive_affine(hidden, block.fc2.weight.value, block.fc2.bias.value);
  EXPECT_LT(max_abs_diff(ffn(x, block), expected), 1e-13);
}

// ---- decoder_forward -------------------------------------------------------

TEST(DecoderForward, ZeroedBranchesLeaveInitialQueries) {
  std::mt19937_64 rng(20);
  const DecoderConfig config = small_config();
  Decoder dec(config, 5, 6, rng);
  for (auto& layer : dec.layers) {
    layer.gcn.weight[2].value.fill(0.0);
    zero(layer.attention.out_proj);
    zero(layer.ffn.fc2);
  }
  const StageFeatures f = random_features(rng);
  const Tensor expected = init_queries(f.stage4, dec.query_init.value, dec.stage4_proj);
  EXPECT_EQ(dec.forward(f), expected);
}

TEST(DecoderForward, SingleLayerEqualsManualComposition) {
  std::mt19937_64 rng(21);
  DecoderConfig config = small_config();
  config.num_layers = 1;
  Decoder dec(config, 5, 6, rng);
  const StageFeatures f = random_features(rng);
  const DecoderLayer& layer = dec.layers[0];

  const Tensor s = partition_pool(f.stage3, config.grid_side, dec.stage3_proj);
  Tensor x = init_queries(f.stage4, dec.query_init.value, dec.stage4_proj);
  x += gcn_refine(layer.ln_gcn.forward(x), layer.gcn);
  x += cross_attend(layer.ln_attn.forward(x), s, layer.attention);
  x += ffn(layer.ln_ffn.forward(x), layer.ffn);
  EXPECT_EQ(dec.forward(f), x);
}

TEST(DecoderForward, DeterministicForSeed) {
  const DecoderConfig config = small_config();
  std::mt19937_64 a(22), b(22);
  const Decoder d1(config, 5, 6, a), d2(config, 5, 6, b);
  std::mt19937_64 frng(23);
  const StageFeatures f = random_features(frng);
  EXPECT_EQ(d1.forward(f), d2.forward(f));
}

TEST(DecoderForward, OutputShapeIndependentOfResolution) {
  std::mt19937_64 rng(24);
  const DecoderConfig config = small_config();
  const Decoder dec(config, 5, 6, rng);
  for (auto [s3, s4] : {std::pair{3, 1}, std::pair{7, 3}, std::pair{14, 7}, std::pair{20, 9}}) {
    const Tensor out = dec.forward(random_features(rng, s3, s4));
    EXPECT_EQ(out.shape(), (Shape{config.num_queries, config.embed_dim}));
    EXPECT_TRUE(all_finite(out));
  }
}

TEST(DecoderConfig, Validation) {
  DecoderConfig c = small_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.gcn_depth = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.grid_side = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

// ---- backward passes -------------------------------------------------------

// Loss = Σ weights ⊙ decoder(features); checks every decoder parameter.
TEST(DecoderBackward, MatchesFiniteDifferences) {
  std::mt19937_64 rng(25);
  DecoderConfig config = small_config();
  config.embed_dim = 6;
  config.num_queries = 3;
  config.ffn_hidden = 5;
  config.grid_side = 2;
  Decoder dec(config, 5, 6, rng);
  for (auto& layer : dec.layers)
    for (auto& a : layer.gcn.adjacency) a.value = a.value + test::random_tensor({3, 3}, rng, 0.3);
  const StageFeatures f = random_features(rng, 5, 2);
  const Tensor weights = test::random_tensor({3, 6}, rng);

  ParameterList params;
  dec.collect(params);
  auto loss = [&] {
    const Tensor out = dec.forward(f);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * weights[i];
    return s;
  };
  auto loss_grad = [&] {
    for (Parameter* p : params) p->zero_grad();
    Decoder::Trace trace;
    dec.forward(f, &trace);
    dec.backward(trace, weights);
    return loss();
  };
  const GradCheckReport r = gradient_check(params, loss, loss_grad, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst_parameter << "[" << r.worst_index << "]";
}

}  // namespace
