#include "lifeiqa/decoder.hpp"

#include "lifeiqa/errors.hpp"

#include <cmath>

namespace lifeiqa {

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor gaussian_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  Tensor out({x.rows(), count});
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = x(r, begin + c);
  return out;
}

void write_cols(Tensor& dst, const Tensor& src, std::size_t begin) {
  for (std::size_t r = 0; r < src.rows(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) dst(r, begin + c) = src(r, c);
}

void require_rank3(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw DimensionError(std::string(what) + " must be h×w×c, got " + to_string(t.shape()));
}

}  // namespace

void DecoderConfig::validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be at least 1");
  if (num_queries < 1) throw ConfigError("num_queries must be at least 1");
  if (embed_dim < 1 || num_heads < 1) throw ConfigError("embed_dim and num_heads must be positive");
  if (embed_dim % num_heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  if (ffn_hidden < 1) throw ConfigError("ffn_hidden must be positive");
  if (gcn_depth != 3) throw ConfigError("gcn_depth is fixed at 3");
  if (grid_side < 1) throw ConfigError("grid_side must be at least 1");
}

// ---- Linear ----------------------------------------------------------------

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng)
    : weight(name + ".weight", uniform_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng)),
      bias(name + ".bias", Tensor({out})) {}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.cols() != in_features())
    throw DimensionError(weight.name + ": input " + to_string(x.shape()) + " does not match weight " +
                         to_string(weight.value.shape()));
  return add_row_bias(matmul(x, weight.value), bias.value);
}

Tensor Linear::backward(const Tensor& x, const Tensor& grad_out) {
  weight.grad += matmul_tn(x, grad_out);
  bias.grad += sum_rows(grad_out);
  return matmul_nt(grad_out, weight.value);
}

void Linear::collect(ParameterList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---- LayerNorm -------------------------------------------------------------

LayerNorm::LayerNorm(const std::string& name, std::size_t dim)
    : gain(name + ".gain", Tensor({dim}, 1.0)), bias(name + ".bias", Tensor({dim})) {}

Tensor LayerNorm::forward(const Tensor& x, Cache* cache) const {
  const std::size_t n = x.rows(), d = x.cols();
  if (d != gain.value.size()) throw DimensionError(gain.name + ": width mismatch " + to_string(x.shape()));
  Tensor normalized({n, d});
  std::vector<double> inv_std(n);
  Tensor y({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      normalized(r, c) = (x(r, c) - mean) * inv_std[r];
      y(r, c) = normalized(r, c) * gain.value[c] + bias.value[c];
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Tensor LayerNorm::backward(const Cache& cache, const Tensor& grad_out) {
  const Tensor& xhat = cache.normalized;
  const std::size_t n = xhat.rows(), d = xhat.cols();
  Tensor gx({n, d});
  for (std::size_t r = 0; r < n; ++r) {
    double mean_g = 0.0, mean_gx = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double g = grad_out(r, c) * gain.value[c];
      gain.grad[c] += grad_out(r, c) * xhat(r, c);
      bias.grad[c] += grad_out(r, c);
      mean_g += g;
      mean_gx += g * xhat(r, c);
    }
    mean_g /= static_cast<double>(d);
    mean_gx /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c)
      gx(r, c) = cache.inv_std[r] * (grad_out(r, c) * gain.value[c] - mean_g - xhat(r, c) * mean_gx);
  }
  return gx;
}

void LayerNorm::collect(ParameterList& out) {
  out.push_back(&gain);
  out.push_back(&bias);
}

// ---- GcnBlock --------------------------------------------------------------

GcnBlock::GcnBlock(const std::string& name, std::size_t num_queries, std::size_t dim, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(2 * dim));
  for (int i = 0; i < 3; ++i) {
    Tensor a = gaussian_tensor({num_queries, num_queries}, 0.01, rng);
    for (std::size_t k = 0; k < num_queries; ++k) a(k, k) += 1.0;
    adjacency[i] = Parameter(name + ".adjacency" + std::to_string(i + 1), std::move(a));
  }
  for (int i = 0; i < 3; ++i)
    weight[i] = Parameter(name + ".weight" + std::to_string(i), uniform_tensor({dim, dim}, bound, rng));
}

Tensor GcnBlock::forward(const Tensor& q, Cache* cache) const {
  Tensor x = q;
  for (int i = 0; i < 3; ++i) {
    Tensor ax = matmul(adjacency[i].value, x);
    Tensor z = matmul(ax, weight[i].value);
    Tensor next = i < 2 ? relu(z) : z;
    if (cache) {
      cache->input[i] = std::move(x);
      cache->propagated[i] = std::move(ax);
      cache->pre_act[i] = std::move(z);
    }
    x = std::move(next);
  }
  return x;
}

Tensor GcnBlock::backward(const Cache& cache, const Tensor& grad_out) {
  Tensor g = grad_out;
  for (int i = 2; i >= 0; --i) {
    if (i < 2) g = relu_backward(cache.pre_act[i], g);
    weight[i].grad += matmul_tn(cache.propagated[i], g);
    const Tensor g_ax = matmul_nt(g, weight[i].value);
    adjacency[i].grad += matmul_nt(g_ax, cache.input[i]);
    g = matmul_tn(adjacency[i].value, g_ax);
  }
  return g;
}

void GcnBlock::collect(ParameterList& out) {
  for (auto& a : adjacency) out.push_back(&a);
  for (auto& w : weight) out.push_back(&w);
}

// ---- CrossAttention --------------------------------------------------------

CrossAttention::CrossAttention(const std::string& name, std::size_t dim, std::size_t heads, std::mt19937_64& rng)
    : num_heads(heads),
      query_proj(name + ".query", dim, dim, rng),
      key_proj(name + ".key", dim, dim, rng),
      value_proj(name + ".value", dim, dim, rng),
      out_proj(name + ".out", dim, dim, rng) {
  if (heads == 0 || dim % heads != 0) throw ConfigError(name + ": embed dim not divisible by head count");
}

Tensor CrossAttention::forward(const Tensor& query, const Tensor& source, Cache* cache) const {
  const std::size_t dim = query_proj.in_features();
  if (source.rank() != 2 || source.cols() != dim)
    throw DimensionError("cross-attention source " + to_string(source.shape()) + " must have width " +
                         std::to_string(dim));
  const std::size_t head_dim = dim / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor q = query_proj.forward(query);
  Tensor k = key_proj.forward(source);
  Tensor v = value_proj.forward(source);
  Tensor merged({query.rows(), dim});
  std::vector<Tensor> weights;
  weights.reserve(num_heads);
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * head_dim;
    Tensor scores = matmul_nt(slice_cols(q, off, head_dim), slice_cols(k, off, head_dim)) * scale;
    Tensor attn = softmax_lastdim(scores);
    write_cols(merged, matmul(attn, slice_cols(v, off, head_dim)), off);
    weights.push_back(std::move(attn));
  }
  Tensor out = out_proj.forward(merged);
  if (cache) {
    cache->query_in = query;
    cache->source = source;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->weights = std::move(weights);
    cache->merged = std::move(merged);
  }
  return out;
}

CrossAttention::Grads CrossAttention::backward(const Cache& cache, const Tensor& grad_out) {
  const std::size_t dim = query_proj.in_features();
  const std::size_t head_dim = dim / num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  const Tensor g_merged = out_proj.backward(cache.merged, grad_out);
  Tensor gq(cache.q.shape()), gk(cache.k.shape()), gv(cache.v.shape());
  for (std::size_t h = 0; h < num_heads; ++h) {
    const std::size_t off = h * head_dim;
    const Tensor& attn = cache.weights[h];
    const Tensor g_head = slice_cols(g_merged, off, head_dim);
    const Tensor vh = slice_cols(cache.v, off, head_dim);
    write_cols(gv, matmul_tn(attn, g_head), off);
    const Tensor g_scores = softmax_backward(attn, matmul_nt(g_head, vh)) * scale;
    write_cols(gq, matmul(g_scores, slice_cols(cache.k, off, head_dim)), off);
    write_cols(gk, matmul_tn(g_scores, slice_cols(cache.q, off, head_dim)), off);
  }
  Grads grads;
  grads.query = query_proj.backward(cache.query_in, gq);
  grads.source = key_proj.backward(cache.source, gk);
  grads.source += value_proj.backward(cache.source, gv);
  return grads;
}

void CrossAttention::collect(ParameterList& out) {
  query_proj.collect(out);
  key_proj.collect(out);
  value_proj.collect(out);
  out_proj.collect(out);
}

// ---- FeedForward -----------------------------------------------------------

FeedForward::FeedForward(const std::string& name, std::size_t dim, std::size_t hidden, std::mt19937_64& rng)
    : fc1(name + ".fc1", dim, hidden, rng), fc2(name + ".fc2", hidden, dim, rng) {}

Tensor FeedForward::forward(const Tensor& x, Cache* cache) const {
  Tensor pre = fc1.forward(x);
  Tensor y = fc2.forward(relu(pre));
  if (cache) {
    cache->input = x;
    cache->hidden_pre = std::move(pre);
  }
  return y;
}

Tensor FeedForward::backward(const Cache& cache, const Tensor& grad_out) {
  const Tensor g_hidden = fc2.backward(relu(cache.hidden_pre), grad_out);
  return fc1.backward(cache.input, relu_backward(cache.hidden_pre, g_hidden));
}

void FeedForward::collect(ParameterList& out) {
  fc1.collect(out);
  fc2.collect(out);
}

// ---- DecoderLayer ----------------------------------------------------------

DecoderLayer::DecoderLayer(const std::string& name, const DecoderConfig& config, std::mt19937_64& rng)
    : ln_gcn(name + ".ln_gcn", config.embed_dim),
      ln_attn(name + ".ln_attn", config.embed_dim),
      ln_ffn(name + ".ln_ffn", config.embed_dim),
      gcn(name + ".gcn", config.num_queries, config.embed_dim, rng),
      attention(name + ".attention", config.embed_dim, config.num_heads, rng),
      ffn(name + ".ffn", config.embed_dim, config.ffn_hidden, rng) {}

Tensor DecoderLayer::forward(const Tensor& tokens, const Tensor& source, Cache* cache) const {
  Tensor x = tokens;
  x += gcn.forward(ln_gcn.forward(x, cache ? &cache->ln_gcn : nullptr), cache ? &cache->gcn : nullptr);
  x += attention.forward(ln_attn.forward(x, cache ? &cache->ln_attn : nullptr), source,
                         cache ? &cache->attn : nullptr);
  x += ffn.forward(ln_ffn.forward(x, cache ? &cache->ln_ffn : nullptr), cache ? &cache->ffn : nullptr);
  return x;
}

DecoderLayer::Grads DecoderLayer::backward(const Cache& cache, const Tensor& grad_out) {
  Tensor g = grad_out;
  g += ln_ffn.backward(cache.ln_ffn, ffn.backward(cache.ffn, g));
  CrossAttention::Grads attn = attention.backward(cache.attn, g);
  g += ln_attn.backward(cache.ln_attn, attn.query);
  g += ln_gcn.backward(cache.ln_gcn, gcn.backward(cache.gcn, g));
  return {std::move(g), std::move(attn.source)};
}

void DecoderLayer::collect(ParameterList& out) {
  ln_gcn.collect(out);
  gcn.collect(out);
  ln_attn.collect(out);
  attention.collect(out);
  ln_ffn.collect(out);
  ffn.collect(out);
}

// ---- Decoder ---------------------------------------------------------------

Decoder::Decoder(const DecoderConfig& config, std::size_t stage3_channels, std::size_t stage4_channels,
                 std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  query_init = Parameter("decoder.query_init", gaussian_tensor({config.num_queries, config.embed_dim}, 0.02, rng));
  stage4_proj = Linear("decoder.stage4_proj", stage4_channels, config.embed_dim, rng);
  stage3_proj = Linear("decoder.stage3_proj", stage3_channels, config.embed_dim, rng);
  layers.reserve(config.num_layers);
  for (std::size_t l = 0; l < config.num_layers; ++l)
    layers.emplace_back("decoder.layer" + std::to_string(l), config_, rng);
}

Tensor Decoder::forward(const StageFeatures& features, Trace* trace) const {
  Tensor cells = pool_cells(features.stage3, config_.grid_side);
  Tensor sequence = stage3_proj.forward(cells);
  Tensor initial = init_queries(features.stage4, query_init.value, stage4_proj);

  std::vector<DecoderLayer::Cache> caches(trace ? layers.size() : 0);
  Tensor x = initial;
  for (std::size_t l = 0; l < layers.size(); ++l) x = layers[l].forward(x, sequence, trace ? &caches[l] : nullptr);

  if (trace) {
    trace->cells = std::move(cells);
    trace->context4 = global_average_pool(features.stage4);
    trace->sequence = std::move(sequence);
    trace->initial = std::move(initial);
    trace->layers = std::move(caches);
    trace->output = x;
  }
  return x;
}

void Decoder::backward(const Trace& trace, const Tensor& grad_tokens) {
  Tensor g = grad_tokens;
  Tensor g_sequence(trace.sequence.shape());
  for (std::size_t l = layers.size(); l-- > 0;) {
    DecoderLayer::Grads grads = layers[l].backward(trace.layers[l], g);
    g = std::move(grads.tokens);
    g_sequence += grads.source;
  }
  stage3_proj.backward(trace.cells, g_sequence);
  query_init.grad += g;
  // Every query row receives the same broadcast context vector.
  const Tensor context = trace.context4.reshaped({1, trace.context4.size()});
  stage4_proj.backward(context, sum_rows(g).reshaped({1, g.cols()}));
}

void Decoder::collect(ParameterList& out) {
  out.push_back(&query_init);
  stage4_proj.collect(out);
  stage3_proj.collect(out);
  for (auto& layer : layers) layer.collect(out);
}

// ---- operation entry points ------------------------------------------------

Tensor init_queries(const Tensor& stage4, const Tensor& query_init, const Linear& stage4_proj) {
  require_rank3(stage4, "stage4");
  if (stage4.dim(2) != stage4_proj.in_features())
    throw DimensionError("stage4 has " + std::to_string(stage4.dim(2)) + " channels but P4 expects " +
                         std::to_string(stage4_proj.in_features()));
  if (query_init.rank() != 2 || query_init.cols() != stage4_proj.out_features())
    throw DimensionError("query_init " + to_string(query_init.shape()) + " does not match embed dim " +
                         std::to_string(stage4_proj.out_features()));
  // GAP commutes with the per-position affine projection, so pool first.
  const Tensor pooled = global_average_pool(stage4);
  const Tensor context = stage4_proj.forward(pooled.reshaped({1, pooled.size()}));
  Tensor out = query_init;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += context[c];
  return out;
}

Tensor gcn_refine(const Tensor& q, const GcnBlock& block) { return block.forward(q); }

Tensor pool_cells(const Tensor& stage3, std::size_t grid_side) {
  require_rank3(stage3, "stage3");
  const std::size_t h = stage3.dim(0), w = stage3.dim(1), c = stage3.dim(2);
  if (grid_side < 1 || grid_side > h || grid_side > w)
    throw ConfigError("grid side " + std::to_string(grid_side) + " exceeds stage3 spatial extent " +
                      std::to_string(h) + "x" + std::to_string(w));
  Tensor out({grid_side * grid_side, c});
  for (std::size_t gi = 0; gi < grid_side; ++gi) {
    const std::size_t r0 = gi * h / grid_side, r1 = (gi + 1) * h / grid_side;
    for (std::size_t gj = 0; gj < grid_side; ++gj) {
      const std::size_t c0 = gj * w / grid_side, c1 = (gj + 1) * w / grid_side;
      const std::size_t row = gi * grid_side + gj;
      for (std::size_t y = r0; y < r1; ++y)
        for (std::size_t x = c0; x < c1; ++x)
          for (std::size_t k = 0; k < c; ++k) out(row, k) += stage3.at(y, x, k);
      const double inv = 1.0 / static_cast<double>((r1 - r0) * (c1 - c0));
      for (std::size_t k = 0; k < c; ++k) out(row, k) *= inv;
    }
  }
  return out;
}

Tensor partition_pool(const Tensor& stage3, std::size_t grid_side, const Linear& stage3_proj) {
  return stage3_proj.forward(pool_cells(stage3, grid_side));
}

Tensor cross_attend(const Tensor& q, const Tensor& s, const CrossAttention& attention) {
  return attention.forward(q, s);
}

Tensor ffn(const Tensor& x, const FeedForward& block) { return block.forward(x); }

}  // namespace lifeiqa
