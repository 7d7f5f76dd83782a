#include "lifeiqa/moe.hpp"

#include "lifeiqa/errors.hpp"

#include <limits>

namespace lifeiqa {

namespace {

struct Dispatch {
  std::vector<std::vector<std::size_t>> tokens;  // per expert
  std::vector<Expert::Cache> caches;
  std::vector<Tensor> outputs;
  Tensor mixed;
};

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  Tensor out({rows.size(), x.cols()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) out(i, c) = x(rows[i], c);
  return out;
}

// Experts run on the batch of tokens routed to them; the weighted sum is
// reduced in ascending expert order.
Dispatch dispatch(const Tensor& x, const RoutingRecord& routing, const std::vector<Expert>& experts,
                  std::uint64_t* calls, bool keep_cache) {
  const std::size_t n = x.rows(), num_experts = routing.num_experts();
  if (routing.num_tokens() != n) throw DimensionError("routing covers a different number of tokens than x");
  if (experts.size() != num_experts) throw DimensionError("routing expert count differs from expert list");

  Dispatch d;
  d.tokens.resize(num_experts);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < num_experts; ++e)
      if (routing.sparse_weights(i, e) != 0.0) d.tokens[e].push_back(i);

  d.mixed = Tensor(x.shape());
  d.outputs.resize(num_experts);
  if (keep_cache) d.caches.resize(num_experts);
  for (std::size_t e = 0; e < num_experts; ++e) {
    if (d.tokens[e].empty()) continue;
    const Tensor batch = gather_rows(x, d.tokens[e]);
    d.outputs[e] = experts[e].forward(batch, keep_cache ? &d.caches[e] : nullptr);
    if (calls) *calls += d.tokens[e].size();
    for (std::size_t j = 0; j < d.tokens[e].size(); ++j) {
      const std::size_t i = d.tokens[e][j];
      const double w = routing.sparse_weights(i, e);
      for (std::size_t c = 0; c < x.cols(); ++c) d.mixed(i, c) += w * d.outputs[e](j, c);
    }
  }
  return d;
}

}  // namespace

void MoEConfig::validate() const {
  if (num_experts < 1) throw ConfigError("num_experts must be at least 1");
  if (top_k < 1 || top_k > num_experts)
    throw ConfigError("top_k=" + std::to_string(top_k) + " must lie in [1, " + std::to_string(num_experts) + "]");
  if (expert_hidden < 1 || embed_dim < 1) throw ConfigError("expert_hidden and embed_dim must be positive");
}

// ---- Expert ----------------------------------------------------------------

Expert::Expert(const std::string& name, std::size_t dim, std::size_t hidden, std::mt19937_64& rng)
    : fc1(name + ".fc1", dim, hidden, rng), fc2(name + ".fc2", hidden, dim, rng) {}

Tensor Expert::forward(const Tensor& x, Cache* cache) const {
  Tensor pre = fc1.forward(x);
  Tensor y = fc2.forward(relu(pre));
  if (cache) {
    cache->input = x;
    cache->hidden_pre = std::move(pre);
  }
  return y;
}

Tensor Expert::backward(const Cache& cache, const Tensor& grad_out) {
  const Tensor g_hidden = fc2.backward(relu(cache.hidden_pre), grad_out);
  return fc1.backward(cache.input, relu_backward(cache.hidden_pre, g_hidden));
}

void Expert::collect(ParameterList& out) {
  fc1.collect(out);
  fc2.collect(out);
}

// ---- MoEHead ---------------------------------------------------------------

MoEHead::MoEHead(const MoEConfig& config, std::mt19937_64& rng) : config_(config) {
  config_.validate();
  gate = Linear("head.gate", config.embed_dim, config.num_experts, rng);
  experts.reserve(config.num_experts);
  for (std::size_t e = 0; e < config.num_experts; ++e)
    experts.emplace_back("head.expert" + std::to_string(e), config.embed_dim, config.expert_hidden, rng);
  gamma = Parameter("head.gamma", Tensor({1}, 1.0));
  regressor = Linear("head.regressor", config.embed_dim, 1, rng);
}

double MoEHead::forward(const Tensor& tokens, Trace* trace) const {
  RoutingRecord routing = route(lifeiqa::gate(tokens, gate), config_.top_k);
  Dispatch d = dispatch(tokens, routing, experts, &expert_calls_, trace != nullptr);
  Tensor final_tokens = bypass_combine(d.mixed, tokens, gamma.value[0]);
  Tensor token_scores = regressor.forward(final_tokens);
  double score = 0.0;
  for (std::size_t i = 0; i < token_scores.size(); ++i) score += token_scores[i];
  score /= static_cast<double>(token_scores.size());

  if (trace) {
    trace->input = tokens;
    trace->routing = std::move(routing);
    trace->expert_tokens = std::move(d.tokens);
    trace->expert_caches = std::move(d.caches);
    trace->expert_outputs = std::move(d.outputs);
    trace->mixed = std::move(d.mixed);
    trace->final_tokens = std::move(final_tokens);
    trace->token_scores = std::move(token_scores);
    trace->score = score;
  }
  return score;
}

Tensor MoEHead::backward(const Trace& trace, double grad_score, const Tensor& grad_logits) {
  const Tensor& x = trace.input;
  const std::size_t n = x.rows(), dim = x.cols();
  const RoutingRecord& routing = trace.routing;

  const Tensor g_scores({n, 1}, std::vector<double>(n, grad_score / static_cast<double>(n)));
  const Tensor g_final = regressor.backward(trace.final_tokens, g_scores);

  double g_gamma = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) g_gamma += g_final[i] * x[i];
  gamma.grad[0] += g_gamma;
  Tensor gx = g_final * gamma.value[0];

  Tensor g_weights(routing.sparse_weights.shape());
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const auto& rows = trace.expert_tokens[e];
    if (rows.empty()) continue;
    Tensor g_out({rows.size(), dim});
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const std::size_t i = rows[j];
      const double w = routing.sparse_weights(i, e);
      double dot = 0.0;
      for (std::size_t c = 0; c < dim; ++c) {
        g_out(j, c) = w * g_final(i, c);
        dot += g_final(i, c) * trace.expert_outputs[e](j, c);
      }
      g_weights(i, e) = dot;
    }
    const Tensor g_in = experts[e].backward(trace.expert_caches[e], g_out);
    for (std::size_t j = 0; j < rows.size(); ++j)
      for (std::size_t c = 0; c < dim; ++c) gx(rows[j], c) += g_in(j, c);
  }

  // The mask is constant; masked entries have weight 0 and receive no gradient.
  Tensor g_logits = softmax_backward(routing.sparse_weights, g_weights);
  if (!grad_logits.empty()) g_logits += grad_logits;
  gx += gate.backward(x, g_logits);
  return gx;
}

void MoEHead::collect(ParameterList& out) {
  gate.collect(out);
  for (auto& e : experts) e.collect(out);
  out.push_back(&gamma);
  regressor.collect(out);
}

// ---- operation entry points ------------------------------------------------

Tensor gate(const Tensor& x, const Linear& gate_params) { return gate_params.forward(x); }

RoutingRecord route(const Tensor& logits, std::size_t top_k) {
  if (logits.rank() != 2) throw DimensionError("route: logits must be N×N_E, got " + to_string(logits.shape()));
  const std::size_t n = logits.rows(), num_experts = logits.cols();
  RoutingRecord rec;
  rec.logits = logits;
  rec.top_k = top_k;
  rec.mask = Tensor({n, num_experts});
  Tensor masked({n, num_experts}, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t e : topk_indices(logits.row(i), top_k)) {
      rec.mask(i, e) = 1.0;
      masked(i, e) = logits(i, e);
    }
  }
  rec.sparse_weights = softmax_lastdim(masked);
  rec.probs = softmax_lastdim(logits);
  return rec;
}

Tensor moe_forward(const Tensor& x, const RoutingRecord& routing, const std::vector<Expert>& experts,
                   std::uint64_t* expert_calls) {
  return dispatch(x, routing, experts, expert_calls, false).mixed;
}

Tensor bypass_combine(const Tensor& y_moe, const Tensor& x, double gamma) {
  if (y_moe.shape() != x.shape())
    throw DimensionError("bypass: " + to_string(y_moe.shape()) + " vs " + to_string(x.shape()));
  Tensor out = y_moe;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += gamma * x[i];
  return out;
}

double score_from_tokens(const Tensor& tokens, const Tensor& weights, double bias) {
  if (tokens.rank() != 2 || weights.size() != tokens.cols())
    throw DimensionError("score: tokens " + to_string(tokens.shape()) + " vs weights " + to_string(weights.shape()));
  double total = 0.0;
  for (std::size_t r = 0; r < tokens.rows(); ++r) {
    double s = bias;
    for (std::size_t c = 0; c < tokens.cols(); ++c) s += tokens(r, c) * weights[c];
    total += s;
  }
  return total / static_cast<double>(tokens.rows());
}

std::uint64_t mlp_param_count(std::uint64_t dim, std::uint64_t hidden) { return 2 * dim * hidden + hidden + dim; }

std::uint64_t ffn_param_count(std::uint64_t dim, std::uint64_t hidden) { return mlp_param_count(dim, hidden); }

std::uint64_t experts_param_count(const MoEConfig& config) {
  return config.num_experts * mlp_param_count(config.embed_dim, config.expert_hidden);
}

std::uint64_t gate_param_count(const MoEConfig& config) {
  return config.embed_dim * config.num_experts + config.num_experts;
}

}  // namespace lifeiqa
