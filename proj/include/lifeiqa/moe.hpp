#pragma once

#include "lifeiqa/decoder.hpp"
#include "lifeiqa/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace lifeiqa {

struct MoEConfig {
  std::size_t num_experts = 4;
  std::size_t top_k = 2;
  std::size_t expert_hidden = 1536;
  std::size_t embed_dim = 384;

  void validate() const;
};

/// Per-token gating state for one MoE pass.
struct RoutingRecord {
  Tensor logits;          // g, N×N_E
  Tensor mask;            // M ∈ {0,1}, each row sums to K
  Tensor probs;           // dense softmax(g)
  Tensor sparse_weights;  // softmax of g with non-Top-K entries at −∞
  std::size_t top_k = 0;

  std::size_t num_tokens() const { return logits.rows(); }
  std::size_t num_experts() const { return logits.cols(); }
};

/// Two-layer ReLU MLP, D → hidden → D.
class Expert {
 public:
  struct Cache {
    Tensor input, hidden_pre;
  };

  Expert() = default;
  Expert(const std::string& name, std::size_t dim, std::size_t hidden, std::mt19937_64& rng);

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& grad_out);
  void collect(ParameterList& out);

  Linear fc1, fc2;
};

/// Gate → Top-K routing → sparse expert mixture → γ-bypass → per-token score → mean.
class MoEHead {
 public:
  struct Trace {
    Tensor input;
    RoutingRecord routing;
    std::vector<std::vector<std::size_t>> expert_tokens;  // tokens routed to each expert
    std::vector<Expert::Cache> expert_caches;
    std::vector<Tensor> expert_outputs;  // rows aligned with expert_tokens
    Tensor mixed;                        // Y_MoE
    Tensor final_tokens;                 // Y_final
    Tensor token_scores;                 // N×1
    double score = 0.0;
  };

  MoEHead() = default;
  MoEHead(const MoEConfig& config, std::mt19937_64& rng);

  const MoEConfig& config() const { return config_; }

  /// Returns the image-level quality score and fills `trace` when given.
  double forward(const Tensor& tokens, Trace* trace = nullptr) const;

  /// Back-propagates d(loss)/d(score) plus any direct loss gradient on the
  /// gate logits (load-balance / z-loss). Returns d(loss)/d(tokens).
  Tensor backward(const Trace& trace, double grad_score, const Tensor& grad_logits);
  void collect(ParameterList& out);

  /// Number of (token, expert) evaluations since the last reset.
  std::uint64_t expert_calls() const { return expert_calls_; }
  void reset_expert_calls() { expert_calls_ = 0; }

  Linear gate;
  std::vector<Expert> experts;
  Parameter gamma;
  Linear regressor;

 private:
  MoEConfig config_;
  mutable std::uint64_t expert_calls_ = 0;
};

// ---- operation-level entry points ------------------------------------------

/// g = x·W_g + b_g per token.
Tensor gate(const Tensor& x, const Linear& gate_params);

/// Builds the Top-K mask, sparse weights and dense probabilities for each token.
RoutingRecord route(const Tensor& logits, std::size_t top_k);

/// Σ_e w_e·E_e(x) over each token's selected experts. Only experts with a
/// nonzero weight are evaluated; `expert_calls` (when given) is incremented once per
/// evaluated (token, expert) pair.
Tensor moe_forward(const Tensor& x, const RoutingRecord& routing, const std::vector<Expert>& experts,
                   std::uint64_t* expert_calls = nullptr);

/// y_moe + γ·x
Tensor bypass_combine(const Tensor& y_moe, const Tensor& x, double gamma);

/// Mean over tokens of (token·w + b).
double score_from_tokens(const Tensor& tokens, const Tensor& weights, double bias);

/// Trainable parameters of one D→hidden→D MLP with biases.
std::uint64_t mlp_param_count(std::uint64_t dim, std::uint64_t hidden);
/// The per-token FFN of a decoder layer.
std::uint64_t ffn_param_count(std::uint64_t dim, std::uint64_t hidden);
/// All experts of a MoE block (gate excluded).
std::uint64_t experts_param_count(const MoEConfig& config);
/// Gate W_g and b_g.
std::uint64_t gate_param_count(const MoEConfig& config);

}  // namespace lifeiqa
