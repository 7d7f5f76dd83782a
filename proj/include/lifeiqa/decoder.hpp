#pragma once

#include "lifeiqa/tensor.hpp"

#include <cstddef>
#include <random>
#include <string>
#include <vector>

namespace lifeiqa {

struct DecoderConfig {
  std::size_t num_layers = 4;
  std::size_t num_queries = 6;
  std::size_t embed_dim = 384;
  std::size_t num_heads = 6;
  std::size_t ffn_hidden = 2048;
  std::size_t gcn_depth = 3;
  /// Side of the pooling grid over stage-3; the key/value sequence has grid_side² rows.
  std::size_t grid_side = 6;

  void validate() const;
  std::size_t head_dim() const { return embed_dim / num_heads; }
};

/// Stage-3 (h3×w3×C3) and stage-4 (h4×w4×C4) backbone maps for one image.
struct StageFeatures {
  Tensor stage3;
  Tensor stage4;
};

/// Per-token affine map y = x·W + b with W stored as [in×out].
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);

  std::size_t in_features() const { return weight.value.dim(0); }
  std::size_t out_features() const { return weight.value.dim(1); }

  Tensor forward(const Tensor& x) const;
  /// Accumulates weight/bias gradients and returns dL/dx.
  Tensor backward(const Tensor& x, const Tensor& grad_out);
  void collect(ParameterList& out);

  Parameter weight;
  Parameter bias;
};

class LayerNorm {
 public:
  struct Cache {
    Tensor normalized;
    std::vector<double> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim);

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& grad_out);
  void collect(ParameterList& out);

  Parameter gain;
  Parameter bias;
  double eps = 1e-5;
};

/// Three rounds of message passing over the query graph:
/// Q1 = relu(A1·Q·W0), Q2 = relu(A2·Q1·W1), Q3 = A3·Q2·W2.
class GcnBlock {
 public:
  struct Cache {
    Tensor input[3];       // X fed to each round
    Tensor propagated[3];  // A·X
    Tensor pre_act[3];     // A·X·W
  };

  GcnBlock() = default;
  GcnBlock(const std::string& name, std::size_t num_queries, std::size_t dim, std::mt19937_64& rng);

  Tensor forward(const Tensor& q, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& grad_out);
  void collect(ParameterList& out);

  Parameter adjacency[3];
  Parameter weight[3];
};

/// Multi-head scaled dot-product attention from query tokens onto a
/// key/value sequence.
class CrossAttention {
 public:
  struct Cache {
    Tensor query_in, source;
    Tensor q, k, v;
    std::vector<Tensor> weights;  // per head, N×M
    Tensor merged;                // concatenated head outputs
  };
  struct Grads {
    Tensor query;
    Tensor source;
  };

  CrossAttention() = default;
  CrossAttention(const std::string& name, std::size_t dim, std::size_t num_heads, std::mt19937_64& rng);

  Tensor forward(const Tensor& q, const Tensor& s, Cache* cache = nullptr) const;
  Grads backward(const Cache& cache, const Tensor& grad_out);
  void collect(ParameterList& out);

  std::size_t num_heads = 1;
  Linear query_proj, key_proj, value_proj, out_proj;
};

/// linear(D→hidden), ReLU, linear(hidden→D), per token.
class FeedForward {
 public:
  struct Cache {
    Tensor input, hidden_pre;
  };

  FeedForward() = default;
  FeedForward(const std::string& name, std::size_t dim, std::size_t hidden, std::mt19937_64& rng);

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& grad_out);
  void collect(ParameterList& out);

  Linear fc1, fc2;
};

/// Pre-norm residual layer: GCN refinement, cross-attention, FFN.
class DecoderLayer {
 public:
  struct Cache {
    LayerNorm::Cache ln_gcn, ln_attn, ln_ffn;
    GcnBlock::Cache gcn;
    CrossAttention::Cache attn;
    FeedForward::Cache ffn;
  };
  struct Grads {
    Tensor tokens;
    Tensor source;
  };

  DecoderLayer() = default;
  DecoderLayer(const std::string& name, const DecoderConfig& config, std::mt19937_64& rng);

  Tensor forward(const Tensor& tokens, const Tensor& source, Cache* cache = nullptr) const;
  Grads backward(const Cache& cache, const Tensor& grad_out);
  void collect(ParameterList& out);

  LayerNorm ln_gcn, ln_attn, ln_ffn;
  GcnBlock gcn;
  CrossAttention attention;
  FeedForward ffn;
};

class Decoder {
 public:
  struct Trace {
    Tensor cells;     // g²×C3 pooled stage-3 before projection
    Tensor context4;  // GAP(stage4), length C4
    Tensor sequence;  // S, g²×D
    Tensor initial;   // Q′_init
    std::vector<DecoderLayer::Cache> layers;
    Tensor output;
  };

  Decoder() = default;
  Decoder(const DecoderConfig& config, std::size_t stage3_channels, std::size_t stage4_channels,
          std::mt19937_64& rng);

  const DecoderConfig& config() const { return config_; }

  /// Returns the N×D decoded tokens. Fills `trace` for a later backward pass.
  Tensor forward(const StageFeatures& features, Trace* trace = nullptr) const;
  void backward(const Trace& trace, const Tensor& grad_tokens);
  void collect(ParameterList& out);

  Parameter query_init;
  Linear stage4_proj;
  Linear stage3_proj;
  std::vector<DecoderLayer> layers;

 private:
  DecoderConfig config_;
};

// ---- operation-level entry points ------------------------------------------

/// Q′_init = broadcast(GAP(P4(stage4))) + Q_init.
Tensor init_queries(const Tensor& stage4, const Tensor& query_init, const Linear& stage4_proj);

Tensor gcn_refine(const Tensor& q, const GcnBlock& block);

/// Averages stage-3 within a g×g grid (cell row boundaries at floor(i·h/g),
/// column boundaries at floor(j·w/g)). Row r of the result is cell (r / g, r % g).
Tensor pool_cells(const Tensor& stage3, std::size_t grid_side);

/// pool_cells followed by the per-position projection P3.
Tensor partition_pool(const Tensor& stage3, std::size_t grid_side, const Linear& stage3_proj);

Tensor cross_attend(const Tensor& q, const Tensor& s, const CrossAttention& attention);

Tensor ffn(const Tensor& x, const FeedForward& block);

}  // namespace lifeiqa
