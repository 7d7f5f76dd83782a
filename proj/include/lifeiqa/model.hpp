#pragma once

#include "lifeiqa/data_io.hpp"
#include "lifeiqa/decoder.hpp"
#include "lifeiqa/losses.hpp"
#include "lifeiqa/moe.hpp"

#include <json.hpp>

#include <cstdint>
#include <span>
#include <vector>

namespace lifeiqa {

struct ModelConfig {
  DecoderConfig decoder;
  MoEConfig moe;
  std::size_t stage3_channels = 16;
  std::size_t stage4_channels = 32;

  /// Full-size configuration (D=384, 4 layers, 6 queries, 4 experts, K=2).
  static ModelConfig full();
  /// N=6, D=64, L=2, N_E=4, K=2; the desk-scale configuration.
  static ModelConfig small();
  /// N=3, D=8, heads=2, L=1, g=2, N_E=3, K=2, hidden widths 5; for gradient checks.
  static ModelConfig tiny();

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& config);
/// Fields missing from `j` keep the values in `base`.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = ModelConfig::small());

/// Decoded features paired with a normalized quality target.
struct Sample {
  StageFeatures features;
  double target = 0.0;
};

/// Decoder followed by the MoE head, producing one quality score per image.
class Model {
 public:
  struct Trace {
    Decoder::Trace decoder;
    MoEHead::Trace head;
  };

  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  double forward(const StageFeatures& features, Trace* trace = nullptr) const;
  double predict(const StageFeatures& features) const { return forward(features); }
  void backward(const Trace& trace, double grad_score, const Tensor& grad_logits);

  /// Stable order: decoder parameters, then head parameters.
  ParameterList parameters();
  std::vector<const Parameter*> parameters() const;
  void zero_grad();

  Checkpoint to_checkpoint(nlohmann::json metadata = nlohmann::json::object()) const;
  /// Copies tensors by name; throws FormatError on a missing name or shape mismatch.
  void load(const Checkpoint& checkpoint);

  Decoder decoder;
  MoEHead head;

 private:
  ModelConfig config_;
};

struct BatchOutput {
  LossBreakdown loss;
  std::vector<double> predictions;
};

/// L_total over a batch: L1 on the scores averaged over the batch, the
/// routing losses averaged over tokens then over the batch. With
/// `accumulate_grad`, gradients are added to every Parameter::grad.
BatchOutput batch_loss(Model& model, std::span<const Sample* const> batch, const LossWeights& weights,
                       bool accumulate_grad);

}  // namespace lifeiqa
