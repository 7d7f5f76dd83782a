#pragma once

#include "lifeiqa/data_io.hpp"
#include "lifeiqa/losses.hpp"
#include "lifeiqa/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace lifeiqa {

struct TrainConfig {
  double learning_rate = 2e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr_decay = 0.01;
  std::size_t decay_every = 10;
  LossWeights weights;
  std::uint64_t seed = 0;
  /// Stops after this many optimizer steps; 0 means run all epochs.
  std::size_t max_steps = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

/// One bias-corrected Adam update over `params` using their current grads.
/// Throws TrainingError naming the parameter when a gradient is non-finite.
void adam_step(const ParameterList& params, AdamState& state, double lr);

/// learning_rate · lr_decay^floor(epoch / decay_every)
double lr_at(std::size_t epoch, const TrainConfig& config);

/// Maps raw MOS to [0, 1] for training.
struct MosScale {
  double min = 0.0;
  double max = 1.0;

  double normalize(double mos) const { return (mos - min) / (max - min); }
};

/// Uses metadata mos_min/mos_max when present, otherwise the label range.
MosScale mos_scale(const Manifest& manifest);

struct Dataset {
  std::vector<std::string> ids;
  std::vector<Sample> samples;
};

Dataset load_dataset(const Manifest& manifest, const std::vector<std::string>& ids, const MosScale& scale);

struct LogRow {
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

/// CSV with header epoch,step,main,aux,z,total,lr; values printed with 17 significant digits.
std::string log_to_csv(const std::vector<LogRow>& log);

struct TrainResult {
  std::vector<LogRow> log;
  std::size_t steps = 0;
};

/// Adam on L_total with a per-epoch shuffle seeded by (seed, epoch).
/// Throws TrainingError with the step index when the loss becomes non-finite.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& config);

struct Evaluation {
  double srocc = 0.0;
  double plcc = 0.0;
  std::vector<double> predictions;
  std::vector<double> targets;
};

/// Predicts every sample and correlates with the targets. MetricError
/// propagates for degenerate (constant) predictions.
Evaluation evaluate(const Model& model, const Dataset& data);

}  // namespace lifeiqa
