#include "lifeiqa/train.hpp"

#include "lifeiqa/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>

namespace lifeiqa {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (decay_every < 1) throw ConfigError("decay_every must be at least 1");
  if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be positive");
  if (weights.aux < 0.0 || weights.z < 0.0) throw ConfigError("loss weights must be nonnegative");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},       {"batch_size", c.batch_size},
          {"lr_decay", c.lr_decay},           {"decay_every", c.decay_every}, {"lambda1", c.weights.aux},
          {"lambda2", c.weights.z},           {"seed", c.seed},           {"max_steps", c.max_steps}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  static const std::set<std::string> known = {"learning_rate", "epochs",  "batch_size", "lr_decay", "decay_every",
                                              "lambda1",       "lambda2", "seed",       "max_steps"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown train config key '" + key + "'");
  if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("lr_decay")) c.lr_decay = j.at("lr_decay").get<double>();
  if (j.contains("decay_every")) c.decay_every = j.at("decay_every").get<std::size_t>();
  if (j.contains("lambda1")) c.weights.aux = j.at("lambda1").get<double>();
  if (j.contains("lambda2")) c.weights.z = j.at("lambda2").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("max_steps")) c.max_steps = j.at("max_steps").get<std::size_t>();
  c.validate();
  return c;
}

void adam_step(const ParameterList& params, AdamState& state, double lr) {
  if (state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (const Parameter* p : params) {
      state.first_moment.emplace_back(p->value.shape());
      state.second_moment.emplace_back(p->value.shape());
    }
  }
  for (const Parameter* p : params)
    if (!all_finite(p->grad)) throw TrainingError("non-finite gradient in parameter " + p->name);

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p.value[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

double lr_at(std::size_t epoch, const TrainConfig& config) {
  const auto drops = static_cast<double>(epoch / config.decay_every);
  return config.learning_rate * std::pow(config.lr_decay, drops);
}

MosScale mos_scale(const Manifest& manifest) {
  const auto& meta = manifest.metadata;
  if (meta.is_object() && meta.contains("mos_min") && meta.contains("mos_max")) {
    MosScale s{meta.at("mos_min").get<double>(), meta.at("mos_max").get<double>()};
    if (s.max > s.min) return s;
  }
  if (manifest.records.empty()) return {};
  MosScale s{manifest.records.front().mos, manifest.records.front().mos};
  for (const auto& e : manifest.records) {
    s.min = std::min(s.min, e.mos);
    s.max = std::max(s.max, e.mos);
  }
  if (s.max <= s.min) s.max = s.min + 1.0;
  return s;
}

Dataset load_dataset(const Manifest& manifest, const std::vector<std::string>& ids, const MosScale& scale) {
  Dataset d;
  d.ids = ids;
  d.samples.reserve(ids.size());
  for (const auto& id : ids) {
    FeatureRecord rec = manifest.load(manifest.find(id));
    d.samples.push_back({{std::move(rec.stage3), std::move(rec.stage4)}, scale.normalize(rec.mos)});
  }
  return d;
}

std::string log_to_csv(const std::vector<LogRow>& log) {
  std::string out = "epoch,step,main,aux,z,total,lr\n";
  char line[256];
  for (const auto& r : log) {
    std::snprintf(line, sizeof(line), "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.step, r.loss.main,
                  r.loss.aux, r.loss.z, r.loss.total, r.lr);
    out += line;
  }
  return out;
}

TrainResult train(Model& model, const Dataset& data, const TrainConfig& config) {
  config.validate();
  if (data.samples.empty()) throw ConfigError("train: empty dataset");
  const ParameterList params = model.parameters();
  AdamState adam;
  TrainResult result;

  std::vector<std::size_t> order(data.samples.size());
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    const double lr = lr_at(epoch, config);
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      std::vector<const Sample*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&data.samples[order[i]]);

      model.zero_grad();
      BatchOutput out;
      try {
        out = batch_loss(model, batch, config.weights, true);
      } catch (const RoutingError& e) {
        // NaN gate logits: the forward pass has already diverged
        throw TrainingError("non-finite values at step " + std::to_string(result.steps) + ": " + e.what());
      }
      if (!std::isfinite(out.loss.total))
        throw TrainingError("non-finite loss at step " + std::to_string(result.steps));
      adam_step(params, adam, lr);
      result.log.push_back({epoch, result.steps, out.loss, lr});
      ++result.steps;
      if (config.max_steps && result.steps >= config.max_steps) return result;
    }
  }
  return result;
}

Evaluation evaluate(const Model& model, const Dataset& data) {
  Evaluation ev;
  for (const auto& s : data.samples) {
    ev.predictions.push_back(model.predict(s.features));
    ev.targets.push_back(s.target);
  }
  ev.srocc = srocc(ev.predictions, ev.targets);
  ev.plcc = plcc(ev.predictions, ev.targets);
  return ev;
}

}  // namespace lifeiqa
