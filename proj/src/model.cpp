#include "lifeiqa/model.hpp"

#include "lifeiqa/errors.hpp"

#include <map>
#include <set>

namespace lifeiqa {

ModelConfig ModelConfig::full() {
  ModelConfig c;
  c.decoder = DecoderConfig{};
  c.moe = MoEConfig{};
  return c;
}

ModelConfig ModelConfig::small() {
  ModelConfig c;
  c.decoder.num_layers = 2;
  c.decoder.num_queries = 6;
  c.decoder.embed_dim = 64;
  c.decoder.num_heads = 4;
  c.decoder.ffn_hidden = 128;
  c.decoder.grid_side = 6;
  c.moe.num_experts = 4;
  c.moe.top_k = 2;
  c.moe.expert_hidden = 96;
  c.moe.embed_dim = 64;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.decoder.num_layers = 1;
  c.decoder.num_queries = 3;
  c.decoder.embed_dim = 8;
  c.decoder.num_heads = 2;
  c.decoder.ffn_hidden = 5;
  c.decoder.grid_side = 2;
  c.moe.num_experts = 3;
  c.moe.top_k = 2;
  c.moe.expert_hidden = 5;
  c.moe.embed_dim = 8;
  c.stage3_channels = 3;
  c.stage4_channels = 5;
  return c;
}

void ModelConfig::validate() const {
  decoder.validate();
  moe.validate();
  if (moe.embed_dim != decoder.embed_dim) throw ConfigError("MoE embed_dim must equal decoder embed_dim");
  if (stage3_channels < 1 || stage4_channels < 1) throw ConfigError("stage channel counts must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_layers", c.decoder.num_layers},
          {"num_queries", c.decoder.num_queries},
          {"embed_dim", c.decoder.embed_dim},
          {"num_heads", c.decoder.num_heads},
          {"ffn_hidden", c.decoder.ffn_hidden},
          {"grid_side", c.decoder.grid_side},
          {"num_experts", c.moe.num_experts},
          {"top_k", c.moe.top_k},
          {"expert_hidden", c.moe.expert_hidden},
          {"stage3_channels", c.stage3_channels},
          {"stage4_channels", c.stage4_channels}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  static const std::set<std::string> known = {"num_layers",  "num_queries", "embed_dim",     "num_heads",
                                              "ffn_hidden",  "grid_side",   "num_experts",   "top_k",
                                              "expert_hidden", "stage3_channels", "stage4_channels"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown model config key '" + key + "'");
  auto get = [&](const char* key, std::size_t& field) {
    if (j.contains(key)) field = j.at(key).get<std::size_t>();
  };
  get("num_layers", c.decoder.num_layers);
  get("num_queries", c.decoder.num_queries);
  get("embed_dim", c.decoder.embed_dim);
  get("num_heads", c.decoder.num_heads);
  get("ffn_hidden", c.decoder.ffn_hidden);
  get("grid_side", c.decoder.grid_side);
  get("num_experts", c.moe.num_experts);
  get("top_k", c.moe.top_k);
  get("expert_hidden", c.moe.expert_hidden);
  get("stage3_channels", c.stage3_channels);
  get("stage4_channels", c.stage4_channels);
  c.moe.embed_dim = c.decoder.embed_dim;
  c.validate();
  return c;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  decoder = Decoder(config_.decoder, config_.stage3_channels, config_.stage4_channels, rng);
  head = MoEHead(config_.moe, rng);
}

double Model::forward(const StageFeatures& features, Trace* trace) const {
  if (trace) {
    const Tensor tokens = decoder.forward(features, &trace->decoder);
    return head.forward(tokens, &trace->head);
  }
  return head.forward(decoder.forward(features));
}

void Model::backward(const Trace& trace, double grad_score, const Tensor& grad_logits) {
  const Tensor g_tokens = head.backward(trace.head, grad_score, grad_logits);
  decoder.backward(trace.decoder, g_tokens);
}

ParameterList Model::parameters() {
  ParameterList out;
  decoder.collect(out);
  head.collect(out);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  ParameterList mut = const_cast<Model*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

void Model::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

Checkpoint Model::to_checkpoint(nlohmann::json metadata) const {
  Checkpoint ck;
  metadata["model"] = to_json(config_);
  ck.metadata = std::move(metadata);
  for (const Parameter* p : parameters()) ck.tensors.emplace_back(p->name, p->value);
  return ck;
}

void Model::load(const Checkpoint& checkpoint) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : checkpoint.tensors) by_name[name] = &t;
  for (Parameter* p : parameters()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + p->name);
    if (it->second->shape() != p->value.shape())
      throw FormatError("checkpoint shape " + to_string(it->second->shape()) + " for " + p->name +
                        " differs from model shape " + to_string(p->value.shape()));
    p->value = *it->second;
  }
}

BatchOutput batch_loss(Model& model, std::span<const Sample* const> batch, const LossWeights& weights,
                       bool accumulate_grad) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  BatchOutput out;
  std::vector<Model::Trace> traces(batch.size());
  std::vector<double> targets;
  double aux = 0.0, z = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    out.predictions.push_back(model.forward(batch[b]->features, &traces[b]));
    targets.push_back(batch[b]->target);
    aux += load_balance_loss(traces[b].head.routing);
    z += z_loss(traces[b].head.routing.logits);
  }
  out.loss = total_loss(l1_main(out.predictions, targets), aux * inv_b, z * inv_b, weights);

  if (accumulate_grad) {
    const std::vector<double> g_pred = l1_main_grad(out.predictions, targets);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const RoutingRecord& routing = traces[b].head.routing;
      Tensor g_logits = load_balance_grad(routing) * (weights.aux * inv_b);
      g_logits += z_loss_grad(routing.logits) * (weights.z * inv_b);
      model.backward(traces[b], g_pred[b], g_logits);
    }
  }
  return out;
}

}  // namespace lifeiqa
