#include "lifeiqa/gradcheck.hpp"

#include "lifeiqa/errors.hpp"
#include "lifeiqa/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace lifeiqa {

namespace {

const std::vector<std::string>& group_order() {
  static const std::vector<std::string> order = {
      "query_init", "stage4_proj", "stage3_proj", "gcn_adjacency", "gcn_weight", "attention", "ffn",
      "layer_norm", "gate_weight", "gate_bias",   "experts",       "gamma",      "regressor"};
  return order;
}

Sample random_sample(const ModelConfig& config, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  auto fill = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = noise(rng);
    return t;
  };
  const std::size_t side3 = config.decoder.grid_side * 2;
  Sample s;
  s.features.stage3 = fill({side3, side3, config.stage3_channels});
  s.features.stage4 = fill({2, 2, config.stage4_channels});
  s.target = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return s;
}

}  // namespace

std::string parameter_group(const std::string& name) {
  auto has = [&](const char* s) { return name.find(s) != std::string::npos; };
  if (has("query_init")) return "query_init";
  if (has("stage4_proj")) return "stage4_proj";
  if (has("stage3_proj")) return "stage3_proj";
  if (has(".gcn.adjacency")) return "gcn_adjacency";
  if (has(".gcn.weight")) return "gcn_weight";
  if (has(".attention.")) return "attention";
  if (has(".ffn.")) return "ffn";
  if (has(".ln_")) return "layer_norm";
  if (has("head.gate.weight")) return "gate_weight";
  if (has("head.gate.bias")) return "gate_bias";
  if (has("head.expert")) return "experts";
  if (has("head.gamma")) return "gamma";
  if (has("head.regressor")) return "regressor";
  return "other";
}

GradcheckSuiteReport run_gradcheck_suite(const GradcheckOptions& options) {
  const ModelConfig config = ModelConfig::tiny();
  const LossWeights weights;
  std::mt19937_64 rng(options.seed);

  GradcheckSuiteReport report;
  for (std::size_t attempt = 0; attempt < options.max_attempts; ++attempt) {
    report.attempts = attempt + 1;
    Model model(config, rng());
    const Sample sample = random_sample(config, rng);
    const Sample* batch[] = {&sample};

    Model::Trace base;
    const double base_score = model.forward(sample.features, &base);
    const Tensor base_mask = base.head.routing.mask;
    const double base_sign = base_score > sample.target ? 1.0 : -1.0;

    bool unstable = std::abs(base_score - sample.target) < 1e-3;
    auto loss = [&]() {
      Model::Trace t;
      const double score = model.forward(sample.features, &t);
      if (t.head.routing.mask != base_mask || (score > sample.target ? 1.0 : -1.0) != base_sign) unstable = true;
      return batch_loss(model, batch, weights, false).loss.total;
    };
    auto loss_with_grad = [&]() {
      model.zero_grad();
      const double l = batch_loss(model, batch, weights, true).loss.total;
      if (options.flip_gamma_gradient) model.head.gamma.grad *= -1.0;
      return l;
    };

    const ParameterList params = model.parameters();
    const GradCheckReport fd = gradient_check(params, loss, loss_with_grad, options.step);
    if (unstable) continue;

    report.per_parameter = fd.per_parameter;
    report.groups.clear();
    for (const auto& name : group_order()) report.groups.push_back({name});
    for (const Parameter* p : params) {
      const std::string g = parameter_group(p->name);
      auto it = std::find_if(report.groups.begin(), report.groups.end(), [&](const auto& x) { return x.name == g; });
      if (it == report.groups.end()) it = report.groups.insert(report.groups.end(), GradcheckGroup{g});
      it->parameters += 1;
      it->entries += p->value.size();
      it->max_rel_error = std::max(it->max_rel_error, fd.per_parameter.at(p->name));
      for (double v : p->grad.values()) it->max_abs_gradient = std::max(it->max_abs_gradient, std::abs(v));
    }

    // dL/dγ = sign(ŷ − y) · mean_i(x_i · w); γ does not reach the routing losses.
    const Tensor& x = base.head.input;
    const Tensor& w = model.head.regressor.weight.value;
    double mean_xw = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t c = 0; c < x.cols(); ++c) mean_xw += x(i, c) * w[c];
    mean_xw /= static_cast<double>(x.rows());
    const double analytic_gamma = model.head.gamma.grad[0];
    report.gamma_closed_form_error = std::abs(analytic_gamma - base_sign * mean_xw);

    Parameter& gamma = model.head.gamma;
    const double g0 = gamma.value[0];
    gamma.value[0] = g0 + options.step;
    const double plus = loss();
    gamma.value[0] = g0 - options.step;
    const double minus = loss();
    gamma.value[0] = g0;
    report.gamma_fd_error = std::abs(analytic_gamma - (plus - minus) / (2.0 * options.step));

    report.passed = true;
    for (auto& g : report.groups) {
      g.passed = g.parameters > 0 && g.max_rel_error < options.tolerance;
      report.passed = report.passed && g.passed;
    }
    return report;
  }
  throw OracleError("gradcheck: no point with stable routing found in " + std::to_string(options.max_attempts) +
                    " attempts");
}

}  // namespace lifeiqa
