// Command-line front end: synthetic data, training, evaluation, gradient
// checks, and parameter-count tables.

#include "lifeiqa/data_io.hpp"
#include "lifeiqa/errors.hpp"
#include "lifeiqa/gradcheck.hpp"
#include "lifeiqa/model.hpp"
#include "lifeiqa/moe.hpp"
#include "lifeiqa/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lifeiqa;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

std::string format_count(std::uint64_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  std::size_t count = 16;
  std::uint64_t seed = 0;
  std::string dims = "14,14,16,7,7,32";
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  const SynthDims dims = parse_synth_dims(a.dims);
  const Manifest m = synth_generate(a.count, a.seed, dims, a.out);
  const json echo = {{"command", "synth"}, {"count", a.count}, {"seed", a.seed}, {"dims", a.dims}};
  write_file_atomic(fs::path(a.out) / "config.json", echo.dump(2) + "\n");
  std::cout << (fs::path(a.out) / "manifest.json").string() << "\n";
  return 0;
}

// ---- train / eval ----------------------------------------------------------

struct RunConfig {
  ModelConfig model = ModelConfig::small();
  TrainConfig train;
};

RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  json j = read_json(path);
  if (j.contains("config")) j = j.at("config");  // accept a config echo
  for (const auto& [key, _] : j.items())
    if (key != "preset" && key != "model" && key != "train") throw UsageError("unknown config key '" + key + "'");
  ModelConfig base = ModelConfig::small();
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "tiny") base = ModelConfig::tiny();
    else if (preset == "full") base = ModelConfig::full();
    else if (preset != "small") throw UsageError("unknown preset '" + preset + "'");
  }
  rc.model = j.contains("model") ? model_config_from_json(j.at("model"), base) : base;
  if (j.contains("train")) rc.train = train_config_from_json(j.at("train"));
  return rc;
}

json metrics_json(const std::vector<json>& runs) {
  std::vector<double> s, p;
  for (const auto& r : runs) {
    s.push_back(r.at("srocc").get<double>());
    p.push_back(r.at("plcc").get<double>());
  }
  const double ms = median_of_runs(s), mp = median_of_runs(p);
  return {{"srocc", ms}, {"plcc", mp}, {"runs", runs}, {"median_srocc", ms}, {"median_plcc", mp}};
}

struct TrainArgs {
  std::string manifest;
  std::uint64_t split_seed = 0;
  std::uint32_t run = 0;
  double train_fraction = 0.8;
  std::string config;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  const Manifest manifest = read_manifest(a.manifest);
  RunConfig rc = load_run_config(a.config);
  const SplitSpec spec{a.split_seed, a.train_fraction, a.run};
  const Split parts = split(manifest, spec);
  const MosScale scale = mos_scale(manifest);
  const Dataset train_set = load_dataset(manifest, parts.train, scale);
  const Dataset test_set = load_dataset(manifest, parts.test, scale);

  rc.model.stage3_channels = train_set.samples.front().features.stage3.dim(2);
  rc.model.stage4_channels = train_set.samples.front().features.stage4.dim(2);

  const fs::path out(a.out);
  const json echo = {{"command", "train"},
                     {"manifest", a.manifest},
                     {"split_seed", a.split_seed},
                     {"run", a.run},
                     {"train_fraction", a.train_fraction},
                     {"config", {{"model", to_json(rc.model)}, {"train", to_json(rc.train)}}}};
  write_file_atomic(out / "config.json", echo.dump(2) + "\n");

  Model model(rc.model, rc.train.seed);
  TrainResult result;
  try {
    result = train(model, train_set, rc.train);
  } catch (const TrainingError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    write_file_atomic(out / "log.csv", log_to_csv(result.log));
    return kExitFailure;
  }
  write_file_atomic(out / "log.csv", log_to_csv(result.log));
  write_checkpoint(model.to_checkpoint({{"split_seed", a.split_seed}, {"run", a.run}, {"mos_min", scale.min},
                                        {"mos_max", scale.max}, {"steps", result.steps}}),
                   out / "checkpoint.lifc");

  const Evaluation ev = evaluate(model, test_set);
  const json metrics =
      metrics_json({{{"run", a.run}, {"split_seed", a.split_seed}, {"srocc", ev.srocc}, {"plcc", ev.plcc}}});
  write_file_atomic(out / "metrics.json", metrics.dump(2) + "\n");
  std::cout << metrics.dump(2) << "\n";
  return 0;
}

struct EvalArgs {
  std::string manifest;
  std::string checkpoint;
  std::uint64_t split_seed = 0;
  std::uint32_t run = 0;
  double train_fraction = 0.8;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  const Manifest manifest = read_manifest(a.manifest);
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const ModelConfig config = model_config_from_json(ck.metadata.at("model"));
  Model model(config, 0);
  model.load(ck);

  const Split parts = split(manifest, {a.split_seed, a.train_fraction, a.run});
  const Dataset test_set = load_dataset(manifest, parts.test, mos_scale(manifest));
  const Evaluation ev = evaluate(model, test_set);
  const json metrics =
      metrics_json({{{"run", a.run}, {"split_seed", a.split_seed}, {"srocc", ev.srocc}, {"plcc", ev.plcc}}});
  if (!a.out.empty()) write_file_atomic(a.out, metrics.dump(2) + "\n");
  std::cout << metrics.dump(2) << "\n";
  return 0;
}

// ---- gradcheck -------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed) {
  GradcheckOptions options;
  options.seed = seed;
#ifdef LIFEIQA_INJECT_GRADIENT_FAULT
  options.flip_gamma_gradient = true;
#endif
  const GradcheckSuiteReport r = run_gradcheck_suite(options);
  std::printf("%-15s %6s %8s %14s %14s  %s\n", "group", "params", "entries", "max_rel_err", "max_|grad|", "status");
  for (const auto& g : r.groups)
    std::printf("%-15s %6zu %8zu %14.3e %14.3e  %s\n", g.name.c_str(), g.parameters, g.entries, g.max_rel_error,
                g.max_abs_gradient, g.passed ? "PASS" : "FAIL");
  std::printf("gamma closed-form error %.3e, finite-difference error %.3e (attempts %zu)\n",
              r.gamma_closed_form_error, r.gamma_fd_error, r.attempts);
  std::printf("%s\n", r.passed ? "all groups PASS" : "gradient check FAILED");
  return r.passed ? 0 : kExitFailure;
}

// ---- params ----------------------------------------------------------------

struct ParamsArgs {
  std::vector<std::size_t> experts = {2, 4, 8};
  std::size_t hidden = 1536;
  std::size_t dim = 384;
  std::size_t ffn_hidden = 2048;
};

int cmd_params(const ParamsArgs& a) {
  std::printf("%-26s %14s %9s %14s %9s\n", "block", "parameters", "millions", "with gate", "millions");
  const std::uint64_t ffn = ffn_param_count(a.dim, a.ffn_hidden);
  char label[64];
  std::snprintf(label, sizeof(label), "FFN(%zu, %zu)", a.dim, a.ffn_hidden);
  std::printf("%-26s %14s %9.2f\n", label, format_count(ffn).c_str(), static_cast<double>(ffn) / 1e6);
  for (std::size_t e : a.experts) {
    MoEConfig c;
    c.num_experts = e;
    c.expert_hidden = a.hidden;
    c.embed_dim = a.dim;
    const std::uint64_t n = experts_param_count(c);
    const std::uint64_t gated = n + gate_param_count(c);
    std::snprintf(label, sizeof(label), "MoE(%zu experts, %zu)", e, a.hidden);
    std::printf("%-26s %14s %9.2f %14s %9.2f\n", label, format_count(n).c_str(), static_cast<double>(n) / 1e6,
                format_count(gated).c_str(), static_cast<double>(gated) / 1e6);
  }
  return 0;
}

// ---- export-metrics --------------------------------------------------------

int cmd_export_metrics(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<json> runs;
  for (const auto& path : inputs) {
    const json doc = read_json(path);
    for (const auto& r : doc.at("runs")) runs.push_back(r);
  }
  if (runs.empty()) throw UsageError("no runs found in inputs");
  const json metrics = metrics_json(runs);
  if (!out.empty()) write_file_atomic(out, metrics.dump(2) + "\n");
  std::cout << metrics.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Life-IQA quality decoder: synthetic data, training, evaluation and verification"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic feature dataset with a planted label");
  synth->add_option("--count", synth_args.count, "Number of records")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_args.seed, "Random seed");
  synth->add_option("--dims", synth_args.dims, "h3,w3,c3,h4,w4,c4");
  synth->add_option("--out", synth_args.out, "Output directory")->required();

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train on one split and evaluate on its test part");
  train_cmd->add_option("--manifest", train_args.manifest)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--split-seed", train_args.split_seed);
  train_cmd->add_option("--run", train_args.run)->check(CLI::Range(0, 9));
  train_cmd->add_option("--train-fraction", train_args.train_fraction)->check(CLI::Range(0.0, 1.0));
  train_cmd->add_option("--config", train_args.config, "Config JSON or a previous config echo")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out, "Output directory")->required();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split's test part");
  eval_cmd->add_option("--manifest", eval_args.manifest)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split-seed", eval_args.split_seed);
  eval_cmd->add_option("--run", eval_args.run)->check(CLI::Range(0, 9));
  eval_cmd->add_option("--train-fraction", eval_args.train_fraction)->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--out", eval_args.out, "Metrics JSON path");

  std::uint64_t gradcheck_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  gradcheck->add_option("--seed", gradcheck_seed);

  ParamsArgs params_args;
  auto* params = app.add_subcommand("params", "Print exact FFN and MoE parameter counts");
  params->add_option("--experts", params_args.experts, "Expert counts")->check(CLI::PositiveNumber);
  params->add_option("--hidden", params_args.hidden, "Expert hidden width");
  params->add_option("--dim", params_args.dim, "Embedding dimension")->check(CLI::PositiveNumber);
  params->add_option("--ffn-hidden", params_args.ffn_hidden, "FFN hidden width");

  std::vector<std::string> metric_inputs;
  std::string metrics_out;
  auto* export_metrics = app.add_subcommand("export-metrics", "Aggregate per-run metrics and report medians");
  export_metrics->add_option("--inputs", metric_inputs, "metrics.json files")->required()->check(CLI::ExistingFile);
  export_metrics->add_option("--out", metrics_out, "Aggregated JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_args);
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(eval_args);
    if (*gradcheck) return cmd_gradcheck(gradcheck_seed);
    if (*params) return cmd_params(params_args);
    if (*export_metrics) return cmd_export_metrics(metric_inputs, metrics_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
