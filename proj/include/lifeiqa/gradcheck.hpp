#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace lifeiqa {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Fresh random points to try when Top-K routing or the L1 sign is unstable under ±step.
  std::size_t max_attempts = 20;
  /// Negates the analytic γ gradient; exercises the failure path.
  bool flip_gamma_gradient = false;
};

struct GradcheckGroup {
  std::string name;
  std::size_t parameters = 0;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_gradient = 0.0;
  bool passed = false;
};

struct GradcheckSuiteReport {
  std::vector<GradcheckGroup> groups;
  std::map<std::string, double> per_parameter;
  std::size_t attempts = 0;
  /// |analytic dL/dγ − sign(ŷ−y)·mean_i(x_i·w)|
  double gamma_closed_form_error = 0.0;
  /// |analytic dL/dγ − central difference|
  double gamma_fd_error = 0.0;
  bool passed = false;
};

/// Group label for a parameter name, e.g. "decoder.layer0.gcn.adjacency2" → "gcn_adjacency".
std::string parameter_group(const std::string& name);

/// Builds the tiny model, evaluates L_total on one synthetic record in double
/// precision and compares every parameter's analytic gradient with central
/// differences.
GradcheckSuiteReport run_gradcheck_suite(const GradcheckOptions& options);

}  // namespace lifeiqa
