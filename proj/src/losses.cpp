#include "lifeiqa/losses.hpp"

#include "lifeiqa/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lifeiqa {

namespace {

void require_pair(std::span<const double> a, std::span<const double> b, std::size_t min_len, const char* what) {
  if (a.size() != b.size())
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()));
  if (a.size() < min_len)
    throw std::invalid_argument(std::string(what) + ": needs at least " + std::to_string(min_len) + " values");
}

}  // namespace

double l1_main(std::span<const double> pred, std::span<const double> target) {
  require_pair(pred, target, 1, "l1_main");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

std::vector<double> l1_main_grad(std::span<const double> pred, std::span<const double> target) {
  require_pair(pred, target, 1, "l1_main_grad");
  const double inv = 1.0 / static_cast<double>(pred.size());
  std::vector<double> g(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    g[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
  }
  return g;
}

double load_balance_loss(const RoutingRecord& routing) {
  const std::size_t n = routing.num_tokens(), num_experts = routing.num_experts();
  double total = 0.0;
  for (std::size_t e = 0; e < num_experts; ++e) {
    double t = 0.0, p = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      t += routing.mask(i, e);
      p += routing.probs(i, e);
    }
    total += (t / static_cast<double>(n)) * (p / static_cast<double>(n));
  }
  return static_cast<double>(num_experts) * total;
}

Tensor load_balance_grad(const RoutingRecord& routing) {
  const std::size_t n = routing.num_tokens(), num_experts = routing.num_experts();
  const double scale = static_cast<double>(num_experts) / (static_cast<double>(n) * static_cast<double>(n));
  Tensor g_probs({n, num_experts});
  for (std::size_t e = 0; e < num_experts; ++e) {
    double t = 0.0;
    for (std::size_t i = 0; i < n; ++i) t += routing.mask(i, e);
    for (std::size_t i = 0; i < n; ++i) g_probs(i, e) = scale * t;
  }
  return softmax_backward(routing.probs, g_probs);
}

double z_loss(const Tensor& logits) {
  const Tensor lse = logsumexp_lastdim(logits);
  double s = 0.0;
  for (double v : lse.values()) s += v * v;
  return s / static_cast<double>(lse.size());
}

Tensor z_loss_grad(const Tensor& logits) {
  const Tensor lse = logsumexp_lastdim(logits);
  const Tensor p = softmax_lastdim(logits);
  const std::size_t n = logits.rows(), num_experts = logits.cols();
  Tensor g({n, num_experts});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t e = 0; e < num_experts; ++e) g(i, e) = 2.0 * lse[i] * p(i, e) / static_cast<double>(n);
  return g;
}

LossBreakdown total_loss(double main, double aux, double z, const LossWeights& weights) {
  return {main, aux, z, main + weights.aux * aux + weights.z * z};
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double plcc(std::span<const double> pred, std::span<const double> target) {
  require_pair(pred, target, 2, "plcc");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mt = std::accumulate(target.begin(), target.end(), 0.0) / n;
  double cov = 0.0, vp = 0.0, vt = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = pred[i] - mp, b = target[i] - mt;
    cov += a * b;
    vp += a * a;
    vt += b * b;
  }
  if (vp == 0.0 || vt == 0.0) throw MetricError("correlation undefined: zero variance");
  return std::clamp(cov / std::sqrt(vp * vt), -1.0, 1.0);
}

double srocc(std::span<const double> pred, std::span<const double> target) {
  require_pair(pred, target, 2, "srocc");
  const auto rp = average_ranks(pred);
  const auto rt = average_ranks(target);
  return plcc(rp, rt);
}

}  // namespace lifeiqa
