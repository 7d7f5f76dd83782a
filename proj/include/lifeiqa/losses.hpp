#pragma once

#include "lifeiqa/moe.hpp"
#include "lifeiqa/tensor.hpp"

#include <span>
#include <vector>

namespace lifeiqa {

struct LossWeights {
  double aux = 0.01;   // λ1
  double z = 0.001;    // λ2
};

struct LossBreakdown {
  double main = 0.0;
  double aux = 0.0;
  double z = 0.0;
  double total = 0.0;
};

/// Mean absolute error. Throws std::invalid_argument on empty or mismatched input.
double l1_main(std::span<const double> pred, std::span<const double> target);
/// d(l1_main)/d(pred); the subgradient at zero error is 0.
std::vector<double> l1_main_grad(std::span<const double> pred, std::span<const double> target);

/// N_E · Σ_e t̂_e·p̂_e with t̂ the mean mask and p̂ the mean dense probability.
double load_balance_loss(const RoutingRecord& routing);
/// Gradient w.r.t. the gate logits, flowing through p̂ only (the mask is constant).
Tensor load_balance_grad(const RoutingRecord& routing);

/// Mean over tokens of (log Σ_e exp g_e)².
double z_loss(const Tensor& logits);
Tensor z_loss_grad(const Tensor& logits);

LossBreakdown total_loss(double main, double aux, double z, const LossWeights& weights);

/// Ranks with ties resolved to the average of their positions (1-based).
std::vector<double> average_ranks(std::span<const double> x);

/// Spearman rank-order correlation. Throws MetricError when either side has
/// no rank variance.
double srocc(std::span<const double> pred, std::span<const double> target);
/// Pearson linear correlation. Throws MetricError on zero variance.
double plcc(std::span<const double> pred, std::span<const double> target);

}  // namespace lifeiqa
