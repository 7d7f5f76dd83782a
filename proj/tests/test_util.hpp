#pragma once

// Shared generators and independent oracles for the test suites. The oracles
// use plain loops and never call into the library's matmul/softmax paths.

#include "lifeiqa/tensor.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace lifeiqa::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      out[i * n + j] = s;
    }
  return out;
}

inline std::vector<double> naive_softmax(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  double z = 0.0;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z += (y[i] = std::exp(x[i] - m));
  for (double& v : y) v /= z;
  return y;
}

/// Affine map x·W + b evaluated element by element.
inline Tensor naive_affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor out = naive_matmul(x, w);
  for (std::size_t r = 0; r < out.dim(0); ++r)
    for (std::size_t c = 0; c < out.dim(1); ++c) out[r * out.dim(1) + c] += b[c];
  return out;
}

inline Tensor naive_relu(Tensor x) {
  for (double& v : x.values()) v = std::max(0.0, v);
  return x;
}

}  // namespace lifeiqa::test
