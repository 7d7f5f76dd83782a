#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lifeiqa {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);

/// Dense row-major array of doubles with shape metadata.
///
/// All computation in this library runs in double precision; the on-disk
/// feature format stores float32 and widens on read.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  /// Builds a 2-D tensor from nested rows, e.g. `Tensor::matrix({{1, 2}, {3, 4}})`.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Rows/cols of a rank-2 tensor.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * shape_.back() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_.back() + c]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) noexcept;
  double at(std::size_t i, std::size_t j, std::size_t k) const noexcept;

  std::span<double> row(std::size_t r) noexcept;
  std::span<const double> row(std::size_t r) const noexcept;

  void fill(double v);
  Tensor reshaped(Shape shape) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

/// Learnable tensor with its accumulated gradient.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

using ParameterList = std::vector<Parameter*>;

// ---- forward ops -----------------------------------------------------------

/// a[m×k] · b[k×n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// aᵀ · b for a[k×m], b[k×n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a · bᵀ for a[m×k], b[n×k]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Gradients of matmul(a, b) for upstream g: {g·bᵀ, aᵀ·g}.
std::pair<Tensor, Tensor> matmul_backward(const Tensor& a, const Tensor& b, const Tensor& g);

/// Adds a length-n bias vector to each row of an m×n matrix.
Tensor add_row_bias(Tensor x, const Tensor& bias);
/// Column sums of an m×n matrix (the bias gradient).
Tensor sum_rows(const Tensor& g);

/// Softmax over the last axis with max subtraction; −∞ entries map to exactly 0.
/// Throws RoutingError when a row has no finite entry.
Tensor softmax_lastdim(const Tensor& x);
/// Given y = softmax(x) and dL/dy, returns dL/dx.
Tensor softmax_backward(const Tensor& y, const Tensor& grad_y);
/// log Σ exp over the last axis, stabilized. Shape drops the last axis.
Tensor logsumexp_lastdim(const Tensor& x);

Tensor relu(const Tensor& x);
/// Passes g where x > 0; the subgradient at 0 is 0.
Tensor relu_backward(const Tensor& x, const Tensor& g);

/// Per-channel spatial mean of an h×w×c map, returns [c].
Tensor global_average_pool(const Tensor& x);

/// Indices of the k largest entries, ascending by index. Ties go to the lower index.
std::vector<std::size_t> topk_indices(std::span<const double> x, std::size_t k);

// ---- finite-difference oracle ----------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::map<std::string, double> per_parameter;
};

/// Compares analytic gradients against central differences.
///
/// `loss` evaluates the scalar objective at the current parameter values.
/// `loss_with_grad` zeroes gradients, evaluates, and back-propagates into
/// every Parameter::grad. The per-coordinate error is
/// |analytic − numeric| / max(1, |analytic|, |numeric|).
GradCheckReport gradient_check(const ParameterList& params,
                               const std::function<double()>& loss,
                               const std::function<double()>& loss_with_grad,
                               double step);

}  // namespace lifeiqa
