#include "lifeiqa/tensor.hpp"

#include "lifeiqa/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace lifeiqa {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2)
    throw DimensionError(std::string(what) + ": expected a matrix, got shape " + to_string(t.shape()));
}

ConstMap view(const Tensor& t) { return ConstMap(t.data(), t.rows(), t.cols()); }
MutMap view(Tensor& t) { return MutMap(t.data(), t.rows(), t.cols()); }

std::size_t last_dim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0)
    throw DimensionError("last dimension must be at least 1, got shape " + to_string(x.shape()));
  return x.shape().back();
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size())
    throw DimensionError("shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                         " values");
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return shape_[1];
}

double& Tensor::at(std::size_t i, std::size_t j, std::size_t k) noexcept {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const noexcept {
  return data_[(i * shape_[1] + j) * shape_[2] + k];
}

std::span<double> Tensor::row(std::size_t r) noexcept {
  const std::size_t n = shape_.back();
  return std::span<double>(data_).subspan(r * n, n);
}

std::span<const double> Tensor::row(std::size_t r) const noexcept {
  const std::size_t n = shape_.back();
  return std::span<const double>(data_).subspan(r * n, n);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (shape_ != other.shape_)
    throw DimensionError("cannot add " + to_string(other.shape_) + " to " + to_string(shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }

Tensor operator-(Tensor a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("cannot subtract " + to_string(b.shape()) + " from " + to_string(a.shape()));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] -= b[i];
  return a;
}

Tensor operator*(Tensor a, double s) { return a *= s; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("cannot compare " + to_string(a.shape()) + " with " + to_string(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return std::isfinite(v); });
}

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape()) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape());
  grad.fill(0.0);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " + to_string(a.shape()) + " · " +
                         to_string(b.shape()));
  Tensor out({a.rows(), b.cols()});
  if (a.cols() > 0) view(out).noalias() = view(a) * view(b);
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows())
    throw DimensionError("matmul_tn: row counts differ, " + to_string(a.shape()) + "ᵀ · " +
                         to_string(b.shape()));
  Tensor out({a.cols(), b.cols()});
  if (a.rows() > 0) view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: column counts differ, " + to_string(a.shape()) + " · " +
                         to_string(b.shape()) + "ᵀ");
  Tensor out({a.rows(), b.rows()});
  if (a.cols() > 0) view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  view(out) = view(a).transpose();
  return out;
}

std::pair<Tensor, Tensor> matmul_backward(const Tensor& a, const Tensor& b, const Tensor& g) {
  return {matmul_nt(g, b), matmul_tn(a, g)};
}

Tensor add_row_bias(Tensor x, const Tensor& bias) {
  require_matrix(x, "add_row_bias");
  if (bias.size() != x.cols())
    throw DimensionError("bias " + to_string(bias.shape()) + " does not fit rows of " + to_string(x.shape()));
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += bias[c];
  return x;
}

Tensor sum_rows(const Tensor& g) {
  require_matrix(g, "sum_rows");
  Tensor out({g.cols()});
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) out[c] += g(r, c);
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t n = last_dim(x);
  Tensor y(x.shape());
  for (std::size_t base = 0; base < x.size(); base += n) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, x[base + j]);
    if (!std::isfinite(m)) throw RoutingError("softmax row " + std::to_string(base / n) + " has no finite entry");
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(x[base + j] - m);
      y[base + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < n; ++j) y[base + j] /= z;
  }
  return y;
}

Tensor softmax_backward(const Tensor& y, const Tensor& grad_y) {
  if (y.shape() != grad_y.shape())
    throw DimensionError("softmax_backward: " + to_string(y.shape()) + " vs " + to_string(grad_y.shape()));
  const std::size_t n = last_dim(y);
  Tensor gx(y.shape());
  for (std::size_t base = 0; base < y.size(); base += n) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += y[base + j] * grad_y[base + j];
    for (std::size_t j = 0; j < n; ++j) gx[base + j] = y[base + j] * (grad_y[base + j] - dot);
  }
  return gx;
}

Tensor logsumexp_lastdim(const Tensor& x) {
  const std::size_t n = last_dim(x);
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  for (std::size_t base = 0, r = 0; base < x.size(); base += n, ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) m = std::max(m, x[base + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[base + j] - m);
    out[r] = m + std::log(z);
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& g) {
  if (x.shape() != g.shape())
    throw DimensionError("relu_backward: " + to_string(x.shape()) + " vs " + to_string(g.shape()));
  Tensor gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > 0.0 ? g[i] : 0.0;
  return gx;
}

Tensor global_average_pool(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("global_average_pool expects h×w×c, got " + to_string(x.shape()));
  const std::size_t positions = x.dim(0) * x.dim(1);
  const std::size_t c = x.dim(2);
  if (positions == 0) throw DimensionError("global_average_pool: empty spatial extent");
  Tensor out({c});
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t k = 0; k < c; ++k) out[k] += x[p * c + k];
  out *= 1.0 / static_cast<double>(positions);
  return out;
}

std::vector<std::size_t> topk_indices(std::span<const double> x, std::size_t k) {
  if (k < 1 || k > x.size())
    throw ConfigError("topk: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(x.size()) + "]");
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // stable_sort keeps the lower index first among equal values
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

GradCheckReport gradient_check(const ParameterList& params,
                               const std::function<double()>& loss,
                               const std::function<double()>& loss_with_grad,
                               double step) {
  if (!(step > 0.0)) throw ConfigError("gradient_check: step must be positive");
  loss_with_grad();

  GradCheckReport report;
  for (Parameter* p : params) {
    double worst = 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double original = p->value[i];
      p->value[i] = original + step;
      const double plus = loss();
      p->value[i] = original - step;
      const double minus = loss();
      p->value[i] = original;
      if (!std::isfinite(plus) || !std::isfinite(minus))
        throw OracleError("non-finite loss while perturbing " + p->name + "[" + std::to_string(i) + "]");

      const double numeric = (plus - minus) / (2.0 * step);
      const double analytic = p->grad[i];
      const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      const double err = std::abs(analytic - numeric) / denom;
      if (err > worst) worst = err;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_parameter = p->name;
        report.worst_index = i;
      }
    }
    report.per_parameter[p->name] = worst;
  }
  return report;
}

}  // namespace lifeiqa
