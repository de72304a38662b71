#pragma once

// Dense 64-bit tensors and the handful of differentiable operations the model
// needs. Each op has an explicit forward and backward; backward functions
// accumulate into Parameter::grad and return the gradient w.r.t. their input.
// All reductions run left to right so results are bitwise reproducible.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lpf/errors.hpp"

namespace lpf {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    data_.assign(count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * shape_[1], shape_[1]};
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
  }

  // Bitwise comparison of shape and contents (so -0.0 != 0.0 and NaN == NaN with the same payload).
  friend bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape_ != b.shape_) return false;
    return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), [](double x, double y) {
      return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
    });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  static std::size_t count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  Shape shape_;
  std::vector<double> data_;
};

// A trainable tensor with its gradient accumulator and Adam moments.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;
  std::uint64_t step_count = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.shape()),
        adam_m(value.shape()),
        adam_v(value.shape()) {}

  const Shape& shape() const noexcept { return value.shape(); }
  void zero_grad() { grad.fill(0.0); }
};

namespace detail {

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + " must be a matrix, got shape " + shape_str(t.shape()));
  }
}

inline void check_linear_shapes(const Tensor& x, const Parameter& w, const Parameter& b) {
  require_matrix(x, "linear input");
  require_matrix(w.value, "linear weight");
  if (b.value.rank() != 1) {
    throw ShapeError("linear bias must be a vector, got " + shape_str(b.shape()));
  }
  if (x.cols() != w.value.rows() || w.value.cols() != b.value.dim(0)) {
    throw ShapeError("linear shape mismatch: x " + shape_str(x.shape()) + ", W " +
                     shape_str(w.shape()) + ", b " + shape_str(b.shape()));
  }
}

}  // namespace detail

// out[i,j] = sum_d x[i,d] * W[d,j] + b[j]
inline Tensor linear(const Tensor& x, const Parameter& w, const Parameter& b) {
  detail::check_linear_shapes(x, w, b);
  const std::size_t n = x.rows(), d_in = x.cols(), d_out = w.value.cols();
  Tensor out = Tensor::matrix(n, d_out);
  for (std::size_t i = 0; i < n; ++i) {
    auto o = out.row(i);
    for (std::size_t j = 0; j < d_out; ++j) o[j] = 0.0;
    for (std::size_t d = 0; d < d_in; ++d) {
      const double xv = x(i, d);
      const auto wr = w.value.row(d);
      for (std::size_t j = 0; j < d_out; ++j) o[j] += xv * wr[j];
    }
    for (std::size_t j = 0; j < d_out; ++j) o[j] += b.value[j];
  }
  return out;
}

// Accumulates dL/dW and dL/db; returns dL/dx.
inline Tensor linear_backward(const Tensor& x, Parameter& w, Parameter& b, const Tensor& grad_out) {
  detail::check_linear_shapes(x, w, b);
  if (grad_out.rank() != 2 || grad_out.rows() != x.rows() || grad_out.cols() != w.value.cols()) {
    throw ShapeError("linear_backward: upstream gradient shape " + shape_str(grad_out.shape()));
  }
  const std::size_t n = x.rows(), d_in = x.cols(), d_out = w.value.cols();
  Tensor grad_x = Tensor::matrix(n, d_in);
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = grad_out.row(i);
    for (std::size_t d = 0; d < d_in; ++d) {
      const double xv = x(i, d);
      auto gw = w.grad.row(d);
      const auto wr = w.value.row(d);
      double acc = 0.0;
      for (std::size_t j = 0; j < d_out; ++j) {
        gw[j] += xv * g[j];
        acc += wr[j] * g[j];
      }
      grad_x(i, d) = acc;
    }
    for (std::size_t j = 0; j < d_out; ++j) b.grad[j] += g[j];
  }
  return grad_x;
}

inline Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

// Subgradient at 0 is 0.
inline Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  if (x.shape() != grad_out.shape()) {
    throw ShapeError("relu_backward: " + shape_str(x.shape()) + " vs " + shape_str(grad_out.shape()));
  }
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(x[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

// Hard stop-gradient node. Forward is the identity; there is no backward.
inline Tensor detach(const Tensor& x) { return x; }

// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& logits) {
  detail::require_matrix(logits, "softmax input");
  Tensor out = logits;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : r) v /= sum;
  }
  return out;
}

// log softmax(z)[t] for one row.
inline double log_softmax_at(std::span<const double> z, std::size_t t) {
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  return (z[t] - mx) - std::log(sum);
}

struct LossGrad {
  double loss = 0.0;
  Tensor grad;  // dL/dlogits
};

namespace detail {

inline void check_ce_inputs(const Tensor& logits, std::span<const std::uint32_t> targets,
                            std::span<const double> weights) {
  require_matrix(logits, "cross-entropy logits");
  if (targets.size() != logits.rows() || weights.size() != logits.rows()) {
    throw ShapeError("cross-entropy: batch of " + std::to_string(logits.rows()) + " logits rows, " +
                     std::to_string(targets.size()) + " targets, " + std::to_string(weights.size()) +
                     " weights");
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] >= logits.cols()) {
      throw InvalidArgument("target " + std::to_string(targets[i]) + " out of range for " +
                            std::to_string(logits.cols()) + " classes (row " + std::to_string(i) +
                            ")");
    }
  }
}

}  // namespace detail

// -(1/B) * sum_i w_i * log softmax(logits)[i, t_i]. Weights are constants.
inline double weighted_ce(const Tensor& logits, std::span<const std::uint32_t> targets,
                          std::span<const double> weights) {
  detail::check_ce_inputs(logits, targets, weights);
  const std::size_t n = logits.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    total += weights[i] * -log_softmax_at(logits.row(i), targets[i]);
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

// Loss plus dL/dlogits = (w_i / B) * (softmax - onehot).
inline LossGrad weighted_ce_with_grad(const Tensor& logits, std::span<const std::uint32_t> targets,
                                      std::span<const double> weights) {
  LossGrad out;
  out.loss = weighted_ce(logits, targets, weights);
  out.grad = softmax(logits);
  const double inv_n = logits.rows() == 0 ? 0.0 : 1.0 / static_cast<double>(logits.rows());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto g = out.grad.row(i);
    g[targets[i]] -= 1.0;
    const double scale = weights[i] * inv_n;
    for (double& v : g) v *= scale;
  }
  return out;
}

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction, in place. Gradients are left untouched.
inline void adam_step(std::span<Parameter* const> params, const AdamConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw InvalidArgument("adam: learning rate must be positive");
  for (Parameter* p : params) {
    ++p->step_count;
    const double t = static_cast<double>(p->step_count);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      double& m = p->adam_m[i];
      double& v = p->adam_v[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m / c1;
      const double v_hat = v / c2;
      p->value[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

inline void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

// Compares analytic gradients against central differences. `loss` evaluates the
// scalar at the current parameter values; `backward` accumulates its analytic
// gradient into Parameter::grad. Returns the max over all entries of
// |analytic - numeric| / max(1, |numeric|). Parameter values are restored exactly.
template <class LossFn, class BackwardFn>
double grad_check(std::span<Parameter* const> params, LossFn&& loss, BackwardFn&& backward,
                  double h = 1e-5) {
  zero_grads(params);
  backward();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = loss();
      p.value[i] = orig - h;
      const double down = loss();
      p.value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace lpf
