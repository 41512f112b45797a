#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "m2/errors.hpp"

namespace m2 {

// Dense row-major f64 tensor with an explicit shape; the single numeric
// currency of the project. Public kernels check their results for NaN/Inf
// and throw NumericError rather than let one propagate.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape); // zero-filled
  static Tensor from(std::vector<std::size_t> shape,
                     std::vector<double> values);

  const std::vector<std::size_t> &shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  // 2-D / 3-D views; shape is validated by the ops, not the accessors.
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 0 : shape_[1]; }

  double &at(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  double &at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double &operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  std::vector<double> &data() { return data_; }
  const std::vector<double> &data() const { return data_; }

  bool same_shape(const Tensor &other) const { return shape_ == other.shape_; }

private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Throws NumericError naming `op` if any element is NaN/Inf.
void ensure_finite(const Tensor &t, const char *op);

// Exact dense product with a fixed left-to-right summation over the inner
// dimension. a: [m x k], b: [k x n].
Tensor matmul(const Tensor &a, const Tensor &b);

// Numerically stable softmax (max subtraction) along `axis`.
Tensor softmax(const Tensor &x, std::size_t axis);

// Elementwise x * sigmoid(x).
Tensor silu(const Tensor &x);

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor hadamard(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &x, double s);
Tensor transpose(const Tensor &x); // 2-D only

double sigmoid(double x);

// Central-difference gradient of a scalar function:
// g_j = (f(x + eps e_j) - f(x - eps e_j)) / (2 eps). The gradient oracle
// used to certify analytic backward passes; keep it independent of them.
Tensor finite_diff_grad(const std::function<double(const Tensor &)> &f,
                        const Tensor &x, double eps);

} // namespace m2
