#include "m2/tensor.hpp"

#include <cmath>
#include <string>

namespace m2 {

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  std::size_t n = 1;
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw DimensionError("tensor dimensions must be positive");
    }
    n *= d;
  }
  data_.assign(shape_.empty() ? 0 : n, 0.0);
}

Tensor Tensor::from(std::vector<std::size_t> shape,
                    std::vector<double> values) {
  Tensor t(std::move(shape));
  if (t.size() != values.size()) {
    throw DimensionError("tensor data length " +
                         std::to_string(values.size()) +
                         " does not match shape product " +
                         std::to_string(t.size()));
  }
  t.data_ = std::move(values);
  ensure_finite(t, "Tensor::from");
  return t;
}

void ensure_finite(const Tensor &t, const char *op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
}

Tensor matmul(const Tensor &a, const Tensor &b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 tensors");
  }
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner dimensions disagree: " +
                         std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += a.at(i, p) * b.at(p, j);
      }
      out.at(i, j) = acc;
    }
  }
  ensure_finite(out, "matmul");
  return out;
}

Tensor softmax(const Tensor &x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(x.rank()));
  }
  if (x.size() == 0) {
    throw DimensionError("softmax of an empty tensor");
  }
  const auto &shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  const std::size_t m = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];

  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * m * inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < m; ++j) {
        mx = std::max(mx, x[base + j * inner]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < m; ++j) {
        out[base + j * inner] /= denom;
      }
    }
  }
  ensure_finite(out, "softmax");
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor silu(const Tensor &x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] * sigmoid(x[i]);
  }
  ensure_finite(out, "silu");
  return out;
}

namespace {

Tensor elementwise(const Tensor &a, const Tensor &b, const char *op,
                   double (*fn)(double, double)) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + " shape mismatch");
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = fn(a[i], b[i]);
  }
  ensure_finite(out, op);
  return out;
}

} // namespace

Tensor add(const Tensor &a, const Tensor &b) {
  return elementwise(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor &a, const Tensor &b) {
  return elementwise(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor hadamard(const Tensor &a, const Tensor &b) {
  return elementwise(a, b, "hadamard",
                     [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor &x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] * s;
  }
  ensure_finite(out, "scale");
  return out;
}

Tensor transpose(const Tensor &x) {
  if (x.rank() != 2) {
    throw DimensionError("transpose expects a rank-2 tensor");
  }
  Tensor out({x.cols(), x.rows()});
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out.at(j, i) = x.at(i, j);
    }
  }
  return out;
}

Tensor finite_diff_grad(const std::function<double(const Tensor &)> &f,
                        const Tensor &x, double eps) {
  if (!(eps > 0.0)) {
    throw ConfigError("finite_diff_grad requires eps > 0");
  }
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double orig = probe[j];
    probe[j] = orig + eps;
    const double fp = f(probe);
    probe[j] = orig - eps;
    const double fm = f(probe);
    probe[j] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function evaluation");
    }
    grad[j] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

} // namespace m2
