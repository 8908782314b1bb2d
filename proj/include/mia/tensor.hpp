#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mia/error.hpp"

namespace mia {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad; // empty until something flows into it
  bool requires_grad = false;
};

} // namespace detail

/// Dense row-major tensor of rank 1-3 holding 64-bit values.
///
/// A Tensor is a handle: copies share storage, which is what lets the tape
/// route gradients back to parameters. Use clone() for an independent copy.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : s_(std::make_shared<detail::TensorStorage>()) {
    validate_shape(shape);
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : s_(std::make_shared<detail::TensorStorage>()) {
    validate_shape(shape);
    if (data.size() != shape_numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return Tensor({rows, cols}, 0.0, requires_grad);
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> d;
    d.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      d.insert(d.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(d));
  }

  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->data.size(); }

  // Rank-1 tensors behave as a single row.
  std::size_t rows() const { return rank() == 1 ? 1 : s_->shape[rank() - 2]; }
  std::size_t cols() const { return s_->shape.back(); }

  std::span<double> data() { return s_->data; }
  std::span<const double> data() const { return s_->data; }
  std::vector<double>& values() { return s_->data; }
  const std::vector<double>& values() const { return s_->data; }

  double& operator[](std::size_t i) { return s_->data[i]; }
  double operator[](std::size_t i) const { return s_->data[i]; }
  double& at(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) const { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }

  // Gradient buffer, allocated on first use. Copies share it, so this is
  // available through a const handle.
  std::span<double> grad() const {
    if (s_->grad.empty()) s_->grad.assign(numel(), 0.0);
    return s_->grad;
  }
  std::vector<double> grad_or_zeros() const {
    return has_grad() ? s_->grad : std::vector<double>(numel(), 0.0);
  }
  void zero_grad() const { s_->grad.clear(); }

  Tensor clone() const {
    Tensor t(shape(), values(), requires_grad());
    return t;
  }

  // Same storage identity, used by the tape and tests.
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  bool all_finite() const {
    return std::all_of(s_->data.begin(), s_->data.end(),
                       [](double v) { return std::isfinite(v); });
  }

private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 3)
      throw ShapeError("tensor rank must be 1-3, got shape " + shape_str(shape));
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }

  std::shared_ptr<detail::TensorStorage> s_;
};

inline void require_finite(const Tensor& t, const std::string& name) {
  if (!t.all_finite()) throw NumericError("non-finite value in tensor '" + name + "'");
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

} // namespace mia
