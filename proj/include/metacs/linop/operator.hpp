#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "metacs/core.hpp"

namespace metacs {

/// Interface implemented by every matrix-free operator. Implementations are
/// immutable after construction; apply/apply_adjoint may be called
/// concurrently.
class LinearOperatorBase {
 public:
  virtual ~LinearOperatorBase() = default;

  virtual Index rows() const = 0;
  virtual Index cols() const = 0;
  virtual void apply(const Vector& x, Vector& y) const = 0;
  virtual void apply_adjoint(const Vector& y, Vector& x) const = 0;
  virtual std::string name() const = 0;

  virtual ObjectDims input_dims() const { return {cols(), 1, 1}; }
  virtual SensorDims output_dims() const { return {rows(), 1, 1}; }
};

/// Shared, type-erased handle to an immutable operator.
class LinearOperator {
 public:
  LinearOperator() = default;
  explicit LinearOperator(std::shared_ptr<const LinearOperatorBase> impl) : impl_(std::move(impl)) {}

  Index rows() const { return impl_->rows(); }
  Index cols() const { return impl_->cols(); }
  ObjectDims input_dims() const { return impl_->input_dims(); }
  SensorDims output_dims() const { return impl_->output_dims(); }
  std::string name() const { return impl_->name(); }
  explicit operator bool() const { return static_cast<bool>(impl_); }

  Vector apply(const Vector& x) const {
    check_size(x, cols(), "apply");
    Vector y;
    impl_->apply(x, y);
    return y;
  }
  Vector adjoint(const Vector& y) const {
    check_size(y, rows(), "adjoint");
    Vector x;
    impl_->apply_adjoint(y, x);
    return x;
  }

  /// Downcast to a concrete implementation, or nullptr.
  template <class T>
  const T* target() const {
    return dynamic_cast<const T*>(impl_.get());
  }
  const std::shared_ptr<const LinearOperatorBase>& impl() const { return impl_; }

 private:
  static void check_size(const Vector& v, Index expected, const char* what) {
    if (v.size() != expected)
      throw ConfigError(std::string("operator ") + what + ": vector length " +
                        std::to_string(v.size()) + " != " + std::to_string(expected));
  }

  std::shared_ptr<const LinearOperatorBase> impl_;
};

namespace detail {

class ScaledIdentity final : public LinearOperatorBase {
 public:
  ScaledIdentity(Index n, double scale) : n_(n), scale_(scale) {}
  Index rows() const override { return n_; }
  Index cols() const override { return n_; }
  void apply(const Vector& x, Vector& y) const override { y = scale_ * x; }
  void apply_adjoint(const Vector& y, Vector& x) const override { x = scale_ * y; }
  std::string name() const override { return "identity"; }

 private:
  Index n_;
  double scale_;
};

class DenseOperator final : public LinearOperatorBase {
 public:
  explicit DenseOperator(Matrix m) : m_(std::move(m)) {}
  Index rows() const override { return m_.rows(); }
  Index cols() const override { return m_.cols(); }
  void apply(const Vector& x, Vector& y) const override { y.noalias() = m_ * x; }
  void apply_adjoint(const Vector& y, Vector& x) const override { x.noalias() = m_.transpose() * y; }
  std::string name() const override { return "dense"; }
  const Matrix& matrix() const { return m_; }

 private:
  Matrix m_;
};

class ScaledOperator final : public LinearOperatorBase {
 public:
  ScaledOperator(LinearOperator op, double scale) : op_(std::move(op)), scale_(scale) {}
  Index rows() const override { return op_.rows(); }
  Index cols() const override { return op_.cols(); }
  ObjectDims input_dims() const override { return op_.input_dims(); }
  SensorDims output_dims() const override { return op_.output_dims(); }
  void apply(const Vector& x, Vector& y) const override { y = scale_ * op_.apply(x); }
  void apply_adjoint(const Vector& y, Vector& x) const override { x = scale_ * op_.adjoint(y); }
  std::string name() const override { return "scaled(" + op_.name() + ")"; }

 private:
  LinearOperator op_;
  double scale_;
};

/// Vertical concatenation [A_0; A_1; ...] sharing one input space.
class StackedOperator final : public LinearOperatorBase {
 public:
  explicit StackedOperator(std::vector<LinearOperator> blocks) : blocks_(std::move(blocks)) {
    if (blocks_.empty()) throw ConfigError("stack: no blocks");
    for (const auto& b : blocks_) {
      if (b.cols() != blocks_.front().cols()) throw ConfigError("stack: column mismatch");
      rows_ += b.rows();
    }
  }
  Index rows() const override { return rows_; }
  Index cols() const override { return blocks_.front().cols(); }
  ObjectDims input_dims() const override { return blocks_.front().input_dims(); }
  SensorDims output_dims() const override {
    SensorDims d = blocks_.front().output_dims();
    if (d.shot_size() * static_cast<Index>(blocks_.size()) == rows_) {
      d.shots *= static_cast<Index>(blocks_.size());
      return d;
    }
    return {rows_, 1, 1};
  }
  void apply(const Vector& x, Vector& y) const override {
    y.resize(rows_);
    Index off = 0;
    for (const auto& b : blocks_) {
      y.segment(off, b.rows()) = b.apply(x);
      off += b.rows();
    }
  }
  void apply_adjoint(const Vector& y, Vector& x) const override {
    x = Vector::Zero(cols());
    Index off = 0;
    for (const auto& b : blocks_) {
      x += b.adjoint(y.segment(off, b.rows()));
      off += b.rows();
    }
  }
  std::string name() const override { return "stack"; }

 private:
  std::vector<LinearOperator> blocks_;
  Index rows_ = 0;
};

}  // namespace detail

inline LinearOperator make_identity(Index n, double scale = 1.0) {
  return LinearOperator(std::make_shared<detail::ScaledIdentity>(n, scale));
}

inline LinearOperator make_dense(Matrix m) {
  return LinearOperator(std::make_shared<detail::DenseOperator>(std::move(m)));
}

inline LinearOperator make_scaled(LinearOperator op, double scale) {
  return LinearOperator(std::make_shared<detail::ScaledOperator>(std::move(op), scale));
}

inline LinearOperator make_stacked(std::vector<LinearOperator> blocks) {
  return LinearOperator(std::make_shared<detail::StackedOperator>(std::move(blocks)));
}

/// Dense materialization by applying the operator to every canonical basis
/// vector. Test-scale only.
inline Matrix materialize(const LinearOperator& op) {
  Matrix m(op.rows(), op.cols());
  Vector e = Vector::Zero(op.cols());
  for (Index j = 0; j < op.cols(); ++j) {
    e[j] = 1.0;
    m.col(j) = op.apply(e);
    e[j] = 0.0;
  }
  return m;
}

inline Vector gaussian_vector(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

/// Relative adjoint mismatch |<Ax,v> - <x,A'v>| / (|Ax||v| + |x||A'v|)
/// for Gaussian x, v drawn from `seed`.
inline double dot_test(const LinearOperator& op, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Vector x = gaussian_vector(op.cols(), rng);
  const Vector v = gaussian_vector(op.rows(), rng);
  const Vector ax = op.apply(x);
  const Vector atv = op.adjoint(v);
  const double lhs = ax.dot(v);
  const double rhs = x.dot(atv);
  const double scale = ax.norm() * v.norm() + x.norm() * atv.norm();
  if (scale == 0.0) return 0.0;
  return std::abs(lhs - rhs) / scale;
}

inline constexpr double kOperatorNormSafety = 1.05;

/// Power iteration on A'A. Returns 1.05 * (estimate of |A|_2^2).
inline double operator_norm(const LinearOperator& op, int iters = 100, std::uint64_t seed = 0) {
  if (iters < 1) throw ConfigError("operator_norm: iters must be >= 1");
  std::mt19937_64 rng(seed);
  Vector v = gaussian_vector(op.cols(), rng);
  v.normalize();
  double estimate = 0.0;
  for (int k = 0; k < iters; ++k) {
    const Vector av = op.apply(v);
    estimate = av.squaredNorm();
    Vector w = op.adjoint(av);
    const double wn = w.norm();
    if (wn == 0.0) return 0.0;
    v = w / wn;
  }
  estimate = std::max(estimate, op.apply(v).squaredNorm());
  return kOperatorNormSafety * estimate;
}

}  // namespace metacs
