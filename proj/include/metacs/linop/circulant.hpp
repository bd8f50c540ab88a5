#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <string>

#include "metacs/fft.hpp"
#include "metacs/linop/operator.hpp"

namespace metacs {

struct GaussianCirculantSpec {
  std::uint64_t seed = 0;
  Index n = 0;  // columns
  Index m = 0;  // rows, m <= n
  /// Generator scale; defaults to 1/sqrt(n).
  std::optional<double> normalization;
  /// Replaces the random generator (length n). Test hook.
  std::optional<Vector> generator;
  /// Dimensions reported for the input space (must have size n).
  std::optional<ObjectDims> input_dims;
};

/// First m rows of the circulant matrix C[i, j] = g[(i - j) mod n].
class GaussianCirculant final : public LinearOperatorBase {
 public:
  explicit GaussianCirculant(const GaussianCirculantSpec& spec) : n_(spec.n), m_(spec.m) {
    if (n_ < 1 || m_ < 1 || m_ > n_)
      throw ConfigError("gaussian circulant: need 1 <= m <= n (m=" + std::to_string(m_) +
                        ", n=" + std::to_string(n_) + ")");
    if (spec.generator) {
      if (spec.generator->size() != n_) throw ConfigError("gaussian circulant: generator length");
      generator_ = *spec.generator;
    } else {
      std::mt19937_64 rng(spec.seed);
      generator_ = gaussian_vector(n_, rng) *
                   spec.normalization.value_or(1.0 / std::sqrt(static_cast<double>(n_)));
    }
    dims_ = spec.input_dims.value_or(ObjectDims{n_, 1, 1});
    if (dims_.size() != n_) throw ConfigError("gaussian circulant: input dims do not match n");
    fft_ = fft::RealFft2d(1, n_);
    auto buf = fft_.real_buffer();
    for (Index i = 0; i < n_; ++i) buf[static_cast<std::size_t>(i)] = generator_[i];
    spectrum_ = fft_.spectrum_buffer();
    fft_.forward(buf, spectrum_);
  }

  Index rows() const override { return m_; }
  Index cols() const override { return n_; }
  ObjectDims input_dims() const override { return dims_; }
  std::string name() const override { return "gaussian_circulant"; }
  const Vector& generator() const { return generator_; }

  void apply(const Vector& x, Vector& y) const override {
    auto buf = fft_.real_buffer();
    for (Index i = 0; i < n_; ++i) buf[static_cast<std::size_t>(i)] = x[i];
    auto spec = fft_.spectrum_buffer();
    fft_.forward(buf, spec);
    for (std::size_t i = 0; i < spec.size(); ++i) spec[i] *= spectrum_[i];
    fft_.inverse(spec, buf);
    const double inv = 1.0 / static_cast<double>(n_);
    y.resize(m_);
    for (Index i = 0; i < m_; ++i) y[i] = buf[static_cast<std::size_t>(i)] * inv;
  }

  void apply_adjoint(const Vector& y, Vector& x) const override {
    auto buf = fft_.real_buffer();
    for (Index i = 0; i < m_; ++i) buf[static_cast<std::size_t>(i)] = y[i];
    auto spec = fft_.spectrum_buffer();
    fft_.forward(buf, spec);
    for (std::size_t i = 0; i < spec.size(); ++i) spec[i] *= std::conj(spectrum_[i]);
    fft_.inverse(spec, buf);
    const double inv = 1.0 / static_cast<double>(n_);
    x.resize(n_);
    for (Index i = 0; i < n_; ++i) x[i] = buf[static_cast<std::size_t>(i)] * inv;
  }

 private:
  Index n_, m_;
  Vector generator_;
  ObjectDims dims_;
  fft::RealFft2d fft_;
  fft::ComplexBuffer spectrum_;
};

inline LinearOperator make_gaussian_circulant(const GaussianCirculantSpec& spec) {
  return LinearOperator(std::make_shared<GaussianCirculant>(spec));
}

}  // namespace metacs
