#pragma once

#include <memory>
#include <string>

#include "metacs/linop/operator.hpp"

namespace metacs {

/// Anisotropic forward-difference gradient with periodic wraparound.
/// With `volumetric` the channel axis is treated as a third spatial axis;
/// otherwise channels are independent 2D images.
struct TvGradientSpec {
  ObjectDims dims;
  bool volumetric = false;
};

/// Output blocks, each of length dims.size():
///   0: x[r, c+1] - x[r, c]      (along columns)
///   1: x[r+1, c] - x[r, c]      (along rows)
///   2: x[r, c, ch+1] - x[.., ch] (volumetric only)
class TvGradient final : public LinearOperatorBase {
 public:
  explicit TvGradient(TvGradientSpec spec) : spec_(spec) {
    if (spec_.dims.rows < 1 || spec_.dims.cols < 1 || spec_.dims.channels < 1)
      throw ConfigError("tv: shape must be positive");
  }

  Index axes() const { return spec_.volumetric ? 3 : 2; }
  const TvGradientSpec& spec() const { return spec_; }

  Index rows() const override { return axes() * spec_.dims.size(); }
  Index cols() const override { return spec_.dims.size(); }
  ObjectDims input_dims() const override { return spec_.dims; }
  std::string name() const override { return "tv"; }

  /// Flat index of the neighbour of pixel `i` along `axis` (wrapping).
  Index neighbour(Index i, Index axis) const {
    const auto& d = spec_.dims;
    const Index ch = i % d.channels;
    const Index pix = i / d.channels;
    const Index r = pix / d.cols;
    const Index c = pix % d.cols;
    switch (axis) {
      case 0: return d.index(r, (c + 1) % d.cols, ch);
      case 1: return d.index((r + 1) % d.rows, c, ch);
      default: return d.index(r, c, (ch + 1) % d.channels);
    }
  }

  void apply(const Vector& x, Vector& y) const override {
    const Index n = cols();
    y.resize(rows());
    for (Index a = 0; a < axes(); ++a)
      for (Index i = 0; i < n; ++i) y[a * n + i] = x[neighbour(i, a)] - x[i];
  }

  void apply_adjoint(const Vector& y, Vector& x) const override {
    const Index n = cols();
    x = Vector::Zero(n);
    for (Index a = 0; a < axes(); ++a)
      for (Index i = 0; i < n; ++i) {
        x[neighbour(i, a)] += y[a * n + i];
        x[i] -= y[a * n + i];
      }
  }

 private:
  TvGradientSpec spec_;
};

inline LinearOperator make_tv_gradient(TvGradientSpec spec) {
  return LinearOperator(std::make_shared<TvGradient>(spec));
}

}  // namespace metacs
