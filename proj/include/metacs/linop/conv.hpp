#pragma once

#include <memory>
#include <string>
#include <vector>

#include "metacs/fft.hpp"
#include "metacs/linop/operator.hpp"

namespace metacs {

/// Description of a convolve/sum/crop measurement. `psfs` holds one kernel
/// per (shot, channel) at index shot * object.channels + channel; all
/// kernels share one shape.
struct ConvMeasurementSpec {
  std::vector<RealField> psfs;
  ObjectDims object;
  Index sensor_rows = 0;
  Index sensor_cols = 0;
  Index shots = 1;
};

/// (input, output-cotangent) pair: contributes cotangent * input^T to dL/dG.
struct CotangentPair {
  Vector input;
  Vector output_cotangent;
};

/// y_s = crop( sum_c  x_c (*) psf_{s,c} ), zero-padded linear convolution with
/// a centered crop. For odd leftover the extra margin pixel sits on the low
/// index side: offset = (n + p - 1 - s + 1) / 2 per axis.
///
/// Only the kernel window that can reach the sensor is transformed: with
/// L = n + s - 1 per axis, a circular convolution of size >= L evaluated at
/// output positions [n-1, n-1+s) equals the cropped linear convolution
/// exactly, so transforms run at fast_size(L) instead of n + p - 1.
class ConvMeasurement final : public LinearOperatorBase {
 public:
  explicit ConvMeasurement(ConvMeasurementSpec spec) : spec_(std::move(spec)) {
    const auto& s = spec_;
    if (s.object.rows < 1 || s.object.cols < 1 || s.object.channels < 1)
      throw ConfigError("conv: object shape must be positive");
    if (s.shots < 1) throw ConfigError("conv: shots must be >= 1");
    if (static_cast<Index>(s.psfs.size()) != s.shots * s.object.channels)
      throw ConfigError("conv: expected " + std::to_string(s.shots * s.object.channels) +
                        " kernels, got " + std::to_string(s.psfs.size()));
    psf_rows_ = s.psfs.front().rows();
    psf_cols_ = s.psfs.front().cols();
    if (psf_rows_ < 1 || psf_cols_ < 1) throw ConfigError("conv: empty kernel");
    for (const auto& k : s.psfs) {
      if (k.rows() != psf_rows_ || k.cols() != psf_cols_)
        throw ConfigError("conv: kernels differ in shape");
      if (!k.allFinite()) throw ValidationError("conv: kernel contains non-finite values");
      if ((k < 0.0).any()) throw ValidationError("conv: kernel has negative entries");
    }
    const Index lin_r = s.object.rows + psf_rows_ - 1;
    const Index lin_c = s.object.cols + psf_cols_ - 1;
    if (s.sensor_rows < 1 || s.sensor_cols < 1 || s.sensor_rows > lin_r || s.sensor_cols > lin_c)
      throw ConfigError("conv: sensor shape must lie within the linear convolution support");
    // Kernel window offset q0 = crop_offset - (n - 1).
    q0_r_ = (lin_r - s.sensor_rows + 1) / 2 - (s.object.rows - 1);
    q0_c_ = (lin_c - s.sensor_cols + 1) / 2 - (s.object.cols - 1);
    fft_ = fft::RealFft2d(fft::fast_size(s.object.rows + s.sensor_rows - 1),
                          fft::fast_size(s.object.cols + s.sensor_cols - 1));
    spectra_.reserve(s.psfs.size());
    for (const auto& k : s.psfs) spectra_.push_back(kernel_spectrum(k));
  }

  Index rows() const override { return spec_.shots * spec_.sensor_rows * spec_.sensor_cols; }
  Index cols() const override { return spec_.object.size(); }
  ObjectDims input_dims() const override { return spec_.object; }
  SensorDims output_dims() const override {
    return {spec_.sensor_rows, spec_.sensor_cols, spec_.shots};
  }
  std::string name() const override { return "conv"; }

  const ConvMeasurementSpec& spec() const { return spec_; }
  Index channels() const { return spec_.object.channels; }
  Index shots() const { return spec_.shots; }
  Index fft_rows() const { return fft_.rows(); }
  Index fft_cols() const { return fft_.cols(); }

  void apply(const Vector& x, Vector& y) const override {
    const Index nc = channels();
    std::vector<fft::ComplexBuffer> xs;
    xs.reserve(static_cast<std::size_t>(nc));
    for (Index c = 0; c < nc; ++c) xs.push_back(object_spectrum(x, c));
    y.resize(rows());
    auto acc = fft_.spectrum_buffer();
    auto out = fft_.real_buffer();
    for (Index s = 0; s < shots(); ++s) {
      std::fill(acc.begin(), acc.end(), Complex{});
      for (Index c = 0; c < nc; ++c) {
        const auto& k = spectra_[static_cast<std::size_t>(s * nc + c)];
        const auto& xc = xs[static_cast<std::size_t>(c)];
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += xc[i] * k[i];
      }
      fft_.inverse(acc, out);
      read_sensor(out, s, y);
    }
  }

  void apply_adjoint(const Vector& y, Vector& x) const override {
    const Index nc = channels();
    std::vector<fft::ComplexBuffer> ws;
    ws.reserve(static_cast<std::size_t>(shots()));
    for (Index s = 0; s < shots(); ++s) ws.push_back(sensor_spectrum(y, s));
    x.resize(cols());
    auto acc = fft_.spectrum_buffer();
    auto out = fft_.real_buffer();
    const double inv = 1.0 / static_cast<double>(fft_.size());
    const auto& obj = spec_.object;
    for (Index c = 0; c < nc; ++c) {
      std::fill(acc.begin(), acc.end(), Complex{});
      for (Index s = 0; s < shots(); ++s) {
        const auto& k = spectra_[static_cast<std::size_t>(s * nc + c)];
        const auto& ws_s = ws[static_cast<std::size_t>(s)];
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += ws_s[i] * std::conj(k[i]);
      }
      fft_.inverse(acc, out);
      for (Index r = 0; r < obj.rows; ++r)
        for (Index q = 0; q < obj.cols; ++q)
          x[obj.index(r, q, c)] = out[static_cast<std::size_t>(r * fft_.cols() + q)] * inv;
    }
  }

  /// dL/dpsf for dL/dG = sum_k w_k x_k^T, returned in the `psfs` layout.
  std::vector<RealField> psf_gradient(const std::vector<CotangentPair>& pairs) const {
    const Index nc = channels();
    std::vector<RealField> grad(spec_.psfs.size(), RealField::Zero(psf_rows_, psf_cols_));
    auto acc = fft_.spectrum_buffer();
    auto out = fft_.real_buffer();
    const double inv = 1.0 / static_cast<double>(fft_.size());
    const Index win_r = spec_.object.rows + spec_.sensor_rows - 1;
    const Index win_c = spec_.object.cols + spec_.sensor_cols - 1;
    for (const auto& pair : pairs) {
      if (pair.input.size() != cols() || pair.output_cotangent.size() != rows())
        throw ConfigError("conv: cotangent pair shape mismatch");
      std::vector<fft::ComplexBuffer> xs;
      for (Index c = 0; c < nc; ++c) xs.push_back(object_spectrum(pair.input, c));
      for (Index s = 0; s < shots(); ++s) {
        const auto ws = sensor_spectrum(pair.output_cotangent, s);
        for (Index c = 0; c < nc; ++c) {
          const auto& xc = xs[static_cast<std::size_t>(c)];
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = ws[i] * std::conj(xc[i]);
          fft_.inverse(acc, out);
          auto& g = grad[static_cast<std::size_t>(s * nc + c)];
          for (Index t0 = 0; t0 < win_r; ++t0) {
            const Index pr = t0 + q0_r_;
            if (pr < 0 || pr >= psf_rows_) continue;
            for (Index t1 = 0; t1 < win_c; ++t1) {
              const Index pc = t1 + q0_c_;
              if (pc < 0 || pc >= psf_cols_) continue;
              g(pr, pc) += out[static_cast<std::size_t>(t0 * fft_.cols() + t1)] * inv;
            }
          }
        }
      }
    }
    return grad;
  }

 private:
  fft::ComplexBuffer kernel_spectrum(const RealField& k) const {
    auto buf = fft_.real_buffer();
    const Index win_r = spec_.object.rows + spec_.sensor_rows - 1;
    const Index win_c = spec_.object.cols + spec_.sensor_cols - 1;
    for (Index t0 = 0; t0 < win_r; ++t0) {
      const Index pr = t0 + q0_r_;
      if (pr < 0 || pr >= psf_rows_) continue;
      for (Index t1 = 0; t1 < win_c; ++t1) {
        const Index pc = t1 + q0_c_;
        if (pc < 0 || pc >= psf_cols_) continue;
        buf[static_cast<std::size_t>(t0 * fft_.cols() + t1)] = k(pr, pc);
      }
    }
    auto spec = fft_.spectrum_buffer();
    fft_.forward(buf, spec);
    return spec;
  }

  fft::ComplexBuffer object_spectrum(const Vector& x, Index c) const {
    auto buf = fft_.real_buffer();
    const auto& obj = spec_.object;
    for (Index r = 0; r < obj.rows; ++r)
      for (Index q = 0; q < obj.cols; ++q)
        buf[static_cast<std::size_t>(r * fft_.cols() + q)] = x[obj.index(r, q, c)];
    auto spec = fft_.spectrum_buffer();
    fft_.forward(buf, spec);
    return spec;
  }

  fft::ComplexBuffer sensor_spectrum(const Vector& y, Index shot) const {
    auto buf = fft_.real_buffer();
    const Index base = shot * spec_.sensor_rows * spec_.sensor_cols;
    const Index r0 = spec_.object.rows - 1;
    const Index c0 = spec_.object.cols - 1;
    for (Index r = 0; r < spec_.sensor_rows; ++r)
      for (Index q = 0; q < spec_.sensor_cols; ++q)
        buf[static_cast<std::size_t>((r0 + r) * fft_.cols() + c0 + q)] =
            y[base + r * spec_.sensor_cols + q];
    auto spec = fft_.spectrum_buffer();
    fft_.forward(buf, spec);
    return spec;
  }

  void read_sensor(const fft::RealBuffer& out, Index shot, Vector& y) const {
    const double inv = 1.0 / static_cast<double>(fft_.size());
    const Index base = shot * spec_.sensor_rows * spec_.sensor_cols;
    const Index r0 = spec_.object.rows - 1;
    const Index c0 = spec_.object.cols - 1;
    for (Index r = 0; r < spec_.sensor_rows; ++r)
      for (Index q = 0; q < spec_.sensor_cols; ++q)
        y[base + r * spec_.sensor_cols + q] =
            out[static_cast<std::size_t>((r0 + r) * fft_.cols() + c0 + q)] * inv;
  }

  ConvMeasurementSpec spec_;
  Index psf_rows_ = 0, psf_cols_ = 0;
  Index q0_r_ = 0, q0_c_ = 0;
  fft::RealFft2d fft_;
  std::vector<fft::ComplexBuffer> spectra_;
};

inline LinearOperator make_conv_measurement(ConvMeasurementSpec spec) {
  return LinearOperator(std::make_shared<ConvMeasurement>(std::move(spec)));
}

}  // namespace metacs
