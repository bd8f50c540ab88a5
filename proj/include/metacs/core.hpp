#pragma once

#include <Eigen/Core>

#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace metacs {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Complex = std::complex<double>;

// 2D fields are row-major so their storage matches the flattened-vector
// contract and FFTW's layout.
using RealField = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ComplexField = Eigen::Array<Complex, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Object-space shape. Flattening is row-major, channel-last:
/// index = (row * cols + col) * channels + channel.
struct ObjectDims {
  Index rows = 1;
  Index cols = 1;
  Index channels = 1;

  Index size() const { return rows * cols * channels; }
  Index pixels() const { return rows * cols; }
  Index index(Index r, Index c, Index ch) const { return (r * cols + c) * channels + ch; }
  friend bool operator==(const ObjectDims&, const ObjectDims&) = default;
};

/// Sensor-space shape. Each shot is a contiguous row-major block;
/// index = shot * rows * cols + row * cols + col.
struct SensorDims {
  Index rows = 1;
  Index cols = 1;
  Index shots = 1;

  Index size() const { return rows * cols * shots; }
  Index shot_size() const { return rows * cols; }
  friend bool operator==(const SensorDims&, const SensorDims&) = default;
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "runtime"; }
};

/// Inconsistent shapes or option values.
class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

/// Non-finite or out-of-range data.
class ValidationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "validation"; }
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "unsupported"; }
};

/// Iterative solver failure; carries the last residual.
class SolverError : public Error {
 public:
  SolverError(const std::string& what, double residual = 0.0)
      : Error(what), residual_(residual) {}
  const char* kind() const noexcept override { return "solver"; }
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

class ModelError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "model"; }
};

/// splitmix64 step: derives independent stream seeds from (base, index).
inline std::uint64_t split_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }

}  // namespace metacs
