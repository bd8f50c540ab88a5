#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "metacs/linop.hpp"
#include "metacs/optics.hpp"

namespace metacs::imaging {

/// Measurement G (rows stacked shot by shot) plus its geometry.
struct ImagingSystem {
  LinearOperator G;
  ObjectDims object;
  SensorDims sensor;
  /// True when rows >= columns (tests only; every shipped config is underdetermined).
  bool overdetermined = false;

  Index shots() const { return sensor.shots; }
  const ConvMeasurement* conv() const { return G.target<ConvMeasurement>(); }
};

/// Uses the first `shots` material states of the stack (default: all).
inline ImagingSystem assemble_system(const optics::PsfStack& psfs, ObjectDims object, Index sensor_rows,
                                     Index sensor_cols, std::optional<Index> shots = std::nullopt) {
  if (object.channels != psfs.depths)
    throw ConfigError("assemble_system: object channels must equal PSF depths");
  const Index ns = shots.value_or(psfs.states);
  if (ns < 1 || ns > psfs.states) throw ConfigError("assemble_system: invalid shot count");
  ConvMeasurementSpec spec;
  spec.object = object;
  spec.sensor_rows = sensor_rows;
  spec.sensor_cols = sensor_cols;
  spec.shots = ns;
  for (Index s = 0; s < ns; ++s)
    for (Index d = 0; d < psfs.depths; ++d) spec.psfs.push_back(psfs.at(d, s));
  ImagingSystem sys;
  sys.G = make_conv_measurement(std::move(spec));
  sys.object = object;
  sys.sensor = {sensor_rows, sensor_cols, ns};
  sys.overdetermined = sys.G.rows() >= sys.G.cols();
  return sys;
}

/// Single-shot system keeping only material state `state`.
inline ImagingSystem single_shot(const optics::PsfStack& psfs, ObjectDims object, Index sensor_rows,
                                 Index sensor_cols, Index state) {
  optics::PsfStack one;
  one.depths = psfs.depths;
  one.states = 1;
  one.scale = psfs.scale;
  for (Index d = 0; d < psfs.depths; ++d) one.psfs.push_back(psfs.at(d, state));
  return assemble_system(one, object, sensor_rows, sensor_cols);
}

/// A centred unit impulse per channel: the identity measurement when the
/// sensor matches the object.
inline optics::PsfStack delta_stack(Index size, Index depths = 1, Index states = 1) {
  optics::PsfStack st;
  st.depths = depths;
  st.states = states;
  for (Index k = 0; k < depths * states; ++k) {
    RealField p = RealField::Zero(size, size);
    p(size / 2, size / 2) = 1.0;
    st.psfs.push_back(std::move(p));
  }
  return st;
}

enum class ObjectKind { physical, unphysical };

struct ObjectSample {
  Vector u;
  double sparsity = 0.0;
  ObjectKind kind = ObjectKind::physical;
  std::uint64_t seed = 0;
  Index nonzeros = 0;
};

struct ValueRange {
  double lo = 0.8;
  double hi = 1.2;
};

/// round(sparsity * n) positions without replacement, magnitudes uniform in
/// `range`; unphysical objects draw an independent random sign per entry.
/// Positions and magnitudes depend only on `seed`, so physical and
/// unphysical samples with one seed share support and magnitudes.
inline ObjectSample sample_object(ObjectDims dims, double sparsity, ObjectKind kind, ValueRange range,
                                  std::uint64_t seed) {
  if (!(sparsity > 0.0 && sparsity <= 1.0)) throw ValidationError("sample_object: sparsity must lie in (0, 1]");
  if (range.hi < range.lo) throw ValidationError("sample_object: empty value range");
  const Index n = dims.size();
  const auto k = static_cast<Index>(std::llround(sparsity * static_cast<double>(n)));
  if (k < 1) throw ValidationError("sample_object: sparsity yields zero nonzeros");

  std::mt19937_64 rng(seed);
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
  }
  std::uniform_real_distribution<double> mag(range.lo, range.hi);
  ObjectSample s;
  s.u = Vector::Zero(n);
  for (Index i = 0; i < k; ++i) s.u[idx[static_cast<std::size_t>(i)]] = range.lo == range.hi ? range.lo : mag(rng);
  if (kind == ObjectKind::unphysical) {
    std::mt19937_64 sign_rng(split_seed(seed, 0x5167));
    std::bernoulli_distribution coin(0.5);
    for (Index i = 0; i < k; ++i) {
      auto& v = s.u[idx[static_cast<std::size_t>(i)]];
      if (coin(sign_rng)) v = -v;
    }
  }
  s.sparsity = sparsity;
  s.kind = kind;
  s.seed = seed;
  s.nonzeros = k;
  return s;
}

struct NoisySensorImage {
  Vector y;
  Vector y_clean;
  double sigma = 0.0;
  double noise_fraction = 0.0;
  std::uint64_t seed = 0;
};

/// Standard-normal draws scaled by sigma at render time.
inline Vector unit_noise(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gaussian_vector(n, rng);
}

/// y = G u + eta, eta ~ N(0, sigma^2) iid, sigma = f * mean(|G u|).
inline NoisySensorImage render(const LinearOperator& G, const Vector& u, double noise_fraction,
                               std::uint64_t seed) {
  if (noise_fraction < 0.0) throw ValidationError("render: noise fraction must be >= 0");
  NoisySensorImage img;
  img.y_clean = G.apply(u);
  img.noise_fraction = noise_fraction;
  img.seed = seed;
  img.sigma = noise_fraction * img.y_clean.cwiseAbs().sum() / static_cast<double>(img.y_clean.size());
  img.y = img.y_clean;
  if (img.sigma > 0.0) img.y += img.sigma * unit_noise(img.y.size(), seed);
  return img;
}

inline NoisySensorImage render(const ImagingSystem& sys, const Vector& u, double noise_fraction,
                               std::uint64_t seed) {
  return render(sys.G, u, noise_fraction, seed);
}

inline double relative_squared_error(const Vector& u, const Vector& u_est) {
  const double denom = u.squaredNorm();
  if (!(denom > 0.0)) throw ValidationError("relative_error: reference object is zero");
  return (u - u_est).squaredNorm() / denom;
}

/// |u - u_est| / |u|
inline double relative_error(const Vector& u, const Vector& u_est) {
  return std::sqrt(relative_squared_error(u, u_est));
}

}  // namespace metacs::imaging
