#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <vector>

#include "metacs/fft.hpp"

namespace metacs::optics {

/// Simulation grid. The metasurface occupies `cells` x `cells` unit cells,
/// centred in a window widened by `padding` opaque cells on each side.
/// Sample (i, j) of the window sits at ((i - S/2) pitch, (j - S/2) pitch)
/// with S = cells + 2 padding, so the optical axis falls on sample S/2.
struct OpticalGrid {
  Index cells = 0;
  double pitch = 0.0;             // m
  double wavelength = 0.0;        // m
  double sensor_distance = 0.0;   // m
  std::vector<double> depths;     // m, one per object channel
  Index padding = 0;
  Index binning = 1;              // PSF samples per sensor pixel, per axis

  Index window() const { return cells + 2 * padding; }
  Index psf_size() const { return window() / binning; }
  double wavenumber() const { return 2.0 * std::numbers::pi / wavelength; }
  /// Coarser than lambda/2 sampling cannot represent every propagating angle.
  bool undersampled() const { return pitch > 0.5 * wavelength; }

  void validate() const {
    if (cells < 2 || cells % 2 != 0) throw ConfigError("optics: cell count must be even and >= 2");
    if (!(pitch > 0.0)) throw ConfigError("optics: pitch must be > 0");
    if (!(wavelength > 0.0)) throw ConfigError("optics: wavelength must be > 0");
    if (!(sensor_distance > 0.0)) throw ConfigError("optics: sensor distance must be > 0");
    if (depths.empty()) throw ConfigError("optics: need at least one depth");
    for (double z : depths)
      if (!(z > 0.0)) throw ConfigError("optics: depths must be > 0");
    if (padding < 0) throw ConfigError("optics: padding must be >= 0");
    if (binning < 1 || window() % binning != 0)
      throw ConfigError("optics: binning must divide the simulation window");
  }
};

/// Depths uniformly spaced in 1/z between `near` and `far` (inclusive).
inline std::vector<double> inverse_spaced_depths(double near, double far, Index count) {
  if (count < 1 || !(near > 0.0) || !(far > 0.0)) throw ConfigError("depths: invalid range");
  std::vector<double> z(static_cast<std::size_t>(count));
  if (count == 1) {
    z[0] = near;
    return z;
  }
  for (Index i = 0; i < count; ++i) {
    const double f = static_cast<double>(i) / static_cast<double>(count - 1);
    z[static_cast<std::size_t>(i)] = 1.0 / ((1.0 - f) / near + f / far);
  }
  return z;
}

inline double sample_position(const OpticalGrid& g, Index i) {
  return static_cast<double>(i - g.window() / 2) * g.pitch;
}

/// Paraxial spherical wave from an on-axis point at `depth`:
/// unit amplitude, phase k (x^2 + y^2) / (2 depth).
inline ComplexField incident_field(const OpticalGrid& g, double depth) {
  if (!(depth > 0.0)) throw ValidationError("incident_field: depth must be > 0");
  const Index s = g.window();
  const double k = g.wavenumber();
  ComplexField f(s, s);
  for (Index i = 0; i < s; ++i) {
    const double y = sample_position(g, i);
    for (Index j = 0; j < s; ++j) {
      const double x = sample_position(g, j);
      f(i, j) = std::polar(1.0, k * (x * x + y * y) / (2.0 * depth));
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Chebyshev surrogate of the unit-cell transmission t(w).

struct TransmissionSample {
  double width = 0.0;
  Complex t;
  Index state = 0;
};

/// First-kind Chebyshev points of [w_min, w_max]: node k maps
/// cos(pi (k + 1/2) / count).
inline std::vector<double> chebyshev_nodes(Index count, double w_min, double w_max) {
  std::vector<double> w(static_cast<std::size_t>(count));
  const double mid = 0.5 * (w_min + w_max), half = 0.5 * (w_max - w_min);
  for (Index k = 0; k < count; ++k)
    w[static_cast<std::size_t>(k)] =
        mid + half * std::cos(std::numbers::pi * (static_cast<double>(k) + 0.5) / static_cast<double>(count));
  return w;
}

class SurrogateModel {
 public:
  struct Eval {
    Complex value;
    Complex derivative;  // dt/dw
  };

  SurrogateModel() = default;
  SurrogateModel(double w_min, double w_max, std::vector<std::vector<Complex>> coefficients)
      : w_min_(w_min), w_max_(w_max), coeffs_(std::move(coefficients)) {
    if (!(w_max > w_min)) throw ConfigError("surrogate: empty width domain");
    if (coeffs_.empty()) throw ConfigError("surrogate: no states");
    for (const auto& c : coeffs_) {
      if (c.empty()) throw ConfigError("surrogate: empty coefficient vector");
      for (const auto& v : c)
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
          throw ValidationError("surrogate: non-finite coefficient");
      deriv_.push_back(derivative_coefficients(c));
    }
  }

  double w_min() const { return w_min_; }
  double w_max() const { return w_max_; }
  Index states() const { return static_cast<Index>(coeffs_.size()); }
  Index degree() const { return static_cast<Index>(coeffs_.front().size()) - 1; }
  const std::vector<Complex>& coefficients(Index state) const {
    return coeffs_.at(static_cast<std::size_t>(state));
  }
  /// Number of evaluations clamped into the domain.
  std::size_t clamp_count() const { return clamps_->load(); }

  Eval eval(double w, Index state) const {
    if (w < w_min_ || w > w_max_) {
      clamps_->fetch_add(1);
      w = std::clamp(w, w_min_, w_max_);
    }
    const double xi = (2.0 * w - (w_min_ + w_max_)) / (w_max_ - w_min_);
    const auto s = static_cast<std::size_t>(state);
    return {clenshaw(coeffs_.at(s), xi), clenshaw(deriv_.at(s), xi) * (2.0 / (w_max_ - w_min_))};
  }

 private:
  static Complex clenshaw(const std::vector<Complex>& c, double x) {
    Complex b1{}, b2{};
    for (std::size_t j = c.size(); j-- > 1;) {
      const Complex b0 = c[j] + 2.0 * x * b1 - b2;
      b2 = b1;
      b1 = b0;
    }
    return c[0] + x * b1 - b2;
  }

  // Coefficients of d/dxi sum c_j T_j(xi).
  static std::vector<Complex> derivative_coefficients(const std::vector<Complex>& c) {
    const std::size_t n = c.size();
    std::vector<Complex> d(std::max<std::size_t>(n, 1), Complex{});
    if (n < 2) return d;
    std::vector<Complex> e(n + 1, Complex{});
    for (std::size_t j = n - 1; j >= 1; --j) e[j - 1] = e[j + 1] + 2.0 * static_cast<double>(j) * c[j];
    e[0] *= 0.5;
    std::copy(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(n), d.begin());
    return d;
  }

  double w_min_ = 0.0, w_max_ = 1.0;
  std::vector<std::vector<Complex>> coeffs_;
  std::vector<std::vector<Complex>> deriv_;
  std::shared_ptr<std::atomic<std::size_t>> clamps_ = std::make_shared<std::atomic<std::size_t>>(0);
};

/// Interpolates samples taken at the first-kind Chebyshev nodes of
/// [w_min, w_max] (node count = samples per state). Coefficients beyond
/// `degree` are dropped; with degree = count - 1 the fit reproduces every
/// sample. Samples off the node set are rejected.
inline SurrogateModel fit_surrogate(const std::vector<TransmissionSample>& samples, double w_min,
                                    double w_max, Index degree) {
  if (!(w_max > w_min)) throw ConfigError("fit_surrogate: empty width domain");
  if (degree < 0) throw ConfigError("fit_surrogate: negative degree");
  std::map<Index, std::vector<TransmissionSample>> by_state;
  for (const auto& s : samples) by_state[s.state].push_back(s);
  if (by_state.empty()) throw ConfigError("fit_surrogate: no samples");
  Index expected_state = 0;
  std::vector<std::vector<Complex>> coeffs;
  const double half = 0.5 * (w_max - w_min), mid = 0.5 * (w_max + w_min);
  for (auto& [state, list] : by_state) {
    if (state != expected_state++) throw ConfigError("fit_surrogate: state ids must be 0..S-1");
    const Index n = static_cast<Index>(list.size());
    if (n < degree + 1)
      throw ConfigError("fit_surrogate: need at least degree + 1 samples per state");
    std::vector<Complex> values(static_cast<std::size_t>(n));
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (const auto& s : list) {
      const double xi = (s.width - mid) / half;
      if (!(std::abs(xi) <= 1.0)) throw ConfigError("fit_surrogate: sample width outside domain");
      const double pos = std::acos(std::clamp(xi, -1.0, 1.0)) * static_cast<double>(n) / std::numbers::pi - 0.5;
      const auto k = static_cast<Index>(std::llround(pos));
      const double node =
          mid + half * std::cos(std::numbers::pi * (static_cast<double>(k) + 0.5) / static_cast<double>(n));
      if (k < 0 || k >= n || std::abs(node - s.width) > 1e-9 * (w_max - w_min) ||
          seen[static_cast<std::size_t>(k)])
        throw ConfigError("fit_surrogate: samples must sit on distinct Chebyshev nodes");
      seen[static_cast<std::size_t>(k)] = 1;
      values[static_cast<std::size_t>(k)] = s.t;
    }
    std::vector<Complex> c(static_cast<std::size_t>(degree + 1), Complex{});
    for (Index j = 0; j <= degree; ++j) {
      Complex acc{};
      for (Index k = 0; k < n; ++k)
        acc += values[static_cast<std::size_t>(k)] *
               std::cos(std::numbers::pi * static_cast<double>(j) * (static_cast<double>(k) + 0.5) /
                        static_cast<double>(n));
      c[static_cast<std::size_t>(j)] = acc * (2.0 / static_cast<double>(n));
    }
    c[0] *= 0.5;
    coeffs.push_back(std::move(c));
  }
  return SurrogateModel(w_min, w_max, std::move(coeffs));
}

inline SurrogateModel::Eval eval_surrogate(const SurrogateModel& m, double w, Index state) {
  return m.eval(w, state);
}

/// Analytic stand-in for a rigorous unit-cell library: phase ramps across
/// the width domain (2 pi for state 0, 2 pi * 1.43 for state 1, the
/// amorphous/crystalline index ratio 4.65/3.25), amplitude dipping from 1.0
/// at the domain ends to 0.95 at its centre.
inline Complex synthetic_transmission(double w, Index state, double w_min, double w_max) {
  const double f = (w - w_min) / (w_max - w_min);
  const double amplitude = 1.0 - 0.2 * f * (1.0 - f);
  const double slope = state == 0 ? 1.0 : 4.65 / 3.25;
  return std::polar(amplitude, 2.0 * std::numbers::pi * slope * f);
}

inline std::vector<TransmissionSample> tabulate(double w_min, double w_max, Index states, Index count,
                                                const auto& transmission) {
  std::vector<TransmissionSample> out;
  for (Index s = 0; s < states; ++s)
    for (double w : chebyshev_nodes(count, w_min, w_max)) out.push_back({w, transmission(w, s), s});
  return out;
}

inline SurrogateModel synthetic_surrogate(double w_min, double w_max, Index states = 1,
                                          Index degree = 24) {
  return fit_surrogate(
      tabulate(w_min, w_max, states, degree + 1,
               [&](double w, Index s) { return synthetic_transmission(w, s, w_min, w_max); }),
      w_min, w_max, degree);
}

/// Width-independent transmission t for every state.
inline SurrogateModel constant_surrogate(double w_min, double w_max, Complex t, Index states = 1) {
  return SurrogateModel(w_min, w_max, std::vector<std::vector<Complex>>(static_cast<std::size_t>(states), {t}));
}

// ---------------------------------------------------------------------------
// Geometry

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Pillar widths p = w_min + (w_max - w_min) * logistic(theta).
struct MetasurfaceGeometry {
  RealField theta;
  double w_min = 0.0;
  double w_max = 0.0;

  RealField widths() const {
    return theta.unaryExpr([this](double t) { return w_min + (w_max - w_min) * logistic(t); });
  }
  /// dp/dtheta
  RealField width_jacobian() const {
    return theta.unaryExpr([this](double t) {
      const double s = logistic(t);
      return (w_max - w_min) * s * (1.0 - s);
    });
  }
  static RealField latent_from_widths(const RealField& p, double w_min, double w_max) {
    return p.unaryExpr([&](double w) {
      const double f = std::clamp((w - w_min) / (w_max - w_min), 1e-9, 1.0 - 1e-9);
      return std::log(f / (1.0 - f));
    });
  }
};

/// Identical pillars at mid-domain.
inline MetasurfaceGeometry uniform_geometry(Index cells, double w_min, double w_max) {
  return {RealField::Zero(cells, cells), w_min, w_max};
}

/// Widths drawn uniformly from the middle 98% of the domain.
inline MetasurfaceGeometry random_geometry(Index cells, double w_min, double w_max, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  RealField f(cells, cells);
  for (Index i = 0; i < f.size(); ++i) f.data()[i] = u(rng);
  return {f.unaryExpr([](double v) { return std::log(v / (1.0 - v)); }), w_min, w_max};
}

/// Geometry whose state-0 synthetic phase cancels the incident curvature
/// from `depth` and focuses onto the sensor, centred at sample offset
/// (dy, dx) from the axis. Inverts synthetic_transmission's 2 pi ramp.
inline MetasurfaceGeometry lens_geometry(const OpticalGrid& g, double w_min, double w_max,
                                         double depth, Index dy = 0, Index dx = 0) {
  const double k = g.wavenumber();
  const double two_pi = 2.0 * std::numbers::pi;
  RealField p(g.cells, g.cells);
  for (Index i = 0; i < g.cells; ++i) {
    const double y = sample_position(g, i + g.padding);
    const double yf = y - static_cast<double>(dy) * g.pitch;
    for (Index j = 0; j < g.cells; ++j) {
      const double x = sample_position(g, j + g.padding);
      const double xf = x - static_cast<double>(dx) * g.pitch;
      const double rf = std::sqrt(xf * xf + yf * yf + g.sensor_distance * g.sensor_distance);
      double phase = -k * (x * x + y * y) / (2.0 * depth) - k * (rf - g.sensor_distance);
      phase = std::fmod(phase, two_pi);
      if (phase < 0) phase += two_pi;
      p(i, j) = w_min + (w_max - w_min) * std::clamp(phase / two_pi, 1e-6, 1.0 - 1e-6);
    }
  }
  return {MetasurfaceGeometry::latent_from_widths(p, w_min, w_max), w_min, w_max};
}

// ---------------------------------------------------------------------------
// Propagation

/// Angular-spectrum transfer function exp(i 2 pi d sqrt(1/lambda^2 - f^2)),
/// zero on evanescent frequencies. FFT ordering.
inline ComplexField transfer_function(const OpticalGrid& g, Index size, double distance) {
  const double inv_l2 = 1.0 / (g.wavelength * g.wavelength);
  const double df = 1.0 / (static_cast<double>(size) * g.pitch);
  auto freq = [&](Index k) { return static_cast<double>(k < (size + 1) / 2 ? k : k - size) * df; };
  ComplexField h(size, size);
  for (Index a = 0; a < size; ++a) {
    const double fy = freq(a);
    for (Index b = 0; b < size; ++b) {
      const double fx = freq(b);
      const double arg = inv_l2 - fx * fx - fy * fy;
      h(a, b) = arg > 0.0 ? std::polar(1.0, 2.0 * std::numbers::pi * distance * std::sqrt(arg)) : Complex{};
    }
  }
  return h;
}

namespace detail {

inline ComplexField apply_transfer(const ComplexField& field, const ComplexField& h, bool conjugate) {
  const Index n0 = field.rows(), n1 = field.cols();
  fft::ComplexFft2d fft(n0, n1);
  fft::ComplexBuffer in(static_cast<std::size_t>(n0 * n1)), spec(in.size());
  std::copy(field.data(), field.data() + field.size(), in.begin());
  fft.forward(in, spec);
  for (std::size_t i = 0; i < spec.size(); ++i) spec[i] *= conjugate ? std::conj(h.data()[i]) : h.data()[i];
  fft.backward(spec, in);
  ComplexField out(n0, n1);
  const double inv = 1.0 / static_cast<double>(n0 * n1);
  for (std::size_t i = 0; i < in.size(); ++i) out.data()[i] = in[i] * inv;
  return out;
}

}  // namespace detail

/// Band-limited angular-spectrum propagation over `distance` on the
/// (periodic) sampling grid of `field`.
inline ComplexField propagate(const ComplexField& field, double distance, const OpticalGrid& g) {
  if (!(distance > 0.0)) throw ValidationError("propagate: distance must be > 0");
  if (field.rows() != field.cols()) throw ConfigError("propagate: field must be square");
  return detail::apply_transfer(field, transfer_function(g, field.rows(), distance), false);
}

/// Adjoint of propagate (conjugate transfer function).
inline ComplexField propagate_adjoint(const ComplexField& field, double distance, const OpticalGrid& g) {
  return detail::apply_transfer(field, transfer_function(g, field.rows(), distance), true);
}

// ---------------------------------------------------------------------------
// PSF stacks

/// Intensity PSFs indexed by (depth, state), stored at state * depths + depth
/// so that a stack maps directly onto the conv-measurement kernel layout
/// (shot = state, channel = depth).
struct PsfStack {
  Index depths = 0;
  Index states = 0;
  std::vector<RealField> psfs;
  /// Global divisor applied to every raw intensity.
  double scale = 1.0;

  const RealField& at(Index depth, Index state) const {
    return psfs.at(static_cast<std::size_t>(state * depths + depth));
  }
  RealField& at(Index depth, Index state) { return psfs.at(static_cast<std::size_t>(state * depths + depth)); }
  Index rows() const { return psfs.empty() ? 0 : psfs.front().rows(); }
  Index cols() const { return psfs.empty() ? 0 : psfs.front().cols(); }
};

namespace detail {

inline RealField bin(const RealField& f, Index b) {
  if (b == 1) return f;
  const Index n0 = f.rows() / b, n1 = f.cols() / b;
  RealField out = RealField::Zero(n0, n1);
  for (Index i = 0; i < f.rows(); ++i)
    for (Index j = 0; j < f.cols(); ++j) out(i / b, j / b) += f(i, j);
  return out;
}

inline RealField unbin(const RealField& f, Index b) {
  if (b == 1) return f;
  RealField out(f.rows() * b, f.cols() * b);
  for (Index i = 0; i < out.rows(); ++i)
    for (Index j = 0; j < out.cols(); ++j) out(i, j) = f(i / b, j / b);
  return out;
}

struct FieldCache {
  ComplexField incident;  // window field
  ComplexField out;       // sensor-plane field
  RealField intensity;    // |out|^2 on the window grid
};

inline ComplexField transmission(const MetasurfaceGeometry& geo, const SurrogateModel& sm,
                                 const OpticalGrid& g, Index state, ComplexField* derivative) {
  const Index s = g.window();
  ComplexField t = ComplexField::Zero(s, s);
  if (derivative) *derivative = ComplexField::Zero(s, s);
  const RealField p = geo.widths();
  for (Index i = 0; i < g.cells; ++i)
    for (Index j = 0; j < g.cells; ++j) {
      const auto e = sm.eval(p(i, j), state);
      t(i + g.padding, j + g.padding) = e.value;
      if (derivative) (*derivative)(i + g.padding, j + g.padding) = e.derivative;
    }
  return t;
}

inline void check_shapes(const MetasurfaceGeometry& geo, const SurrogateModel& sm, const OpticalGrid& g) {
  g.validate();
  if (geo.theta.rows() != g.cells || geo.theta.cols() != g.cells)
    throw ConfigError("optics: geometry shape does not match the grid");
  if (sm.states() < 1) throw ConfigError("optics: surrogate has no states");
}

}  // namespace detail

/// PSF(depth, state) = bin(|propagate(incident(depth) * t_state(p))|^2),
/// all divided by the sum of the (depth 0, state 0) PSF.
inline PsfStack compute_psf_stack(const MetasurfaceGeometry& geo, const SurrogateModel& sm,
                                  const OpticalGrid& g) {
  detail::check_shapes(geo, sm, g);
  PsfStack stack;
  stack.depths = static_cast<Index>(g.depths.size());
  stack.states = sm.states();
  stack.psfs.resize(static_cast<std::size_t>(stack.depths * stack.states));
  const ComplexField h = transfer_function(g, g.window(), g.sensor_distance);
  for (Index s = 0; s < stack.states; ++s) {
    const ComplexField t = detail::transmission(geo, sm, g, s, nullptr);
    for (Index d = 0; d < stack.depths; ++d) {
      const ComplexField e = detail::apply_transfer(
          incident_field(g, g.depths[static_cast<std::size_t>(d)]) * t, h, false);
      stack.at(d, s) = detail::bin(e.abs2(), g.binning);
    }
  }
  stack.scale = stack.at(0, 0).sum();
  if (!std::isfinite(stack.scale)) throw ModelError("compute_psf_stack: non-finite intensity");
  if (!(stack.scale > 0.0)) throw ModelError("compute_psf_stack: reference PSF carries no energy");
  for (auto& p : stack.psfs) {
    p /= stack.scale;
    if (!p.allFinite()) throw ModelError("compute_psf_stack: non-finite PSF");
  }
  return stack;
}

/// Reverse-mode gradient of <cotangent, compute_psf_stack(theta)> w.r.t.
/// the latent geometry theta. The cotangent has the stack's layout.
inline RealField psf_vjp(const MetasurfaceGeometry& geo, const SurrogateModel& sm, const OpticalGrid& g,
                         const PsfStack& cotangent) {
  detail::check_shapes(geo, sm, g);
  const Index nd = static_cast<Index>(g.depths.size());
  const Index ns = sm.states();
  if (cotangent.depths != nd || cotangent.states != ns ||
      static_cast<Index>(cotangent.psfs.size()) != nd * ns)
    throw ConfigError("psf_vjp: cotangent stack shape mismatch");
  const ComplexField h = transfer_function(g, g.window(), g.sensor_distance);

  // Forward pass, keeping the fields.
  std::vector<detail::FieldCache> cache(static_cast<std::size_t>(nd * ns));
  std::vector<ComplexField> t(static_cast<std::size_t>(ns)), dt(static_cast<std::size_t>(ns));
  for (Index s = 0; s < ns; ++s) {
    t[static_cast<std::size_t>(s)] = detail::transmission(geo, sm, g, s, &dt[static_cast<std::size_t>(s)]);
    for (Index d = 0; d < nd; ++d) {
      auto& c = cache[static_cast<std::size_t>(s * nd + d)];
      c.incident = incident_field(g, g.depths[static_cast<std::size_t>(d)]);
      c.out = detail::apply_transfer(c.incident * t[static_cast<std::size_t>(s)], h, false);
      c.intensity = c.out.abs2();
    }
  }
  const double scale = cache[0].intensity.sum();
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ModelError("psf_vjp: degenerate reference PSF");

  // f = sum_k <C_k, bin(I_k)> / scale
  double f = 0.0;
  std::vector<RealField> up(cache.size());
  for (std::size_t k = 0; k < cache.size(); ++k) {
    up[k] = detail::unbin(cotangent.psfs[k], g.binning);
    f += (up[k] * cache[k].intensity).sum();
  }
  f /= scale;

  RealField grad_p = RealField::Zero(g.cells, g.cells);
  for (Index s = 0; s < ns; ++s)
    for (Index d = 0; d < nd; ++d) {
      const std::size_t k = static_cast<std::size_t>(s * nd + d);
      RealField g_int = up[k] / scale;
      if (k == 0) g_int -= f / scale;
      const ComplexField g_out = 2.0 * g_int.cast<Complex>() * cache[k].out;
      const ComplexField g_ms = detail::apply_transfer(g_out, h, true);
      const ComplexField contrib = g_ms.conjugate() * cache[k].incident * dt[static_cast<std::size_t>(s)];
      grad_p += contrib.real().block(g.padding, g.padding, g.cells, g.cells);
    }
  return grad_p * geo.width_jacobian();
}

}  // namespace metacs::optics
