#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "metacs/optics.hpp"

namespace metacs::optics {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kLambda = 550e-9;
constexpr double kPitch = 470e-9;
constexpr double kWMin = 60e-9;
constexpr double kWMax = 410e-9;

OpticalGrid small_grid(Index cells, Index padding = 0, Index binning = 1) {
  OpticalGrid g;
  g.cells = cells;
  g.pitch = kPitch;
  g.wavelength = kLambda;
  g.sensor_distance = 20e-6;
  g.depths = {1e-3, 2.5e-3};
  g.padding = padding;
  g.binning = binning;
  return g;
}

TEST(Grid, Validation) {
  auto g = small_grid(8);
  EXPECT_NO_THROW(g.validate());
  g.cells = 7;
  EXPECT_THROW(g.validate(), ConfigError);
  g = small_grid(8);
  g.depths = {1e-3, 0.0};
  EXPECT_THROW(g.validate(), ConfigError);
  g = small_grid(8, 1, 3);
  EXPECT_THROW(g.validate(), ConfigError);
  EXPECT_TRUE(small_grid(8).undersampled());
  auto fine = small_grid(8);
  fine.pitch = 200e-9;
  EXPECT_FALSE(fine.undersampled());
}

TEST(Depths, InverseSpacing) {
  const auto z = inverse_spaced_depths(1.65e-3, 6.6e-3, 8);
  ASSERT_EQ(z.size(), 8u);
  EXPECT_NEAR(z.front(), 1.65e-3, 1e-18);
  EXPECT_NEAR(z.back(), 6.6e-3, 1e-18);
  const double step = 1.0 / z[1] - 1.0 / z[0];
  for (std::size_t i = 1; i < z.size(); ++i) EXPECT_NEAR(1.0 / z[i] - 1.0 / z[i - 1], step, 1e-9 * std::abs(step));
}

TEST(IncidentField, CentreHasZeroPhase) {
  const auto g = small_grid(16);
  const auto f = incident_field(g, 1e-3);
  EXPECT_EQ(f(8, 8), Complex(1.0, 0.0));
}

TEST(IncidentField, RotationInvariantOnSymmetricSubgrid) {
  const auto g = small_grid(16);
  const auto f = incident_field(g, 0.7e-3);
  // Samples 1..15 are symmetric about the axis sample 8.
  const ComplexField sub = f.block(1, 1, 15, 15);
  for (Index i = 0; i < 15; ++i)
    for (Index j = 0; j < 15; ++j) ASSERT_LT(std::abs(sub(i, j) - sub(14 - j, i)), 1e-15);
}

TEST(IncidentField, CornerPhaseClosedForm) {
  const auto g = small_grid(16);
  const double z = 1.3e-3;
  const auto f = incident_field(g, z);
  const double x = -8.0 * kPitch;
  const double phase = (2.0 * kPi / kLambda) * (2.0 * x * x) / (2.0 * z);
  EXPECT_LT(std::abs(f(0, 0) * std::conj(f(8, 8)) - std::polar(1.0, phase)), 1e-12);
  EXPECT_THROW(incident_field(g, 0.0), ValidationError);
}

TEST(Surrogate, ConstantModel) {
  const auto samples = tabulate(kWMin, kWMax, 1, 5, [](double, Index) { return Complex(0.9, 0.0); });
  const auto m = fit_surrogate(samples, kWMin, kWMax, 4);
  const auto& c = m.coefficients(0);
  EXPECT_NEAR(c[0].real(), 0.9, 1e-15);
  for (std::size_t j = 1; j < c.size(); ++j) EXPECT_LT(std::abs(c[j]), 1e-15);
  for (double w : {kWMin, 123e-9, kWMax}) {
    const auto e = eval_surrogate(m, w, 0);
    EXPECT_NEAR(e.value.real(), 0.9, 1e-15);
    // dt/dw is per metre; compare on the unit domain
    EXPECT_LT(std::abs(e.derivative) * (kWMax - kWMin), 1e-12);
  }
}

TEST(Surrogate, LinearChebyshevDerivative) {
  const Complex c1(0.3, -0.2);
  const SurrogateModel m(kWMin, kWMax, {{Complex{}, c1}});
  const auto e = eval_surrogate(m, 200e-9, 0);
  const Complex expected = c1 * 2.0 / (kWMax - kWMin);
  EXPECT_LT(std::abs(e.derivative - expected), 1e-12 * std::abs(expected));
  // Value is c1 * T1(xi) = c1 * xi.
  const double xi = (200e-9 - 0.5 * (kWMin + kWMax)) / (0.5 * (kWMax - kWMin));
  EXPECT_LT(std::abs(e.value - c1 * xi), 1e-15);
}

TEST(Surrogate, PhaseRampDenseScan) {
  auto ramp = [](double w, Index) { return std::polar(0.98, kPi * (w - kWMin) / (kWMax - kWMin)); };
  const auto m = fit_surrogate(tabulate(kWMin, kWMax, 1, 17, ramp), kWMin, kWMax, 16);
  double worst = 0.0;
  for (int i = 0; i <= 10000; ++i) {
    const double w = kWMin + (kWMax - kWMin) * i / 10000.0;
    worst = std::max(worst, std::abs(eval_surrogate(m, w, 0).value - ramp(w, 0)));
  }
  EXPECT_LE(worst, 1e-8);
}

TEST(Surrogate, ReproducesNodes) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double a = u(rng), b = u(rng), c = u(rng);
  auto smooth = [&](double w, Index s) {
    const double x = (w - kWMin) / (kWMax - kWMin);
    return Complex(std::cos(3 * a * x + s), std::sin(2 * b * x) * c);
  };
  const auto samples = tabulate(kWMin, kWMax, 2, 12, smooth);
  const auto m = fit_surrogate(samples, kWMin, kWMax, 11);
  for (const auto& s : samples) EXPECT_LT(std::abs(eval_surrogate(m, s.width, s.state).value - s.t), 1e-10);
}

TEST(Surrogate, RejectsOffNodeSamples) {
  auto samples = tabulate(kWMin, kWMax, 1, 6, [](double, Index) { return Complex(1.0, 0.0); });
  samples[2].width += 1e-9;
  EXPECT_THROW(fit_surrogate(samples, kWMin, kWMax, 5), ConfigError);
  samples = tabulate(kWMin, kWMax, 1, 6, [](double, Index) { return Complex(1.0, 0.0); });
  EXPECT_THROW(fit_surrogate(samples, kWMin, kWMax, 6), ConfigError);
}

TEST(Surrogate, SyntheticDerivativeMatchesFiniteDifference) {
  const auto m = synthetic_surrogate(kWMin, kWMax, 2);
  for (Index s = 0; s < 2; ++s)
    for (double f : {0.1, 0.37, 0.5, 0.81}) {
      const double w = kWMin + f * (kWMax - kWMin);
      const double h = 1e-6 * (kWMax - kWMin);
      const Complex fd = (m.eval(w + h, s).value - m.eval(w - h, s).value) / (2.0 * h);
      const Complex d = m.eval(w, s).derivative;
      EXPECT_LE(std::abs(fd - d), 1e-6 * std::abs(d)) << "state " << s << " f " << f;
    }
}

TEST(Surrogate, SyntheticIsPassiveAndAccurate) {
  const auto m = synthetic_surrogate(kWMin, kWMax, 2);
  for (Index s = 0; s < 2; ++s)
    for (int i = 0; i <= 20000; ++i) {
      const double w = kWMin + (kWMax - kWMin) * i / 20000.0;
      const Complex t = m.eval(w, s).value;
      ASSERT_LE(std::abs(t), 1.0 + 1e-6);
      ASSERT_LT(std::abs(t - synthetic_transmission(w, s, kWMin, kWMax)), 1e-6);
    }
}

TEST(Surrogate, ClampsOutsideDomain) {
  const auto m = synthetic_surrogate(kWMin, kWMax);
  const std::size_t before = m.clamp_count();
  const auto e = m.eval(kWMax * 2.0, 0);
  EXPECT_EQ(m.clamp_count(), before + 1);
  EXPECT_LT(std::abs(e.value - m.eval(kWMax, 0).value), 1e-15);
}

TEST(Geometry, LogisticBoundsAndJacobian) {
  RealField theta(2, 2);
  theta << -40.0, -1.0, 0.5, 40.0;
  const MetasurfaceGeometry geo{theta, kWMin, kWMax};
  const RealField p = geo.widths();
  EXPECT_GE(p.minCoeff(), kWMin);
  EXPECT_LE(p.maxCoeff(), kWMax);
  const RealField jac = geo.width_jacobian();
  const double h = 1e-6;
  MetasurfaceGeometry plus{theta + h, kWMin, kWMax}, minus{theta - h, kWMin, kWMax};
  const RealField fd = (plus.widths() - minus.widths()) / (2 * h);
  EXPECT_LT((fd - jac).abs().maxCoeff(), 1e-7 * (kWMax - kWMin));
  RealField inner(1, 2);
  inner << -1.0, 0.5;
  const RealField back = MetasurfaceGeometry::latent_from_widths(
      MetasurfaceGeometry{inner, kWMin, kWMax}.widths(), kWMin, kWMax);
  EXPECT_LT((back - inner).abs().maxCoeff(), 1e-9);
}

ComplexField random_field(Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  ComplexField f(n, n);
  for (Index i = 0; i < f.size(); ++i) f.data()[i] = Complex(n01(rng), n01(rng));
  return f;
}

double energy(const ComplexField& f) { return f.abs2().sum(); }

TEST(Propagate, ConservesEnergyOnPropagatingBand) {
  // 470 nm pitch at 550 nm: every sampled frequency propagates.
  const auto g = small_grid(32);
  const auto f = random_field(32, 1);
  EXPECT_NEAR(energy(propagate(f, 37e-6, g)), energy(f), 1e-10 * energy(f));

  // Finer sampling has an evanescent band; compare with the band-limited input.
  auto fine = g;
  fine.pitch = 150e-9;
  const ComplexField mask = transfer_function(fine, 32, 0.0).abs().cast<Complex>();
  ASSERT_LT(mask.real().sum(), 32.0 * 32.0);
  const ComplexField limited = detail::apply_transfer(f, mask, false);
  EXPECT_NEAR(energy(propagate(f, 5e-6, fine)), energy(limited), 1e-10 * energy(limited));
}

TEST(Propagate, Semigroup) {
  const auto g = small_grid(32);
  const auto f = random_field(32, 2);
  const ComplexField two = propagate(propagate(f, 13e-6, g), 29e-6, g);
  const ComplexField one = propagate(f, 42e-6, g);
  EXPECT_LT((two - one).abs().maxCoeff(), 1e-8 * f.abs().maxCoeff());
}

TEST(Propagate, AdjointIdentity) {
  auto g = small_grid(16);
  g.pitch = 200e-9;
  const auto a = random_field(16, 3), b = random_field(16, 4);
  const Complex lhs = (propagate(a, 9e-6, g) * b.conjugate()).sum();
  const Complex rhs = (a * propagate_adjoint(b, 9e-6, g).conjugate()).sum();
  EXPECT_LT(std::abs(lhs - rhs), 1e-11 * std::abs(lhs));
}

TEST(Propagate, QuadraticLensFocuses) {
  const auto g = small_grid(128);
  const double focal = 100e-6, k = g.wavenumber();
  ComplexField f(128, 128);
  for (Index i = 0; i < 128; ++i)
    for (Index j = 0; j < 128; ++j) {
      const double x = sample_position(g, j), y = sample_position(g, i);
      f(i, j) = std::polar(1.0, -k * (x * x + y * y) / (2.0 * focal));
    }
  const RealField intensity = propagate(f, focal, g).abs2();
  Index r = 0, c = 0;
  const double peak = intensity.maxCoeff(&r, &c);
  EXPECT_EQ(r, 64);
  EXPECT_EQ(c, 64);
  EXPECT_GE(peak, 100.0 * intensity.mean());
}

// Direct O(N^4) angular-spectrum oracle, independent of the FFT path.
RealField direct_no_surface_psf(const OpticalGrid& g, double depth) {
  const Index s = g.window();
  const double k = 2.0 * kPi / g.wavelength;
  ComplexField field = ComplexField::Zero(s, s);
  for (Index i = g.padding; i < g.padding + g.cells; ++i)
    for (Index j = g.padding; j < g.padding + g.cells; ++j) {
      const double x = (j - s / 2) * g.pitch, y = (i - s / 2) * g.pitch;
      field(i, j) = std::exp(Complex(0.0, k * (x * x + y * y) / (2.0 * depth)));
    }
  auto freq = [&](Index a) { return static_cast<double>(((a + s / 2) % s) - s / 2) / (s * g.pitch); };
  ComplexField spec = ComplexField::Zero(s, s);
  for (Index a = 0; a < s; ++a)
    for (Index b = 0; b < s; ++b) {
      Complex acc{};
      for (Index i = 0; i < s; ++i)
        for (Index j = 0; j < s; ++j)
          acc += field(i, j) * std::exp(Complex(0.0, -2.0 * kPi * static_cast<double>(a * i + b * j) / s));
      const double arg = 1.0 / (g.wavelength * g.wavelength) - freq(a) * freq(a) - freq(b) * freq(b);
      spec(a, b) = arg > 0 ? acc * std::exp(Complex(0.0, 2.0 * kPi * g.sensor_distance * std::sqrt(arg))) : 0.0;
    }
  RealField out(s, s);
  for (Index i = 0; i < s; ++i)
    for (Index j = 0; j < s; ++j) {
      Complex acc{};
      for (Index a = 0; a < s; ++a)
        for (Index b = 0; b < s; ++b)
          acc += spec(a, b) * std::exp(Complex(0.0, 2.0 * kPi * static_cast<double>(a * i + b * j) / s));
      out(i, j) = std::norm(acc / static_cast<double>(s * s));
    }
  return out;
}

TEST(PsfStack, NoSurfaceMatchesDirectDiffraction) {
  auto g = small_grid(8, 4);
  g.pitch = 250e-9;  // include an evanescent band
  const auto stack = compute_psf_stack(uniform_geometry(8, kWMin, kWMax),
                                       constant_surrogate(kWMin, kWMax, Complex(1.0, 0.0)), g);
  const RealField ref0 = direct_no_surface_psf(g, g.depths[0]);
  const RealField ref1 = direct_no_surface_psf(g, g.depths[1]);
  const double scale = ref0.sum();
  EXPECT_LT((stack.at(0, 0) - ref0 / scale).abs().maxCoeff(), 1e-10 * (ref0 / scale).maxCoeff());
  EXPECT_LT((stack.at(1, 0) - ref1 / scale).abs().maxCoeff(), 1e-10 * (ref1 / scale).maxCoeff());
  EXPECT_NEAR(stack.at(0, 0).sum(), 1.0, 1e-12);
}

TEST(PsfStack, IdenticalStatesGiveIdenticalPsfs) {
  const auto g = small_grid(16, 2);
  const auto c = synthetic_surrogate(kWMin, kWMax, 1).coefficients(0);
  const SurrogateModel twin(kWMin, kWMax, {c, c});
  const auto stack = compute_psf_stack(random_geometry(16, kWMin, kWMax, 5), twin, g);
  for (Index d = 0; d < 2; ++d) EXPECT_EQ((stack.at(d, 0) - stack.at(d, 1)).abs().maxCoeff(), 0.0);
}

TEST(PsfStack, NonNegativeFiniteWithEnergy) {
  const auto g = small_grid(16, 2, 2);
  const auto stack = compute_psf_stack(random_geometry(16, kWMin, kWMax, 6),
                                       synthetic_surrogate(kWMin, kWMax, 2), g);
  EXPECT_EQ(stack.rows(), 10);
  for (const auto& p : stack.psfs) {
    EXPECT_TRUE(p.allFinite());
    EXPECT_GE(p.minCoeff(), 0.0);
    EXPECT_GT(p.sum(), 0.0);
  }
}

OpticalGrid lens_grid() {
  OpticalGrid g;
  g.cells = 64;
  g.pitch = kPitch;
  g.wavelength = kLambda;
  g.sensor_distance = 40e-6;
  g.depths = inverse_spaced_depths(0.2e-3, 2e-3, 7);
  return g;
}

TEST(PsfStack, LensFocusesAtDesignDepth) {
  const auto g = lens_grid();
  const double z_star = g.depths[3];
  const auto stack =
      compute_psf_stack(lens_geometry(g, kWMin, kWMax, z_star), synthetic_surrogate(kWMin, kWMax), g);
  const RealField& psf = stack.at(3, 0);
  Index r = 0, c = 0;
  const double peak = psf.maxCoeff(&r, &c);
  EXPECT_EQ(r, 32);
  EXPECT_EQ(c, 32);
  EXPECT_GE(peak, 100.0 * psf.mean());

  std::vector<double> peaks;
  for (Index d = 0; d < 7; ++d) peaks.push_back(stack.at(d, 0).maxCoeff());
  for (Index d = 0; d < 3; ++d) EXPECT_LT(peaks[static_cast<std::size_t>(d)], peaks[static_cast<std::size_t>(d + 1)]);
  for (Index d = 3; d < 6; ++d) EXPECT_GT(peaks[static_cast<std::size_t>(d)], peaks[static_cast<std::size_t>(d + 1)]);
}

PsfStack random_cotangent(const PsfStack& like, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  PsfStack c = like;
  for (auto& p : c.psfs)
    for (Index i = 0; i < p.size(); ++i) p.data()[i] = n01(rng);
  return c;
}

double probe(const MetasurfaceGeometry& geo, const SurrogateModel& sm, const OpticalGrid& g, const PsfStack& c) {
  const auto st = compute_psf_stack(geo, sm, g);
  double f = 0.0;
  for (std::size_t k = 0; k < st.psfs.size(); ++k) f += (st.psfs[k] * c.psfs[k]).sum();
  return f;
}

void expect_vjp_matches_fd(const OpticalGrid& g, const SurrogateModel& sm, std::uint64_t seed) {
  const auto geo = random_geometry(g.cells, kWMin, kWMax, seed);
  const auto cot = random_cotangent(compute_psf_stack(geo, sm, g), seed + 100);
  const RealField grad = psf_vjp(geo, sm, g, cot);
  RealField fd(g.cells, g.cells);
  const double h = 1e-5;
  for (Index i = 0; i < grad.size(); ++i) {
    auto plus = geo, minus = geo;
    plus.theta.data()[i] += h;
    minus.theta.data()[i] -= h;
    fd.data()[i] = (probe(plus, sm, g, cot) - probe(minus, sm, g, cot)) / (2 * h);
  }
  const double scale = grad.abs().maxCoeff();
  ASSERT_GT(scale, 0.0);
  EXPECT_LE((fd - grad).matrix().norm(), 1e-5 * grad.matrix().norm());
  for (Index i = 0; i < grad.size(); ++i)
    EXPECT_LE(std::abs(fd.data()[i] - grad.data()[i]), 1e-5 * std::max(std::abs(grad.data()[i]), 1e-2 * scale))
        << "theta " << i;
}

TEST(PsfVjp, ZeroCotangent) {
  const auto g = small_grid(8);
  const auto sm = synthetic_surrogate(kWMin, kWMax, 2);
  const auto geo = random_geometry(8, kWMin, kWMax, 1);
  auto cot = compute_psf_stack(geo, sm, g);
  for (auto& p : cot.psfs) p.setZero();
  EXPECT_EQ(psf_vjp(geo, sm, g, cot).abs().maxCoeff(), 0.0);
}

TEST(PsfVjp, FiniteDifference8x8) { expect_vjp_matches_fd(small_grid(8), synthetic_surrogate(kWMin, kWMax, 2), 11); }

TEST(PsfVjp, FiniteDifferencePaddedBinned16x16) {
  expect_vjp_matches_fd(small_grid(16, 2, 2), synthetic_surrogate(kWMin, kWMax, 2), 12);
}

TEST(PsfVjp, CrossStateCoupling) {
  const auto g = small_grid(8, 2);
  const auto sm = synthetic_surrogate(kWMin, kWMax, 2);
  const auto geo = random_geometry(8, kWMin, kWMax, 3);
  auto cot = random_cotangent(compute_psf_stack(geo, sm, g), 4);
  for (Index d = 0; d < 2; ++d) cot.at(d, 0).setZero();
  // Only state-1 PSFs are probed, yet the shared geometry receives gradient.
  EXPECT_GT(psf_vjp(geo, sm, g, cot).abs().maxCoeff(), 0.0);
}

TEST(PsfVjp, StateSymmetryProbe) {
  const auto g = small_grid(8, 2);
  const auto c = synthetic_surrogate(kWMin, kWMax, 1).coefficients(0);
  const auto geo = random_geometry(8, kWMin, kWMax, 7);
  const SurrogateModel twin(kWMin, kWMax, {c, c});
  auto cot = random_cotangent(compute_psf_stack(geo, twin, g), 8);
  for (Index d = 0; d < 2; ++d) cot.at(d, 1).setZero();
  const RealField base = psf_vjp(geo, twin, g, cot);

  // Perturbing the unprobed state leaves the gradient untouched.
  auto c_other = c;
  c_other[3] += Complex(0.05, -0.02);
  const RealField other = psf_vjp(geo, SurrogateModel(kWMin, kWMax, {c, c_other}), g, cot);
  EXPECT_LE((other - base).abs().maxCoeff(), 1e-12 * base.abs().maxCoeff());

  // Perturbing the probed state changes it.
  const RealField same = psf_vjp(geo, SurrogateModel(kWMin, kWMax, {c_other, c}), g, cot);
  EXPECT_GT((same - base).abs().maxCoeff(), 1e-6 * base.abs().maxCoeff());
}

TEST(PsfVjp, ShapeMismatch) {
  const auto g = small_grid(8);
  const auto sm = synthetic_surrogate(kWMin, kWMax, 2);
  const auto geo = random_geometry(8, kWMin, kWMax, 1);
  auto cot = compute_psf_stack(geo, sm, g);
  cot.psfs.pop_back();
  EXPECT_THROW(psf_vjp(geo, sm, g, cot), ConfigError);
  EXPECT_THROW(compute_psf_stack(random_geometry(6, kWMin, kWMax, 1), sm, g), ConfigError);
}

}  // namespace
}  // namespace metacs::optics
