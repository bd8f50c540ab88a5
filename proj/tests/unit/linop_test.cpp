#include <gtest/gtest.h>

#include <Eigen/SVD>

#include <random>

#include "metacs/linop.hpp"

namespace metacs {
namespace {

RealField random_field(Index r, Index c, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  RealField f(r, c);
  for (Index i = 0; i < f.size(); ++i) f.data()[i] = u(rng);
  return f;
}

// Direct-summation oracle: full linear convolution per channel, summed,
// centre-cropped (extra margin pixel on the low-index side).
Matrix direct_conv_matrix(const ConvMeasurementSpec& s) {
  const Index pr = s.psfs.front().rows(), pc = s.psfs.front().cols();
  const Index lr = s.object.rows + pr - 1, lc = s.object.cols + pc - 1;
  const Index o_r = (lr - s.sensor_rows + 1) / 2, o_c = (lc - s.sensor_cols + 1) / 2;
  Matrix m = Matrix::Zero(s.shots * s.sensor_rows * s.sensor_cols, s.object.size());
  for (Index sh = 0; sh < s.shots; ++sh)
    for (Index a = 0; a < s.sensor_rows; ++a)
      for (Index b = 0; b < s.sensor_cols; ++b)
        for (Index i = 0; i < s.object.rows; ++i)
          for (Index j = 0; j < s.object.cols; ++j)
            for (Index c = 0; c < s.object.channels; ++c) {
              const Index kr = a + o_r - i, kc = b + o_c - j;
              if (kr < 0 || kr >= pr || kc < 0 || kc >= pc) continue;
              const auto& k = s.psfs[static_cast<std::size_t>(sh * s.object.channels + c)];
              m(sh * s.sensor_rows * s.sensor_cols + a * s.sensor_cols + b, s.object.index(i, j, c)) +=
                  k(kr, kc);
            }
  return m;
}

ConvMeasurementSpec random_spec(ObjectDims obj, Index pr, Index pc, Index sr, Index sc, Index shots,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ConvMeasurementSpec s;
  s.object = obj;
  s.sensor_rows = sr;
  s.sensor_cols = sc;
  s.shots = shots;
  for (Index k = 0; k < shots * obj.channels; ++k) s.psfs.push_back(random_field(pr, pc, rng));
  return s;
}

TEST(ConvMeasurement, CenteredDeltaIsIdentity) {
  ConvMeasurementSpec s;
  s.object = {5, 6, 1};
  s.sensor_rows = 5;
  s.sensor_cols = 6;
  RealField k = RealField::Zero(5, 6);
  k(5 / 2, 6 / 2) = 1.0;
  s.psfs = {k};
  const auto op = make_conv_measurement(s);
  std::mt19937_64 rng(3);
  const Vector x = gaussian_vector(30, rng);
  EXPECT_LT((op.apply(x) - x).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ConvMeasurement, ShiftedDeltaShiftsOneHot) {
  ConvMeasurementSpec s;
  s.object = {4, 4, 1};
  s.sensor_rows = 4;
  s.sensor_cols = 4;
  RealField k = RealField::Zero(4, 4);
  k(4 / 2 + 1, 4 / 2) = 1.0;
  s.psfs = {k};
  const auto op = make_conv_measurement(s);
  Vector x = Vector::Zero(16);
  x[0] = 1.0;
  const Vector y = op.apply(x);
  Vector expected = Vector::Zero(16);
  expected[1 * 4 + 0] = 1.0;
  EXPECT_LT((y - expected).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ConvMeasurement, MatchesDenseOracle8x8) {
  const auto s = random_spec({8, 8, 1}, 8, 8, 4, 4, 1, 11);
  const Matrix dense = materialize(make_conv_measurement(s));
  EXPECT_LT((dense - direct_conv_matrix(s)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ConvMeasurement, MatchesDenseOracleAcrossShapes) {
  // Odd/even objects, kernels and sensors, multiple channels and shots.
  std::uint64_t seed = 100;
  for (Index n : {3, 4, 7, 12})
    for (Index p : {1, 2, 5, 8, 12})
      for (Index sensor : {1, 2, 3, 6}) {
        if (sensor > n + p - 1) continue;
        for (Index channels : {1, 2})
          for (Index shots : {1, 2}) {
            const auto s = random_spec({n, n == 12 ? 11 : n, channels}, p, p == 1 ? 1 : p - 1, sensor,
                                       std::min<Index>(sensor + 1, n + p - 2 + (n == 12 ? 0 : 1)), shots,
                                       seed++);
            if (s.sensor_cols < 1 || s.sensor_cols > s.object.cols + s.psfs[0].cols() - 1) continue;
            const Matrix dense = materialize(make_conv_measurement(s));
            ASSERT_LT((dense - direct_conv_matrix(s)).cwiseAbs().maxCoeff(), 1e-12)
                << "n=" << n << " p=" << p << " sensor=" << sensor << " ch=" << channels
                << " shots=" << shots;
          }
      }
}

TEST(ConvMeasurement, RejectsBadKernels) {
  auto s = random_spec({4, 4, 1}, 3, 3, 4, 4, 1, 1);
  s.psfs[0](1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(make_conv_measurement(s), ValidationError);
  s = random_spec({4, 4, 1}, 3, 3, 4, 4, 1, 1);
  s.psfs[0](0, 0) = -0.5;
  EXPECT_THROW(make_conv_measurement(s), ValidationError);
  s = random_spec({4, 4, 1}, 3, 3, 7, 4, 1, 1);
  EXPECT_THROW(make_conv_measurement(s), ConfigError);
  s = random_spec({4, 4, 2}, 3, 3, 4, 4, 1, 1);
  s.psfs.pop_back();
  EXPECT_THROW(make_conv_measurement(s), ConfigError);
}

TEST(ConvMeasurement, PsfGradientMatchesDenseOuterProduct) {
  // d<w, G(psf) x>/d psf via the dense oracle: perturb each kernel entry.
  const auto s = random_spec({5, 4, 2}, 4, 3, 3, 4, 2, 21);
  const auto op = make_conv_measurement(s);
  std::mt19937_64 rng(5);
  const Vector x = gaussian_vector(op.cols(), rng);
  const Vector w = gaussian_vector(op.rows(), rng);
  const auto grad = op.target<ConvMeasurement>()->psf_gradient({{x, w}});
  for (std::size_t k = 0; k < s.psfs.size(); ++k)
    for (Index i = 0; i < s.psfs[k].rows(); ++i)
      for (Index j = 0; j < s.psfs[k].cols(); ++j) {
        auto sp = s;
        for (auto& p : sp.psfs) p.setZero();
        sp.psfs[k](i, j) = 1.0;
        const double expected = w.dot(direct_conv_matrix(sp) * x);
        ASSERT_NEAR(grad[k](i, j), expected, 1e-12);
      }
}

TEST(TvGradient, ConstantHasZeroGradientAndDivergence) {
  const auto op = make_tv_gradient({{5, 7, 2}, true});
  EXPECT_EQ(op.rows(), 3 * 70);
  EXPECT_LT(op.apply(Vector::Constant(70, 3.5)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT(op.adjoint(Vector::Constant(op.rows(), 1.25)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(TvGradient, HandDifferences2x2) {
  const auto op = make_tv_gradient({{2, 2, 1}, false});
  Vector x(4);
  x << 1, 2, 3, 4;
  Vector expected(8);
  expected << 1, -1, 1, -1, 2, 2, -2, -2;
  EXPECT_EQ(op.apply(x), expected);
}

TEST(TvGradient, RowsSumToZero) {
  const Matrix m = materialize(make_tv_gradient({{3, 4, 2}, true}));
  EXPECT_LT(m.rowwise().sum().cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GaussianCirculant, DeltaGeneratorIsTruncatedIdentity) {
  GaussianCirculantSpec s;
  s.n = 4;
  s.m = 3;
  s.generator = Vector::Unit(4, 0);
  const Matrix m = materialize(make_gaussian_circulant(s));
  EXPECT_LT((m - Matrix::Identity(3, 4)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GaussianCirculant, RowsAreRotations) {
  GaussianCirculantSpec s;
  s.n = 64;
  s.m = 32;
  s.seed = 17;
  const auto op = make_gaussian_circulant(s);
  const Matrix m = materialize(op);
  const Vector& g = op.target<GaussianCirculant>()->generator();
  for (Index i = 0; i < 32; ++i)
    for (Index j = 0; j < 64; ++j) {
      ASSERT_NEAR(m(i, j), g[((i - j) % 64 + 64) % 64], 1e-12);
      if (i + 1 < 32) ASSERT_NEAR(m(i + 1, (j + 1) % 64), m(i, j), 1e-12);
    }
}

TEST(GaussianCirculant, UnitColumnNormsOnAverage) {
  GaussianCirculantSpec s;
  s.n = 4096;
  s.m = 4096;
  s.seed = 5;
  const auto op = make_gaussian_circulant(s);
  // Every column of a full circulant has the generator's squared norm.
  const double norm2 = op.target<GaussianCirculant>()->generator().squaredNorm();
  EXPECT_NEAR(norm2, 1.0, 0.2);
  const Vector col = op.apply(Vector::Unit(4096, 123));
  EXPECT_NEAR(col.squaredNorm(), norm2, 1e-12);
}

TEST(GaussianCirculant, SeedReproducibleBitwise) {
  GaussianCirculantSpec s;
  s.n = 128;
  s.m = 40;
  s.seed = 99;
  std::mt19937_64 rng(1);
  const Vector x = gaussian_vector(128, rng);
  const Vector a = make_gaussian_circulant(s).apply(x);
  const Vector b = make_gaussian_circulant(s).apply(x);
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(double) * 40));
}

TEST(GaussianCirculant, RejectsTooManyRows) {
  GaussianCirculantSpec s;
  s.n = 8;
  s.m = 9;
  EXPECT_THROW(make_gaussian_circulant(s), ConfigError);
}

class BrokenAdjoint final : public LinearOperatorBase {
 public:
  explicit BrokenAdjoint(Matrix m) : m_(std::move(m)) {}
  Index rows() const override { return m_.rows(); }
  Index cols() const override { return m_.cols(); }
  void apply(const Vector& x, Vector& y) const override { y = m_ * x; }
  void apply_adjoint(const Vector& y, Vector& x) const override {
    x = m_.transpose() * y;
    x[0] += 0.5 * y.sum();
  }
  std::string name() const override { return "broken"; }

 private:
  Matrix m_;
};

TEST(DotTest, AllShippedOperatorsOnTenSeeds) {
  std::vector<LinearOperator> ops;
  ops.push_back(make_identity(17));
  ops.push_back(make_conv_measurement(random_spec({9, 8, 3}, 6, 7, 5, 6, 1, 1)));
  ops.push_back(make_conv_measurement(random_spec({16, 16, 2}, 32, 32, 8, 8, 2, 2)));
  ops.push_back(make_tv_gradient({{5, 5, 1}, false}));
  ops.push_back(make_tv_gradient({{4, 6, 3}, true}));
  GaussianCirculantSpec g;
  g.n = 128;
  g.m = 64;
  g.seed = 3;
  ops.push_back(make_gaussian_circulant(g));
  ops.push_back(make_stacked({ops[1], ops[1]}));
  for (const auto& op : ops)
    for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_LE(dot_test(op, seed), 1e-10) << op.name();
  for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_LE(dot_test(ops[3], seed), 1e-12);
}

TEST(DotTest, IdentityIsExact) { EXPECT_LT(dot_test(make_identity(50), 4), 1e-15); }

TEST(DotTest, DetectsCorruptedAdjoint) {
  std::mt19937_64 rng(8);
  Matrix m(6, 9);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::normal_distribution<double>()(rng);
  const LinearOperator op(std::make_shared<BrokenAdjoint>(m));
  EXPECT_GT(dot_test(op, 2), 1e-3);
}

TEST(OperatorNorm, ScaledIdentity) {
  EXPECT_NEAR(operator_norm(make_identity(10, 2.0), 5), 4.0 * kOperatorNormSafety, 1e-12);
}

TEST(OperatorNorm, DeltaKernel) {
  ConvMeasurementSpec s;
  s.object = {6, 6, 1};
  s.sensor_rows = 6;
  s.sensor_cols = 6;
  RealField k = RealField::Zero(6, 6);
  k(3, 3) = 1.0;
  s.psfs = {k};
  EXPECT_NEAR(operator_norm(make_conv_measurement(s), 10), kOperatorNormSafety, 1e-12);
}

TEST(OperatorNorm, MatchesDenseSvd) {
  std::mt19937_64 rng(42);
  Matrix m(16, 32);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::normal_distribution<double>()(rng);
  const double smax = Eigen::JacobiSVD<Matrix>(m).singularValues()[0];
  const double est = operator_norm(make_dense(m), 100) / kOperatorNormSafety;
  EXPECT_NEAR(est, smax * smax, 0.02 * smax * smax);
  EXPECT_LE(est, smax * smax * (1 + 1e-12));
}

TEST(OperatorNorm, ZeroOperator) { EXPECT_EQ(operator_norm(make_dense(Matrix::Zero(3, 4))), 0.0); }

}  // namespace
}  // namespace metacs
