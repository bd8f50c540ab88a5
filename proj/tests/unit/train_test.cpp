#include <gtest/gtest.h>

#include <sstream>

#include "support/toy.hpp"

namespace metacs::train {
namespace {

TEST(LossAndGrad, IdenticalSeedsAverageToSingle) {
  const auto c = toy::small_config();
  const auto st = initial_state(c);
  const auto pl = build_pipeline(c, st.theta);
  const std::uint64_t s = 1234;
  const auto one = loss_and_grad(st, c, pl, {s});
  const auto three = loss_and_grad(st, c, pl, {s, s, s});
  EXPECT_NEAR(three.loss, one.loss, 1e-14 * one.loss);
  EXPECT_LE((three.grad_theta - one.grad_theta).abs().maxCoeff(), 1e-12 * one.grad_theta.abs().maxCoeff());
  EXPECT_NEAR(three.grad_log_alpha, one.grad_log_alpha, 1e-12 * std::abs(one.grad_log_alpha));
  EXPECT_NEAR(three.grad_log_beta, one.grad_log_beta, 1e-12 * std::abs(one.grad_log_beta));
}

TEST(LossAndGrad, DeadZoneHasUnitLossAndNoGeometryGradient) {
  auto c = toy::small_config();
  c.alpha0 = 1e12;
  c.beta0 = 1.0;
  const auto st = initial_state(c);
  const auto g = loss_and_grad(st, c, batch_seeds(c, 0));
  EXPECT_EQ(g.loss, 1.0);
  EXPECT_EQ(g.grad_theta.abs().maxCoeff(), 0.0);
  EXPECT_EQ(g.grad_log_alpha, 0.0);
  EXPECT_EQ(g.grad_log_beta, 0.0);
}

TEST(LossAndGrad, ThreadsDoNotChangeResults) {
  auto c = toy::small_config();
  const auto st = initial_state(c);
  const auto a = loss_and_grad(st, c, batch_seeds(c, 0));
  c.threads = 3;
  const auto b = loss_and_grad(st, c, batch_seeds(c, 0));
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ((a.grad_theta - b.grad_theta).abs().maxCoeff(), 0.0);
}

TEST(LossAndGrad, TooManyDroppedRaises) {
  auto c = toy::small_config();
  c.solver.max_iters = 1;
  const auto st = initial_state(c);
  EXPECT_THROW(loss_and_grad(st, c, batch_seeds(c, 0)), SolverError);
}

TEST(Audit, EndToEndGradientsMatchFiniteDifferences) {
  const auto c = toy::small_config();
  const auto st = initial_state(c);
  AuditOptions ao;
  ao.theta_coords = 18;
  ao.seed = 3;
  const auto rep = finite_diff_audit(c, st, ao);
  ASSERT_EQ(rep.entries.size(), 20u);
  for (const auto& e : rep.entries)
    if (!e.pass)
      ADD_FAILURE_AT(__FILE__, __LINE__) << "note: " << e.parameter << "[" << e.index << "] analytic " << e.analytic
                                         << " fd " << e.finite_diff << " flip " << e.support_flip;
  EXPECT_GE(rep.pass_rate, 0.9);
  EXPECT_EQ(rep.unexplained, 0);
}

TEST(Audit, ZeroGradientConfig) {
  auto c = toy::small_config();
  c.alpha0 = 1e12;
  c.beta0 = 1.0;
  const auto rep = finite_diff_audit(c, initial_state(c));
  for (const auto& e : rep.entries) {
    EXPECT_EQ(e.analytic, 0.0);
    EXPECT_EQ(e.finite_diff, 0.0);
    EXPECT_TRUE(e.pass);
  }
}

TEST(Audit, LargeStepFlipsMoreSupports) {
  const auto c = toy::small_config();
  const auto st = initial_state(c);
  AuditOptions small, large;
  small.theta_coords = large.theta_coords = 16;
  small.step = 1e-5;
  large.step = 1e-1;
  const auto a = finite_diff_audit(c, st, small);
  const auto b = finite_diff_audit(c, st, large);
  EXPECT_GT(b.flip_rate, a.flip_rate);
}

TEST(Run, ZeroLearningRateKeepsState) {
  auto c = toy::small_config();
  c.adam.lr_theta = 0.0;
  c.adam.lr_log = 0.0;
  c.fixed_batch = true;
  c.iterations = 4;
  const auto st0 = initial_state(c);
  const auto res = run(c);
  EXPECT_EQ((res.state.theta - st0.theta).abs().maxCoeff(), 0.0);
  EXPECT_EQ(res.state.log_alpha, st0.log_alpha);
  EXPECT_EQ(res.state.log_beta, st0.log_beta);
  ASSERT_EQ(res.state.loss_history.size(), 4u);
  for (double l : res.state.loss_history) EXPECT_EQ(l, res.state.loss_history.front());
}

TEST(Run, DeterministicHistory) {
  auto c = toy::small_config();
  c.iterations = 4;
  const auto a = run(c), b = run(c);
  ASSERT_EQ(a.state.loss_history.size(), 4u);
  EXPECT_EQ(a.state.loss_history, b.state.loss_history);
  EXPECT_EQ((a.state.theta - b.state.theta).abs().maxCoeff(), 0.0);
  EXPECT_EQ(a.validation, b.validation);
}

TEST(Run, PositiveHyperparametersAndCallback) {
  auto c = toy::small_config();
  c.iterations = 6;
  c.validation_every = 3;
  int calls = 0;
  const auto res = run(c, std::nullopt, [&](const HistoryRow& r, const TrainState& s) {
    EXPECT_EQ(r.iter, calls);
    EXPECT_GT(s.alpha(), 0.0);
    EXPECT_GT(s.beta(), 0.0);
    ++calls;
  });
  EXPECT_EQ(calls, 6);
  ASSERT_EQ(res.validation.size(), 3u);
  EXPECT_EQ(res.validation[1].first, 3);
  EXPECT_EQ(res.validation[2].first, 6);
}

TEST(Run, TrainingLowersFixedBatchLoss) {
  auto c = toy::small_config();
  c.fixed_batch = true;
  c.iterations = 25;
  const auto res = run(c);
  EXPECT_LT(res.state.loss_history.back(), 0.9 * res.state.loss_history.front());
}

TEST(Checkpoint, RoundTripAndResume) {
  auto c = toy::small_config();
  c.iterations = 2;
  const auto dir = std::filesystem::temp_directory_path() / "metacs_ckpt_test";
  std::filesystem::remove_all(dir);
  c.checkpoint_dir = dir;
  c.checkpoint_every = 1;
  const auto res = run(c);
  ASSERT_TRUE(std::filesystem::exists(dir / "iter_1" / "theta.npy"));
  const auto back = load_checkpoint(dir / "final");
  EXPECT_EQ((back.theta - res.state.theta).abs().maxCoeff(), 0.0);
  EXPECT_EQ(back.log_alpha, res.state.log_alpha);
  EXPECT_EQ(back.loss_history, res.state.loss_history);

  // Resuming from iteration 1 reproduces the uninterrupted run.
  c.checkpoint_dir.reset();
  const auto resumed = run(c, load_checkpoint(dir / "iter_1"));
  EXPECT_EQ(resumed.state.loss_history, res.state.loss_history);
  EXPECT_EQ((resumed.state.theta - res.state.theta).abs().maxCoeff(), 0.0);
  std::filesystem::remove_all(dir);
}

TEST(Log, CsvColumns) {
  std::ostringstream os;
  write_log_csv(os, {{0, 0.5, 2.0, 3.0, 0.1, 0}});
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "iter,loss,alpha,beta,grad_norm,dropped_count");
}

TEST(Config, Validation) {
  auto c = toy::small_config();
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy::small_config();
  c.object.channels = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy::small_config();
  c.alpha0 = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = toy::small_config();
  c.theta0 = RealField::Zero(4, 4);
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace metacs::train
