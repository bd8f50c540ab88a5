#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include "metacs/linop/operator.hpp"

namespace metacs {

enum class Regularizer { identity, tv };

/// min_x |Gx - y|^2 + alpha |Psi x|_1 + beta |x|^2
struct LassoProblem {
  LinearOperator G;
  Vector y;
  double alpha = 0.0;
  double beta = 0.0;
  Regularizer psi_kind = Regularizer::identity;
  /// Sparsifying transform for Regularizer::tv; ignored for identity.
  std::optional<LinearOperator> psi;
};

struct SolverOptions {
  int max_iters = 20000;
  /// Stop when |x_{k+1} - x_k| / max(|x_k|, eps) <= tol.
  double tol = 1e-7;
  /// Objective trace cadence (iterations between recorded values); 0 disables.
  int check_every = 0;
  /// Restart momentum whenever the objective increases.
  bool restart = true;
  /// Lipschitz constant of grad |Gx - y|^2 (2 |G|^2). Computed by power
  /// iteration when absent.
  std::optional<double> lipschitz;
};

struct LassoSolution {
  Vector u_est;
  int iterations = 0;
  bool converged = false;
  double final_objective = 0.0;
  double step_size = 0.0;
  int restarts = 0;
  std::vector<std::pair<int, double>> objective_trace;
};

/// sign(v) * max(|v| - t, 0), elementwise.
inline Vector soft_threshold(const Vector& v, double t) {
  if (t < 0.0) throw ConfigError("soft_threshold: negative threshold");
  return v.unaryExpr([t](double x) {
    const double a = std::abs(x) - t;
    return a > 0.0 ? std::copysign(a, x) : 0.0;
  });
}

inline double lasso_objective(const LassoProblem& p, const Vector& x, const Vector& gx) {
  return (gx - p.y).squaredNorm() + p.alpha * x.lpNorm<1>() + p.beta * x.squaredNorm();
}

inline void validate_problem(const LassoProblem& p) {
  if (!p.G) throw ConfigError("lasso: missing operator");
  if (p.alpha < 0.0 || p.beta < 0.0) throw ConfigError("lasso: alpha and beta must be >= 0");
  if (p.y.size() != p.G.rows()) throw ConfigError("lasso: y length does not match operator rows");
  if (!p.y.allFinite()) throw ValidationError("lasso: y contains non-finite values");
  if (!std::isfinite(p.alpha) || !std::isfinite(p.beta))
    throw ValidationError("lasso: non-finite regularization weight");
}

/// FISTA with monotone restart. beta is kept in the smooth term so the
/// proximal step is the exact l1 shrinkage.
inline LassoSolution solve(const LassoProblem& p, const SolverOptions& opts = {},
                           const std::optional<Vector>& warm_start = std::nullopt) {
  validate_problem(p);
  if (p.psi_kind != Regularizer::identity)
    throw UnsupportedError("lasso solve: only the identity regularizer is supported");
  if (opts.max_iters < 1) throw ConfigError("lasso: max_iters must be >= 1");
  if (!(opts.tol > 0.0)) throw ConfigError("lasso: tol must be > 0");

  const double lip_data = opts.lipschitz ? *opts.lipschitz : 2.0 * operator_norm(p.G);
  const double lip = lip_data + 2.0 * p.beta;

  LassoSolution sol;
  const Index n = p.G.cols();
  Vector x = warm_start ? *warm_start : Vector::Zero(n);
  if (x.size() != n) throw ConfigError("lasso: warm start length mismatch");
  if (lip <= 0.0) {
    // G = 0 and beta = 0: any x with zero l1 norm is optimal.
    sol.u_est = Vector::Zero(n);
    sol.converged = true;
    sol.final_objective = p.y.squaredNorm();
    return sol;
  }
  const double step = 1.0 / lip;
  sol.step_size = step;

  Vector gx = p.G.apply(x);
  Vector z = x;
  Vector gz = gx;
  double t = 1.0;
  double f_prev = lasso_objective(p, x, gx);
  constexpr double eps = std::numeric_limits<double>::min();

  auto prox_step = [&](const Vector& point, const Vector& g_point) {
    Vector grad = 2.0 * p.G.adjoint(g_point - p.y) + 2.0 * p.beta * point;
    return soft_threshold(point - step * grad, p.alpha * step);
  };

  for (int k = 1; k <= opts.max_iters; ++k) {
    Vector x_new = prox_step(z, gz);
    Vector gx_new = p.G.apply(x_new);
    double f_new = lasso_objective(p, x_new, gx_new);
    if (opts.restart && f_new > f_prev) {
      ++sol.restarts;
      t = 1.0;
      x_new = prox_step(x, gx);
      gx_new = p.G.apply(x_new);
      f_new = lasso_objective(p, x_new, gx_new);
    }
    const double change = (x_new - x).norm() / std::max(x.norm(), eps);
    const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double momentum = (t - 1.0) / t_new;
    z = x_new + momentum * (x_new - x);
    gz = gx_new + momentum * (gx_new - gx);
    x = std::move(x_new);
    gx = std::move(gx_new);
    f_prev = f_new;
    t = t_new;
    sol.iterations = k;
    if (opts.check_every > 0 && k % opts.check_every == 0) sol.objective_trace.emplace_back(k, f_new);
    if (change <= opts.tol) {
      sol.converged = true;
      break;
    }
  }
  sol.final_objective = f_prev;
  sol.u_est = std::move(x);
  return sol;
}

struct KktResidual {
  double interior_max = 0.0;
  double exterior_max = 0.0;
};

/// Optimality residuals with g = 2G'(Gx - y) + 2 beta x: on the support
/// |g_j + alpha sign(x_j)|, off it max(|g_j| - alpha, 0).
inline KktResidual kkt_residual(const LassoProblem& p, const Vector& x) {
  validate_problem(p);
  if (p.psi_kind != Regularizer::identity)
    throw UnsupportedError("kkt_residual: only the identity regularizer is supported");
  const Vector g = 2.0 * p.G.adjoint(p.G.apply(x) - p.y) + 2.0 * p.beta * x;
  KktResidual r;
  for (Index j = 0; j < x.size(); ++j) {
    if (x[j] != 0.0)
      r.interior_max = std::max(r.interior_max, std::abs(g[j] + p.alpha * (x[j] > 0 ? 1.0 : -1.0)));
    else
      r.exterior_max = std::max(r.exterior_max, std::abs(g[j]) - p.alpha);
  }
  return r;
}

/// One JSON object per line: {"iter": k, "objective": f}, then a summary.
inline void write_diagnostics_jsonl(std::ostream& os, const LassoSolution& s) {
  os.precision(17);
  for (const auto& [k, f] : s.objective_trace)
    os << "{\"iter\":" << k << ",\"objective\":" << f << "}\n";
  os << "{\"iterations\":" << s.iterations << ",\"converged\":" << (s.converged ? "true" : "false")
     << ",\"final_objective\":" << s.final_objective << ",\"step_size\":" << s.step_size
     << ",\"restarts\":" << s.restarts << "}\n";
}

}  // namespace metacs
