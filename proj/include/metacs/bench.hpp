#pragma once

#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metacs/imaging.hpp"
#include "metacs/io/hash.hpp"
#include "metacs/linop.hpp"
#include "metacs/parallel.hpp"
#include "metacs/sparsesolve.hpp"

namespace metacs::bench {

struct SweepConfig {
  std::vector<double> sparsities;
  Index trials = 20;
  double noise_fraction = 0.0;
  imaging::ObjectKind kind = imaging::ObjectKind::physical;
  imaging::ValueRange range;
  std::uint64_t seed = 0;
  /// Fixed alpha for every point; absent selects alpha per point by
  /// golden-section search over log10(alpha / alpha_max) in [search_lo, search_hi].
  std::optional<double> alpha;
  double beta = 0.0;
  double search_lo = -6.0;
  double search_hi = 0.0;
  int search_evals = 24;
  SolverOptions solver;
  int threads = 1;

  void validate() const {
    if (sparsities.empty()) throw ConfigError("sweep: empty sparsity list");
    for (std::size_t i = 0; i < sparsities.size(); ++i) {
      if (!(sparsities[i] > 0.0 && sparsities[i] <= 1.0)) throw ConfigError("sweep: sparsities must lie in (0, 1]");
      if (i && !(sparsities[i] > sparsities[i - 1])) throw ConfigError("sweep: sparsities must be strictly increasing");
    }
    if (trials < 1) throw ConfigError("sweep: trials must be >= 1");
    if (noise_fraction < 0.0) throw ConfigError("sweep: noise fraction must be >= 0");
    if (alpha && !(*alpha >= 0.0)) throw ConfigError("sweep: alpha must be >= 0");
    if (beta < 0.0) throw ConfigError("sweep: beta must be >= 0");
    if (!(search_hi > search_lo) || search_evals < 3) throw ConfigError("sweep: invalid alpha search bracket");
  }
};

/// A measurement under test. `object` fixes the sampled object shape.
struct System {
  std::string id;
  LinearOperator G;
  ObjectDims object;
};

struct SweepPoint {
  double sparsity = 0.0;
  double mean_rel_rmse = 0.0;
  double std = 0.0;
  double std_error = 0.0;
  Index trials = 0;
  Index failures = 0;  // solves that hit max_iters
  double alpha = 0.0;
  std::uint64_t heldout_seed = 0;
  std::vector<std::uint64_t> trial_seeds;
  std::vector<double> errors;
};

struct SweepResult {
  std::string system_id;
  std::vector<SweepPoint> points;
};

namespace detail {

struct Trial {
  Vector u;
  Vector y;
};

inline Trial make_trial(const System& s, const SweepConfig& c, double sparsity, std::uint64_t seed) {
  Trial t;
  t.u = imaging::sample_object(s.object, sparsity, c.kind, c.range, split_seed(seed, 1)).u;
  t.y = imaging::render(s.G, t.u, c.noise_fraction, split_seed(seed, 2)).y;
  return t;
}

inline LassoSolution reconstruct(const System& s, const Trial& t, double alpha, const SweepConfig& c, double lip) {
  LassoProblem p;
  p.G = s.G;
  p.y = t.y;
  p.alpha = alpha;
  p.beta = c.beta;
  SolverOptions so = c.solver;
  so.lipschitz = lip;
  return solve(p, so);
}

}  // namespace detail

/// Zero-forcing bound: alpha >= 2 |G'y|_inf gives u_est = 0.
inline double alpha_max(const LinearOperator& G, const Vector& y) { return 2.0 * G.adjoint(y).cwiseAbs().maxCoeff(); }

/// Golden-section minimisation of f on [lo, hi] with `evals` evaluations.
template <class F>
double golden_section(F&& f, double lo, double hi, int evals) {
  const double r = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double x1 = b - r * (b - a), x2 = a + r * (b - a);
  double f1 = f(x1), f2 = f(x2);
  for (int k = 2; k < evals; ++k) {
    if (f1 <= f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - r * (b - a);
      f1 = f(x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + r * (b - a);
      f2 = f(x2);
    }
  }
  return f1 <= f2 ? x1 : x2;
}

/// Seeds depend only on the config seed and point/trial index, so systems
/// swept with one config see identical objects and noise draws.
inline SweepResult sparsity_sweep(const System& s, const SweepConfig& c) {
  c.validate();
  if (s.G.cols() != s.object.size()) throw ConfigError("sweep: operator columns do not match the object");
  const double lip = 2.0 * operator_norm(s.G);
  SweepResult res;
  res.system_id = s.id;
  for (std::size_t pi = 0; pi < c.sparsities.size(); ++pi) {
    SweepPoint pt;
    pt.sparsity = c.sparsities[pi];
    pt.trials = c.trials;
    const std::uint64_t point_seed = split_seed(c.seed, pi);
    pt.heldout_seed = split_seed(point_seed, 0xa1fa);
    if (c.alpha) {
      pt.alpha = *c.alpha;
    } else {
      const auto held = detail::make_trial(s, c, pt.sparsity, pt.heldout_seed);
      const double amax = alpha_max(s.G, held.y);
      auto err = [&](double t) {
        const auto sol = detail::reconstruct(s, held, amax * std::pow(10.0, t), c, lip);
        return imaging::relative_error(held.u, sol.u_est);
      };
      pt.alpha = amax * std::pow(10.0, golden_section(err, c.search_lo, c.search_hi, c.search_evals));
    }
    pt.trial_seeds.resize(static_cast<std::size_t>(c.trials));
    pt.errors.resize(static_cast<std::size_t>(c.trials));
    std::vector<char> failed(static_cast<std::size_t>(c.trials), 0);
    for (Index t = 0; t < c.trials; ++t) pt.trial_seeds[static_cast<std::size_t>(t)] = split_seed(point_seed, static_cast<std::uint64_t>(t));
    parallel_for(c.trials, c.threads, [&](Index t) {
      const auto tr = detail::make_trial(s, c, pt.sparsity, pt.trial_seeds[static_cast<std::size_t>(t)]);
      const auto sol = detail::reconstruct(s, tr, pt.alpha, c, lip);
      failed[static_cast<std::size_t>(t)] = !sol.converged;
      pt.errors[static_cast<std::size_t>(t)] = imaging::relative_error(tr.u, sol.u_est);
    });
    pt.failures = std::accumulate(failed.begin(), failed.end(), Index{0});
    double sum = 0.0;
    for (double e : pt.errors) sum += e;
    pt.mean_rel_rmse = sum / static_cast<double>(c.trials);
    double var = 0.0;
    for (double e : pt.errors) var += (e - pt.mean_rel_rmse) * (e - pt.mean_rel_rmse);
    pt.std = c.trials > 1 ? std::sqrt(var / static_cast<double>(c.trials - 1)) : 0.0;
    pt.std_error = pt.std / std::sqrt(static_cast<double>(c.trials));
    res.points.push_back(std::move(pt));
  }
  return res;
}

struct GapReport {
  double g_phys = 0.0;    // <|G u|_1> over physical objects
  double g_unphys = 0.0;  // <|G u|_1> over unphysical objects
  double x_phys = 0.0;    // same for the Gaussian baseline X
  double x_unphys = 0.0;
  double gap = 0.0;
  double sparsity = 0.0;
  Index trials = 0;
};

/// Image Mean Gap (<|Gu|>_phys / <|Gu|>_unphys) * (<|Xu|>_unphys / <|Xu|>_phys).
/// Physical and unphysical objects of one trial share support and
/// magnitudes (matched seeds), so G = X gives exactly 1.
inline GapReport image_mean_gap(const LinearOperator& G, const LinearOperator& X, ObjectDims object, double sparsity,
                                Index trials, std::uint64_t seed, imaging::ValueRange range = {}) {
  if (trials < 1) throw ConfigError("gap: trials must be >= 1");
  if (G.cols() != object.size() || X.cols() != object.size())
    throw ConfigError("gap: operators must act on the object space");
  GapReport r;
  r.sparsity = sparsity;
  r.trials = trials;
  for (Index t = 0; t < trials; ++t) {
    const std::uint64_t s = split_seed(seed, static_cast<std::uint64_t>(t));
    const Vector up = imaging::sample_object(object, sparsity, imaging::ObjectKind::physical, range, s).u;
    const Vector uu = imaging::sample_object(object, sparsity, imaging::ObjectKind::unphysical, range, s).u;
    r.g_phys += G.apply(up).lpNorm<1>();
    r.g_unphys += G.apply(uu).lpNorm<1>();
    r.x_phys += X.apply(up).lpNorm<1>();
    r.x_unphys += X.apply(uu).lpNorm<1>();
  }
  const double n = static_cast<double>(trials);
  r.g_phys /= n;
  r.g_unphys /= n;
  r.x_phys /= n;
  r.x_unphys /= n;
  const double den = r.g_unphys * r.x_phys;
  if (!(den > 0.0)) throw ValidationError("gap: zero denominator");
  r.gap = (r.g_phys * r.x_unphys) / den;
  return r;
}

/// Gaussian circulant with as many rows as `G`, acting on G's object.
inline LinearOperator gaussian_baseline(Index rows, ObjectDims object, std::uint64_t seed) {
  GaussianCirculantSpec s;
  s.n = object.size();
  s.m = rows;
  s.seed = seed;
  s.input_dims = object;
  return make_gaussian_circulant(s);
}

namespace detail {

class RowBlock final : public LinearOperatorBase {
 public:
  RowBlock(LinearOperator inner, Index first, Index count) : inner_(std::move(inner)), first_(first), count_(count) {
    if (first < 0 || count < 1 || first + count > inner_.rows()) throw ConfigError("row block: range out of bounds");
  }
  Index rows() const override { return count_; }
  Index cols() const override { return inner_.cols(); }
  void apply(const Vector& x, Vector& y) const override { y = inner_.apply(x).segment(first_, count_); }
  void apply_adjoint(const Vector& y, Vector& x) const override {
    Vector full = Vector::Zero(inner_.rows());
    full.segment(first_, count_) = y;
    x = inner_.adjoint(full);
  }
  std::string name() const override { return "row_block(" + inner_.name() + ")"; }

 private:
  LinearOperator inner_;
  Index first_, count_;
};

}  // namespace detail

/// Rows [first, first + count) of G.
inline LinearOperator row_block(LinearOperator G, Index first, Index count) {
  return LinearOperator(std::make_shared<detail::RowBlock>(std::move(G), first, count));
}

/// Single-shot variant keeping shot `shot` of a stacked system with `shots` equal blocks.
inline System single_shot_variant(const System& s, Index shots, Index shot = 0) {
  if (shots < 1 || s.G.rows() % shots != 0) throw ConfigError("single-shot variant: rows not divisible by shots");
  const Index block = s.G.rows() / shots;
  return {s.id + "_single", row_block(s.G, shot * block, block), s.object};
}

struct Report {
  std::vector<SweepResult> results;
};

inline Report compare_report(const std::vector<System>& systems, const SweepConfig& c) {
  if (systems.empty()) throw ConfigError("compare: no systems");
  for (const auto& s : systems)
    if (s.object.size() != systems.front().object.size()) throw ConfigError("compare: systems must share object dims");
  Report r;
  for (const auto& s : systems) r.results.push_back(sparsity_sweep(s, c));
  return r;
}

inline void write_csv(std::ostream& os, const Report& r) {
  os << "sparsity,system_id,mean_rel_rmse,std,trials,alpha\n";
  os.precision(17);
  for (const auto& res : r.results)
    for (const auto& p : res.points)
      os << p.sparsity << ',' << res.system_id << ',' << p.mean_rel_rmse << ',' << p.std << ',' << p.trials << ','
         << p.alpha << '\n';
}

inline nlohmann::json to_json(const SweepResult& r) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : r.points)
    pts.push_back({{"sparsity", p.sparsity},
                   {"mean_rel_rmse", p.mean_rel_rmse},
                   {"std", p.std},
                   {"std_error", p.std_error},
                   {"trials", p.trials},
                   {"failures", p.failures},
                   {"alpha", p.alpha},
                   {"heldout_seed", p.heldout_seed},
                   {"trial_seeds", p.trial_seeds}});
  return {{"system_id", r.system_id}, {"points", pts}};
}

inline nlohmann::json to_json(const GapReport& g) {
  return {{"gap", g.gap},         {"g_phys", g.g_phys},     {"g_unphys", g.g_unphys}, {"x_phys", g.x_phys},
          {"x_unphys", g.x_unphys}, {"sparsity", g.sparsity}, {"trials", g.trials}};
}

/// Summary with the config echo and the git blob hash of its canonical dump.
inline nlohmann::json summary_json(const Report& r, const nlohmann::json& config_echo) {
  nlohmann::json j;
  j["config"] = config_echo;
  j["input_hash"] = io::git_blob_hash(config_echo.dump());
  j["results"] = nlohmann::json::array();
  for (const auto& res : r.results) j["results"].push_back(to_json(res));
  return j;
}

}  // namespace metacs::bench
