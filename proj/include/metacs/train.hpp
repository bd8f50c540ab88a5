#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "metacs/imaging.hpp"
#include "metacs/io/npy.hpp"
#include "metacs/lassograd.hpp"
#include "metacs/optics.hpp"
#include "metacs/parallel.hpp"
#include "metacs/sparsesolve.hpp"

namespace metacs::train {

struct AdamOptions {
  double lr_theta = 0.05;
  double lr_log = 0.1;  // log alpha, log beta
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ObjectDistribution {
  double sparsity = 0.05;
  imaging::ObjectKind kind = imaging::ObjectKind::physical;
  imaging::ValueRange range;
};

struct TrainConfig {
  optics::OpticalGrid grid;
  optics::SurrogateModel surrogate;
  double w_min = 0.0;
  double w_max = 0.0;
  /// Initial latent geometry; all zeros is the identical mid-domain array.
  RealField theta0;
  ObjectDims object;
  Index sensor_rows = 0;
  Index sensor_cols = 0;
  /// Material states imaged (default: every surrogate state).
  std::optional<Index> shots;
  ObjectDistribution objects;
  double noise_fraction = 0.02;
  Index batch_size = 4;
  int iterations = 200;
  AdamOptions adam;
  /// Calibrated on the first batch when absent.
  std::optional<double> alpha0;
  std::optional<double> beta0;
  std::uint64_t seed = 0;
  /// Reuse the same batch seeds every iteration.
  bool fixed_batch = false;
  bool train_geometry = true;
  bool train_alpha = true;
  bool train_beta = true;
  SolverOptions solver;
  double cg_tol = 1e-10;
  double support_threshold = kDefaultSupportThreshold;
  Index validation_size = 16;
  int validation_every = 10;  // 0: only at start and end
  std::uint64_t validation_seed = 0x5eed'0000'7a11'da7eULL;
  int checkpoint_every = 0;
  std::optional<std::filesystem::path> checkpoint_dir;
  int threads = 1;

  Index shot_count() const { return shots.value_or(surrogate.states()); }

  void validate() const {
    grid.validate();
    if (theta0.rows() != grid.cells || theta0.cols() != grid.cells)
      throw ConfigError("train: initial geometry does not match the grid");
    if (!theta0.allFinite()) throw ValidationError("train: non-finite initial geometry");
    if (!(w_max > w_min && w_min > 0.0)) throw ConfigError("train: invalid width bounds");
    if (object.channels != static_cast<Index>(grid.depths.size()))
      throw ConfigError("train: object channels must equal the number of depths");
    if (shot_count() < 1 || shot_count() > surrogate.states()) throw ConfigError("train: invalid shot count");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (iterations < 0) throw ConfigError("train: iterations must be >= 0");
    if (adam.lr_theta < 0.0 || adam.lr_log < 0.0) throw ConfigError("train: learning rates must be >= 0");
    if (alpha0 && !(*alpha0 > 0.0)) throw ConfigError("train: initial alpha must be > 0");
    if (beta0 && !(*beta0 > 0.0)) throw ConfigError("train: initial beta must be > 0");
    if (noise_fraction < 0.0) throw ConfigError("train: noise fraction must be >= 0");
    if (validation_size < 1) throw ConfigError("train: validation size must be >= 1");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
  }
};

struct TrainState {
  RealField theta;
  double log_alpha = 0.0;
  double log_beta = 0.0;
  RealField m_theta, v_theta;
  double m_log_alpha = 0.0, v_log_alpha = 0.0;
  double m_log_beta = 0.0, v_log_beta = 0.0;
  int iteration = 0;
  std::vector<double> loss_history;

  double alpha() const { return std::exp(log_alpha); }
  double beta() const { return std::exp(log_beta); }
};

struct GradientBundle {
  RealField grad_theta;
  double grad_log_alpha = 0.0;
  double grad_log_beta = 0.0;
  double loss = 0.0;
  Index used = 0;
  Index dropped = 0;

  double norm() const {
    return std::sqrt(grad_theta.square().sum() + grad_log_alpha * grad_log_alpha + grad_log_beta * grad_log_beta);
  }
};

/// Geometry -> PSFs -> measurement, for one latent theta.
struct Pipeline {
  optics::MetasurfaceGeometry geometry;
  optics::PsfStack psfs;
  imaging::ImagingSystem system;
  double lipschitz = 0.0;  // of grad |Gx - y|^2
};

inline Pipeline build_pipeline(const TrainConfig& c, const RealField& theta) {
  Pipeline p;
  p.geometry = {theta, c.w_min, c.w_max};
  p.psfs = optics::compute_psf_stack(p.geometry, c.surrogate, c.grid);
  p.system = imaging::assemble_system(p.psfs, c.object, c.sensor_rows, c.sensor_cols, c.shot_count());
  p.lipschitz = 2.0 * operator_norm(p.system.G);
  return p;
}

/// Per-element record of a batch evaluation. `noise` holds the realised
/// eta so a later evaluation can replay it exactly.
struct BatchTrace {
  std::vector<Vector> noise;
  std::vector<std::vector<Index>> supports;
  std::vector<char> dropped;
  std::vector<Vector> u_est;
  std::vector<Vector> objects;
};

inline std::uint64_t object_seed(std::uint64_t s) { return split_seed(s, 1); }
inline std::uint64_t noise_seed(std::uint64_t s) { return split_seed(s, 2); }

inline std::vector<std::uint64_t> batch_seeds(const TrainConfig& c, int iteration) {
  std::vector<std::uint64_t> s(static_cast<std::size_t>(c.batch_size));
  for (Index b = 0; b < c.batch_size; ++b) {
    const auto k = c.fixed_batch ? static_cast<std::uint64_t>(b)
                                 : static_cast<std::uint64_t>(iteration) * static_cast<std::uint64_t>(c.batch_size) +
                                       static_cast<std::uint64_t>(b);
    s[static_cast<std::size_t>(b)] = split_seed(c.seed, k);
  }
  return s;
}

inline std::vector<std::uint64_t> validation_seeds(const TrainConfig& c) {
  std::vector<std::uint64_t> s(static_cast<std::size_t>(c.validation_size));
  for (Index i = 0; i < c.validation_size; ++i) s[static_cast<std::size_t>(i)] = split_seed(c.validation_seed, static_cast<std::uint64_t>(i));
  return s;
}

struct EvalOptions {
  bool need_grad = true;
  /// Replay noise from a previous trace instead of drawing it.
  const BatchTrace* frozen = nullptr;
  /// Forward-only evaluations keep non-converged iterates instead of dropping them.
  bool keep_unconverged = false;
  std::optional<SolverOptions> solver;
};

/// Batch loss <|u - u_est|^2 / |u|^2> and its gradient w.r.t. theta,
/// log alpha, log beta. Non-converged solves are dropped and counted; more
/// than half dropped raises SolverError.
inline GradientBundle loss_and_grad(const TrainState& st, const TrainConfig& c, const Pipeline& pl,
                                    const std::vector<std::uint64_t>& seeds, const EvalOptions& eo = {},
                                    BatchTrace* trace = nullptr) {
  const Index n = static_cast<Index>(seeds.size());
  if (n < 1) throw ConfigError("loss_and_grad: empty batch");
  if (eo.frozen && static_cast<Index>(eo.frozen->noise.size()) != n)
    throw ConfigError("loss_and_grad: frozen noise does not match the batch");
  const double alpha = st.alpha(), beta = st.beta();
  SolverOptions so = eo.solver.value_or(c.solver);
  so.lipschitz = pl.lipschitz;

  struct Element {
    bool dropped = false;
    double loss = 0.0;
    double g_alpha = 0.0, g_beta = 0.0;
    std::vector<RealField> g_psf;
    Vector eta, u, u_est;
    std::vector<Index> support;
  };
  std::vector<Element> el(static_cast<std::size_t>(n));

  parallel_for(n, c.threads, [&](Index i) {
    auto& e = el[static_cast<std::size_t>(i)];
    const std::uint64_t s = seeds[static_cast<std::size_t>(i)];
    e.u = imaging::sample_object(c.object, c.objects.sparsity, c.objects.kind, c.objects.range, object_seed(s)).u;
    LassoProblem p;
    p.G = pl.system.G;
    p.alpha = alpha;
    p.beta = beta;
    if (eo.frozen) {
      e.eta = eo.frozen->noise[static_cast<std::size_t>(i)];
      p.y = p.G.apply(e.u) + e.eta;
    } else {
      const auto img = imaging::render(pl.system, e.u, c.noise_fraction, noise_seed(s));
      e.eta = img.y - img.y_clean;
      p.y = img.y;
    }
    const auto sol = solve(p, so);
    e.u_est = sol.u_est;
    e.support = extract_support(sol.u_est, nullptr, c.support_threshold).indices;
    if (!sol.converged && !eo.keep_unconverged) {
      e.dropped = true;
      return;
    }
    const double un = e.u.squaredNorm();
    e.loss = (sol.u_est - e.u).squaredNorm() / un;
    if (!eo.need_grad) return;
    VjpOptions vo;
    vo.cg_tol = c.cg_tol;
    vo.support_threshold = c.support_threshold;
    vo.generating_object = e.u;
    const auto adj = lasso_vjp(p, sol, (2.0 / un) * (sol.u_est - e.u), vo);
    e.g_alpha = adj.grad_alpha;
    e.g_beta = adj.grad_beta;
    e.g_psf = adj.grad_psf;
  });

  GradientBundle gb;
  for (const auto& e : el) gb.dropped += e.dropped ? 1 : 0;
  gb.used = n - gb.dropped;
  if (2 * gb.dropped > n)
    throw SolverError("loss_and_grad: more than half of the batch failed to converge",
                      static_cast<double>(gb.dropped) / static_cast<double>(n));
  if (trace) {
    *trace = {};
    for (const auto& e : el) {
      trace->noise.push_back(e.eta);
      trace->supports.push_back(e.support);
      trace->dropped.push_back(e.dropped);
      trace->u_est.push_back(e.u_est);
      trace->objects.push_back(e.u);
    }
  }
  const double w = 1.0 / static_cast<double>(gb.used);
  double g_alpha = 0.0, g_beta = 0.0;
  std::vector<RealField> g_psf;
  for (const auto& e : el) {
    if (e.dropped) continue;
    gb.loss += w * e.loss;
    if (!eo.need_grad) continue;
    g_alpha += w * e.g_alpha;
    g_beta += w * e.g_beta;
    if (g_psf.empty()) {
      g_psf = e.g_psf;
      for (auto& f : g_psf) f *= w;
    } else {
      for (std::size_t k = 0; k < g_psf.size(); ++k) g_psf[k] += w * e.g_psf[k];
    }
  }
  gb.grad_theta = RealField::Zero(c.grid.cells, c.grid.cells);
  if (!eo.need_grad) return gb;
  gb.grad_log_alpha = alpha * g_alpha;
  gb.grad_log_beta = beta * g_beta;

  // Kernels cover the imaged states; states beyond them get a zero cotangent.
  optics::PsfStack cot;
  cot.depths = pl.psfs.depths;
  cot.states = pl.psfs.states;
  cot.psfs.assign(pl.psfs.psfs.size(), RealField::Zero(pl.psfs.rows(), pl.psfs.cols()));
  for (std::size_t k = 0; k < g_psf.size(); ++k) cot.psfs[k] = g_psf[k];
  gb.grad_theta = optics::psf_vjp(pl.geometry, c.surrogate, c.grid, cot);
  if (!gb.grad_theta.allFinite() || !std::isfinite(gb.grad_log_alpha) || !std::isfinite(gb.grad_log_beta))
    throw ModelError("loss_and_grad: non-finite gradient");
  return gb;
}

inline GradientBundle loss_and_grad(const TrainState& st, const TrainConfig& c, const std::vector<std::uint64_t>& seeds,
                                    const EvalOptions& eo = {}, BatchTrace* trace = nullptr) {
  return loss_and_grad(st, c, build_pipeline(c, st.theta), seeds, eo, trace);
}

/// sqrt(mean relative squared error) over the frozen validation seeds.
inline double validation_rmse(const TrainState& st, const TrainConfig& c) {
  EvalOptions eo;
  eo.need_grad = false;
  eo.keep_unconverged = true;
  return std::sqrt(loss_and_grad(st, c, validation_seeds(c), eo).loss);
}

/// alpha0 = median |2 G'y| over one batch (about half of the first
/// shrinkage step is then thresholded); beta0 = |G|^2.
inline TrainState initial_state(const TrainConfig& c) {
  c.validate();
  TrainState st;
  st.theta = c.theta0;
  st.m_theta = RealField::Zero(c.grid.cells, c.grid.cells);
  st.v_theta = st.m_theta;
  double alpha0 = 0.0, beta0 = 0.0;
  if (!c.alpha0 || !c.beta0) {
    const auto pl = build_pipeline(c, c.theta0);
    beta0 = 0.5 * pl.lipschitz;
    std::vector<double> mags;
    for (auto s : batch_seeds(c, 0)) {
      const Vector u =
          imaging::sample_object(c.object, c.objects.sparsity, c.objects.kind, c.objects.range, object_seed(s)).u;
      const Vector g = 2.0 * pl.system.G.adjoint(imaging::render(pl.system, u, c.noise_fraction, noise_seed(s)).y);
      for (Index i = 0; i < g.size(); ++i) mags.push_back(std::abs(g[i]));
    }
    auto mid = mags.begin() + static_cast<std::ptrdiff_t>(mags.size() / 2);
    std::nth_element(mags.begin(), mid, mags.end());
    alpha0 = *mid;
    if (!(alpha0 > 0.0)) throw ModelError("train: alpha calibration produced a zero threshold");
  }
  st.log_alpha = std::log(c.alpha0.value_or(alpha0));
  st.log_beta = std::log(c.beta0.value_or(beta0));
  return st;
}

inline void adam_step(TrainState& st, const GradientBundle& g, const TrainConfig& c) {
  const auto& a = c.adam;
  const int t = st.iteration + 1;
  const double b1c = 1.0 - std::pow(a.beta1, t), b2c = 1.0 - std::pow(a.beta2, t);
  auto scalar = [&](double& x, double& m, double& v, double grad, double lr) {
    m = a.beta1 * m + (1.0 - a.beta1) * grad;
    v = a.beta2 * v + (1.0 - a.beta2) * grad * grad;
    x -= lr * (m / b1c) / (std::sqrt(v / b2c) + a.eps);
  };
  if (c.train_geometry) {
    st.m_theta = a.beta1 * st.m_theta + (1.0 - a.beta1) * g.grad_theta;
    st.v_theta = a.beta2 * st.v_theta + (1.0 - a.beta2) * g.grad_theta.square();
    st.theta -= a.lr_theta * (st.m_theta / b1c) / ((st.v_theta / b2c).sqrt() + a.eps);
  }
  if (c.train_alpha) scalar(st.log_alpha, st.m_log_alpha, st.v_log_alpha, g.grad_log_alpha, a.lr_log);
  if (c.train_beta) scalar(st.log_beta, st.m_log_beta, st.v_log_beta, g.grad_log_beta, a.lr_log);
  const double al = st.alpha(), be = st.beta();
  if (!(al > 0.0 && std::isfinite(al) && be > 0.0 && std::isfinite(be)))
    throw ModelError("train: alpha/beta left (0, inf)");
}

struct HistoryRow {
  int iter = 0;
  double loss = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double grad_norm = 0.0;
  Index dropped = 0;
};

struct TrainResult {
  TrainState state;
  std::vector<HistoryRow> history;
  std::vector<std::pair<int, double>> validation;  // (iteration, relative RMSE)
  double initial_beta = 0.0;
};

inline void write_log_csv(std::ostream& os, const std::vector<HistoryRow>& rows) {
  os << "iter,loss,alpha,beta,grad_norm,dropped_count\n";
  os.precision(17);
  for (const auto& r : rows)
    os << r.iter << ',' << r.loss << ',' << r.alpha << ',' << r.beta << ',' << r.grad_norm << ',' << r.dropped << '\n';
}

inline void save_checkpoint(const std::filesystem::path& dir, const TrainState& st) {
  std::filesystem::create_directories(dir);
  io::write_npy(dir / "theta.npy", io::to_npy(st.theta));
  io::write_npy(dir / "adam_m_theta.npy", io::to_npy(st.m_theta));
  io::write_npy(dir / "adam_v_theta.npy", io::to_npy(st.v_theta));
  nlohmann::json j;
  j["iteration"] = st.iteration;
  j["log_alpha"] = st.log_alpha;
  j["log_beta"] = st.log_beta;
  j["alpha"] = st.alpha();
  j["beta"] = st.beta();
  j["adam"] = {{"m_log_alpha", st.m_log_alpha}, {"v_log_alpha", st.v_log_alpha},
               {"m_log_beta", st.m_log_beta},   {"v_log_beta", st.v_log_beta}};
  j["loss_history"] = st.loss_history;
  std::ofstream(dir / "state.json") << j.dump(2) << '\n';
}

inline TrainState load_checkpoint(const std::filesystem::path& dir) {
  TrainState st;
  st.theta = io::field_from_npy(io::read_npy(dir / "theta.npy"));
  st.m_theta = io::field_from_npy(io::read_npy(dir / "adam_m_theta.npy"));
  st.v_theta = io::field_from_npy(io::read_npy(dir / "adam_v_theta.npy"));
  std::ifstream f(dir / "state.json");
  if (!f) throw ConfigError("checkpoint: missing state.json in " + dir.string());
  const auto j = nlohmann::json::parse(f);
  st.iteration = j.at("iteration").get<int>();
  st.log_alpha = j.at("log_alpha").get<double>();
  st.log_beta = j.at("log_beta").get<double>();
  const auto& a = j.at("adam");
  st.m_log_alpha = a.at("m_log_alpha").get<double>();
  st.v_log_alpha = a.at("v_log_alpha").get<double>();
  st.m_log_beta = a.at("m_log_beta").get<double>();
  st.v_log_beta = a.at("v_log_beta").get<double>();
  st.loss_history = j.at("loss_history").get<std::vector<double>>();
  return st;
}

using Callback = std::function<void(const HistoryRow&, const TrainState&)>;

/// Adam on (theta, log alpha, log beta). Validation runs at iteration 0,
/// every `validation_every` steps, and after the last step.
inline TrainResult run(const TrainConfig& c, std::optional<TrainState> resume = std::nullopt,
                       const Callback& on_step = {}) {
  c.validate();
  TrainResult res;
  res.state = resume ? std::move(*resume) : initial_state(c);
  auto& st = res.state;
  res.initial_beta = st.beta();
  auto checkpoint = [&](const std::string& tag) {
    if (c.checkpoint_dir) save_checkpoint(*c.checkpoint_dir / tag, st);
  };
  res.validation.emplace_back(st.iteration, validation_rmse(st, c));
  while (st.iteration < c.iterations) {
    const auto pl = build_pipeline(c, st.theta);
    const auto g = loss_and_grad(st, c, pl, batch_seeds(c, st.iteration));
    if (!std::isfinite(g.loss)) {
      checkpoint("abort");
      throw ModelError("train: non-finite loss at iteration " + std::to_string(st.iteration));
    }
    HistoryRow row{st.iteration, g.loss, st.alpha(), st.beta(), g.norm(), g.dropped};
    adam_step(st, g, c);
    st.loss_history.push_back(g.loss);
    ++st.iteration;
    res.history.push_back(row);
    if (on_step) on_step(row, st);
    if (c.checkpoint_every > 0 && st.iteration % c.checkpoint_every == 0)
      checkpoint("iter_" + std::to_string(st.iteration));
    if (c.validation_every > 0 && st.iteration % c.validation_every == 0 && st.iteration < c.iterations)
      res.validation.emplace_back(st.iteration, validation_rmse(st, c));
  }
  if (res.validation.back().first != st.iteration) res.validation.emplace_back(st.iteration, validation_rmse(st, c));
  checkpoint("final");
  return res;
}

struct AuditEntry {
  std::string parameter;  // "theta", "log_alpha", "log_beta"
  Index index = 0;        // flat theta index
  double analytic = 0.0;
  double finite_diff = 0.0;
  double rel_error = 0.0;
  bool support_flip = false;
  bool pass = false;
};

struct AuditOptions {
  Index theta_coords = 8;
  double step = 1e-5;
  double tolerance = 1e-3;
  std::uint64_t seed = 0;
  /// Tight inner solves so solver error stays below the difference quotient.
  SolverOptions solver = [] {
    SolverOptions s;
    s.tol = 1e-13;
    s.max_iters = 200000;
    return s;
  }();
};

struct AuditReport {
  std::vector<AuditEntry> entries;
  double base_loss = 0.0;
  double pass_rate = 0.0;
  double flip_rate = 0.0;
  /// Failures not explained by a support change.
  Index unexplained = 0;
};

/// Central differences of the batch loss (frozen seeds and noise) against
/// loss_and_grad. Relative error uses max(|fd|, |analytic|, 1e-6 * the
/// largest audited |analytic|) as denominator; both zero counts as exact.
inline AuditReport finite_diff_audit(const TrainConfig& c, const TrainState& st, const AuditOptions& ao = {}) {
  if (ao.theta_coords < 0) throw ConfigError("audit: negative coordinate count");
  if (!(ao.step > 0.0)) throw ConfigError("audit: step must be > 0");
  const auto seeds = batch_seeds(c, st.iteration);
  EvalOptions base_opts;
  base_opts.solver = ao.solver;
  BatchTrace base_trace;
  const auto g = loss_and_grad(st, c, seeds, base_opts, &base_trace);
  AuditReport rep;
  rep.base_loss = g.loss;

  std::mt19937_64 rng(ao.seed);
  std::vector<Index> all(static_cast<std::size_t>(st.theta.size()));
  std::iota(all.begin(), all.end(), Index{0});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(std::min<Index>(ao.theta_coords, st.theta.size())));
  std::sort(all.begin(), all.end());

  for (Index k : all) rep.entries.push_back({"theta", k, g.grad_theta.data()[k]});
  rep.entries.push_back({"log_alpha", 0, g.grad_log_alpha});
  rep.entries.push_back({"log_beta", 0, g.grad_log_beta});

  EvalOptions fo;
  fo.need_grad = false;
  fo.frozen = &base_trace;
  fo.solver = ao.solver;
  auto eval = [&](const AuditEntry& e, double d, bool& flip) {
    TrainState s = st;
    if (e.parameter == "theta")
      s.theta.data()[e.index] += d;
    else if (e.parameter == "log_alpha")
      s.log_alpha += d;
    else
      s.log_beta += d;
    BatchTrace t;
    const double l = loss_and_grad(s, c, seeds, fo, &t).loss;
    flip = flip || t.supports != base_trace.supports || t.dropped != base_trace.dropped;
    return l;
  };
  double scale = 0.0;
  for (const auto& e : rep.entries) scale = std::max(scale, std::abs(e.analytic));
  Index passed = 0, flipped = 0;
  for (auto& e : rep.entries) {
    bool flip = false;
    const double lp = eval(e, ao.step, flip), lm = eval(e, -ao.step, flip);
    e.finite_diff = (lp - lm) / (2.0 * ao.step);
    e.support_flip = flip;
    const double denom = std::max({std::abs(e.finite_diff), std::abs(e.analytic), 1e-6 * scale});
    e.rel_error = denom > 0.0 ? std::abs(e.finite_diff - e.analytic) / denom : 0.0;
    e.pass = e.rel_error <= ao.tolerance;
    passed += e.pass;
    flipped += flip;
    rep.unexplained += !e.pass && !flip;
  }
  const double n = static_cast<double>(rep.entries.size());
  rep.pass_rate = static_cast<double>(passed) / n;
  rep.flip_rate = static_cast<double>(flipped) / n;
  return rep;
}

}  // namespace metacs::train
