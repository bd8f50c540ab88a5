#pragma once

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iomanip>
#include <iostream>

#include "metacs/cli/config.hpp"
#include "metacs/io/hash.hpp"
#include "metacs/io/png.hpp"

namespace metacs::cli {

struct Invocation {
  std::string command;
  std::filesystem::path config;
  std::filesystem::path out;
  std::optional<std::filesystem::path> resume;
  Overrides overrides;
};

namespace detail {

inline std::shared_ptr<spdlog::logger> logger() {
  static auto log = [] {
    auto l = spdlog::stderr_color_mt("metacs");
    const char* env = std::getenv("CS_E2E_LOG");
    auto level = env ? spdlog::level::from_str(env) : spdlog::level::warn;
    // from_str maps unknown names to off; keep warnings in that case.
    if (env && level == spdlog::level::off && std::string(env) != "off") level = spdlog::level::warn;
    l->set_level(level);
    return l;
  }();
  return log;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f << s;
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

/// Reshapes a flat object vector to [rows, cols] or [rows, cols, channels].
inline io::NpyArray object_npy(const Vector& u, ObjectDims d) {
  io::NpyArray a{{d.rows, d.cols}, {u.data(), u.data() + u.size()}};
  if (d.channels > 1) a.shape.push_back(d.channels);
  return a;
}

inline Vector load_object(const std::filesystem::path& p, ObjectDims d, const char* what) {
  io::NpyArray a;
  try {
    a = io::read_npy(p);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("eval.") + what + ": cannot read " + p.string() + ": " + e.what());
  }
  if (a.count() != d.size()) throw ConfigError(std::string("eval.") + what + ": element count differs from the object dims");
  return Eigen::Map<const Vector>(a.data.data(), static_cast<Index>(a.data.size()));
}

struct Checkpoint {
  RealField theta;
  double alpha = 0.0, beta = 0.0;
};

inline Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  try {
    const auto st = train::load_checkpoint(dir);
    return {st.theta, st.alpha(), st.beta()};
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("checkpoint " + dir.string() + ": " + e.what());
  }
}

inline LinearOperator optical_operator(const train::TrainConfig& tc, const RealField& theta) {
  return train::build_pipeline(tc, theta).system.G;
}

// ---------------------------------------------------------------------------

inline void cmd_psf(const RunConfig& c, const std::filesystem::path& out) {
  const auto sm = build_surrogate(c);
  const optics::MetasurfaceGeometry geo{initial_theta(c), c.w_min, c.w_max};
  const auto st = optics::compute_psf_stack(geo, sm, c.grid);
  io::NpyArray a{{st.states, st.depths, st.rows(), st.cols()}, {}};
  json sums = json::array();
  for (Index s = 0; s < st.states; ++s)
    for (Index d = 0; d < st.depths; ++d) {
      const RealField& p = st.at(d, s);
      // Row-major element order, matching NPY.
      for (Index r = 0; r < p.rows(); ++r)
        for (Index k = 0; k < p.cols(); ++k) a.data.push_back(p(r, k));
      sums.push_back(p.sum());
      io::write_png16(out / ("psf_s" + std::to_string(s) + "_d" + std::to_string(d) + ".png"), p);
    }
  io::write_npy(out / "psf.npy", a);
  io::write_npy(out / "theta.npy", io::to_npy(geo.theta));
  io::write_npy(out / "widths.npy", io::to_npy(geo.widths()));
  io::write_png16(out / "widths.png", geo.widths().array() - c.w_min);
  write_json(out / "psf.json", {{"states", st.states},
                                {"depths", st.depths},
                                {"rows", st.rows()},
                                {"cols", st.cols()},
                                {"scale", st.scale},
                                {"depths_m", c.grid.depths},
                                {"sums", sums},
                                {"surrogate_clamps", sm.clamp_count()}});
  logger()->info("psf: {} states x {} depths, {}x{}", st.states, st.depths, st.rows(), st.cols());
}

inline void cmd_train(const RunConfig& c, const std::filesystem::path& out, const std::optional<std::filesystem::path>& resume) {
  auto tc = resolve_train(c);
  tc.checkpoint_dir = out / "checkpoints";
  std::optional<train::TrainState> from;
  if (resume) {
    try {
      from = train::load_checkpoint(*resume);
    } catch (const std::exception& e) {
      throw ConfigError("resume: " + std::string(e.what()));
    }
  }
  const auto res = train::run(tc, from, [](const train::HistoryRow& r, const train::TrainState&) {
    logger()->info("iter {} loss {:.6g} alpha {:.4g} beta {:.4g} |g| {:.3g} dropped {}", r.iter, r.loss, r.alpha, r.beta,
                   r.grad_norm, r.dropped);
  });
  {
    std::ostringstream os;
    train::write_log_csv(os, res.history);
    write_text(out / "train.csv", os.str());
  }
  {
    std::ostringstream os;
    os << "iter,rel_rmse\n" << std::setprecision(17);
    for (const auto& [it, e] : res.validation) os << it << ',' << e << '\n';
    write_text(out / "validation.csv", os.str());
  }
  io::write_npy(out / "theta.npy", io::to_npy(res.state.theta));
  json v = json::array();
  for (const auto& [it, e] : res.validation) v.push_back({{"iter", it}, {"rel_rmse", e}});
  write_json(out / "summary.json", {{"iterations", res.state.iteration},
                                    {"alpha", res.state.alpha()},
                                    {"beta", res.state.beta()},
                                    {"initial_beta", res.initial_beta},
                                    {"final_loss", res.state.loss_history.empty() ? 0.0 : res.state.loss_history.back()},
                                    {"validation", v}});
}

inline void cmd_eval(const RunConfig& c, const std::filesystem::path& out) {
  const auto& e = c.eval;
  if (e.object.empty()) throw ConfigError("eval.object: required (or pass --object)");
  const Vector u = load_object(c.resolve_path(e.object), c.object, "object");

  std::optional<Checkpoint> ck;
  if (e.checkpoint) ck = read_checkpoint(c.resolve_path(*e.checkpoint));
  const std::optional<double> alpha = e.alpha ? e.alpha : ck ? std::optional<double>(ck->alpha) : std::nullopt;
  const double beta = e.beta.value_or(ck ? ck->beta : 0.0);

  json rep = {{"system", e.system}};
  Vector u_est;
  if (e.estimate) {
    u_est = load_object(c.resolve_path(*e.estimate), c.object, "estimate");
    rep["source"] = "estimate";
  } else {
    if (!alpha) throw ConfigError("eval.alpha: required without a checkpoint (or pass --alpha)");
    LinearOperator G;
    if (e.system == "identity") {
      if (c.object.channels != 1) throw ConfigError("eval.system: identity needs a single depth");
      G = imaging::assemble_system(imaging::delta_stack(1), c.object, c.object.rows, c.object.cols).G;
    } else {
      G = optical_operator(resolve_train(c), ck ? ck->theta : initial_theta(c));
    }
    const auto img = imaging::render(G, u, c.noise_fraction, train::noise_seed(c.seed));
    LassoProblem p;
    p.G = G;
    p.y = img.y;
    p.alpha = *alpha;
    p.beta = beta;
    const auto sol = solve(p, c.solver);
    u_est = sol.u_est;
    io::write_npy(out / "y.npy", io::to_npy(img.y));
    rep["source"] = "reconstruction";
    rep["alpha"] = *alpha;
    rep["beta"] = beta;
    rep["iterations"] = sol.iterations;
    rep["converged"] = sol.converged;
    rep["sigma"] = img.sigma;
  }
  io::write_npy(out / "u_est.npy", object_npy(u_est, c.object));
  rep["rel_rmse"] = imaging::relative_error(u, u_est);
  write_json(out / "eval.json", rep);
  logger()->info("eval: relative RMSE {:.6g}", rep["rel_rmse"].get<double>());
}

inline std::vector<bench::System> sweep_systems(const RunConfig& c) {
  std::optional<train::TrainConfig> tc;
  auto train_cfg = [&]() -> const train::TrainConfig& {
    if (!tc) tc = resolve_train(c);
    return *tc;
  };
  std::vector<bench::System> out;
  std::optional<Index> optical_rows;
  // Optical systems first so Gaussian baselines can default to their row count.
  std::vector<std::optional<bench::System>> built(c.sweep.systems.size());
  for (std::size_t i = 0; i < c.sweep.systems.size(); ++i) {
    const auto& s = c.sweep.systems[i];
    if (s.source == "gaussian") continue;
    const RealField theta = s.source == "checkpoint" ? read_checkpoint(c.resolve_path(s.checkpoint)).theta : initial_theta(c);
    bench::System sys{s.id, optical_operator(train_cfg(), theta), c.object};
    if (s.shot) {
      const Index shots = train_cfg().shot_count();
      if (*s.shot < 0 || *s.shot >= shots) throw ConfigError("sweep.systems: shot out of range for " + s.id);
      sys = bench::single_shot_variant(sys, shots, *s.shot);
      sys.id = s.id;
    }
    if (!optical_rows) optical_rows = sys.G.rows();
    built[i] = std::move(sys);
  }
  for (std::size_t i = 0; i < c.sweep.systems.size(); ++i) {
    const auto& s = c.sweep.systems[i];
    if (s.source != "gaussian") continue;
    const Index rows = s.rows ? *s.rows : optical_rows ? *optical_rows : c.sensor_rows * c.sensor_cols;
    if (rows < 1) throw ConfigError("sweep.systems: rows must be >= 1 for " + s.id);
    built[i] = bench::System{s.id, bench::gaussian_baseline(rows, c.object, split_seed(c.seed, 0x6a55 + i)), c.object};
  }
  for (auto& b : built) out.push_back(std::move(*b));
  return out;
}

inline void cmd_sweep(const RunConfig& c, const std::filesystem::path& out) {
  const auto rep = bench::compare_report(sweep_systems(c), c.sweep.bench);
  std::ostringstream os;
  bench::write_csv(os, rep);
  write_text(out / "sweep.csv", os.str());
  write_json(out / "summary.json", bench::summary_json(rep, c.raw));
}

inline void cmd_gap(const RunConfig& c, const std::filesystem::path& out) {
  const RealField theta = c.gap.source == "checkpoint" ? read_checkpoint(c.resolve_path(c.gap.checkpoint)).theta : initial_theta(c);
  const auto G = optical_operator(resolve_train(c), theta);
  const auto X = bench::gaussian_baseline(G.rows(), c.object, split_seed(c.seed, 0x6a70));
  const auto g = bench::image_mean_gap(G, X, c.object, c.gap.sparsity, c.gap.trials, c.seed, c.objects.range);
  json j = bench::to_json(g);
  j["input_hash"] = io::git_blob_hash(c.raw.dump());
  write_json(out / "gap.json", j);
}

inline void cmd_gradcheck(const RunConfig& c, const std::filesystem::path& out) {
  const auto tc = resolve_train(c);
  const auto rep = train::finite_diff_audit(tc, train::initial_state(tc), c.gradcheck);
  std::ostringstream os;
  os << "parameter,index,analytic,finite_diff,rel_error,support_flip,pass\n" << std::setprecision(17);
  json entries = json::array();
  for (const auto& e : rep.entries) {
    os << e.parameter << ',' << e.index << ',' << e.analytic << ',' << e.finite_diff << ',' << e.rel_error << ','
       << e.support_flip << ',' << e.pass << '\n';
    entries.push_back({{"parameter", e.parameter},
                       {"index", e.index},
                       {"analytic", e.analytic},
                       {"finite_diff", e.finite_diff},
                       {"rel_error", e.rel_error},
                       {"support_flip", e.support_flip},
                       {"pass", e.pass}});
  }
  write_text(out / "gradcheck.csv", os.str());
  write_json(out / "gradcheck.json", {{"base_loss", rep.base_loss},
                                      {"pass_rate", rep.pass_rate},
                                      {"flip_rate", rep.flip_rate},
                                      {"unexplained", rep.unexplained},
                                      {"tolerance", c.gradcheck.tolerance},
                                      {"step", c.gradcheck.step},
                                      {"entries", entries}});
  logger()->info("gradcheck: pass rate {:.3f}, {} unexplained", rep.pass_rate, rep.unexplained);
}

inline int report_error(std::ostream& err, const char* kind, const std::string& message, int code) {
  err << json{{"status", "error"}, {"kind", kind}, {"message", message}, {"exit_code", code}}.dump() << '\n';
  return code;
}

}  // namespace detail

/// Runs one parsed invocation. Config problems exit 2, anything else 1.
inline int execute(const Invocation& inv, std::ostream& err = std::cerr) {
  RunConfig c;
  try {
    json doc = load_document(inv.config);
    apply_overrides(doc, inv.overrides);
    c = parse_config(doc, std::filesystem::absolute(inv.config).parent_path());
  } catch (const ConfigError& e) {
    return detail::report_error(err, "config", e.what(), 2);
  } catch (const std::exception& e) {
    return detail::report_error(err, "config", e.what(), 2);
  }
  try {
    std::filesystem::create_directories(inv.out);
    detail::write_text(inv.out / "config.json", c.raw.dump(2) + "\n");
    detail::logger()->info("{}: seed {} threads {} -> {}", inv.command, c.seed, c.threads, inv.out.string());
    if (inv.command == "psf") detail::cmd_psf(c, inv.out);
    else if (inv.command == "train") detail::cmd_train(c, inv.out, inv.resume);
    else if (inv.command == "eval") detail::cmd_eval(c, inv.out);
    else if (inv.command == "sweep") detail::cmd_sweep(c, inv.out);
    else if (inv.command == "gap") detail::cmd_gap(c, inv.out);
    else if (inv.command == "gradcheck") detail::cmd_gradcheck(c, inv.out);
    else return detail::report_error(err, "config", "unknown subcommand " + inv.command, 2);
  } catch (const ConfigError& e) {
    return detail::report_error(err, "config", e.what(), 2);
  } catch (const std::exception& e) {
    return detail::report_error(err, "runtime", e.what(), 1);
  }
  return 0;
}

inline int dispatch(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"metasurface compressed-sensing toolkit"};
  app.require_subcommand(1, 1);
  Invocation inv;
  std::string config, out, resume;
  std::uint64_t seed = 0;
  int threads = 1;
  double alpha = 0, beta = 0, sparsity = 0, noise = 0;
  std::string object;

  const std::vector<std::pair<const char*, const char*>> commands = {
      {"psf", "compute the PSF stack of the configured geometry"},
      {"train", "optimise geometry, alpha and beta end to end"},
      {"eval", "reconstruct an object file and report relative RMSE"},
      {"sweep", "error-vs-sparsity curves for one or more systems"},
      {"gap", "image mean gap against a Gaussian baseline"},
      {"gradcheck", "finite-difference audit of the end-to-end gradient"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--config", config, "JSON config file")->required()->check(CLI::ExistingFile);
    s->add_option("--out", out, "output directory")->required();
    s->add_option("--seed", seed, "override the master seed");
    s->add_option("--threads", threads, "worker threads; 1 is bitwise deterministic")->check(CLI::PositiveNumber);
    s->add_option("--alpha", alpha, "override alpha")->check(CLI::NonNegativeNumber);
    s->add_option("--beta", beta, "override beta")->check(CLI::NonNegativeNumber);
    s->add_option("--sparsity", sparsity, "override object sparsity")->check(CLI::Range(0.0, 1.0));
    s->add_option("--noise", noise, "override noise fraction")->check(CLI::NonNegativeNumber);
    if (std::string(name) == "eval") s->add_option("--object", object, "object NPY file");
    if (std::string(name) == "train") s->add_option("--resume", resume, "checkpoint directory to resume from");
    subs.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return detail::report_error(err, "usage", e.what(), 2);
  }

  for (auto* s : subs) {
    if (!s->parsed()) continue;
    inv.command = s->get_name();
    auto given = [&](const char* flag) { return s->count(flag) > 0; };
    if (given("--seed")) inv.overrides.seed = seed;
    if (given("--threads")) inv.overrides.threads = threads;
    if (given("--alpha")) inv.overrides.alpha = alpha;
    if (given("--beta")) inv.overrides.beta = beta;
    if (given("--sparsity")) inv.overrides.sparsity = sparsity;
    if (given("--noise")) inv.overrides.noise = noise;
    if (inv.command == "eval" && given("--object")) inv.overrides.object = std::filesystem::absolute(object).string();
    if (inv.command == "train" && given("--resume")) inv.resume = resume;
  }
  inv.config = config;
  inv.out = out;
  return execute(inv, err);
}

}  // namespace metacs::cli
