#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "metacs/bench.hpp"
#include "metacs/io/npy.hpp"
#include "metacs/io/surrogate_csv.hpp"
#include "metacs/train.hpp"

namespace metacs::cli {

using nlohmann::json;

/// Typed view of one JSON table. Every lookup checks the type; `finish`
/// rejects keys that were never read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected a table");
  }

  bool has(const std::string& k) const { return j_.contains(k) && !j_.at(k).is_null(); }

  template <class T>
  std::optional<T> opt(const std::string& k) {
    seen_.insert(k);
    if (!has(k)) return std::nullopt;
    const json& v = j_.at(k);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(k, "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(k, "expected an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) fail(k, "expected >= 0");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(k, "expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(k, "expected a string");
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      if (!v.is_array()) fail(k, "expected an array of numbers");
      for (const auto& e : v)
        if (!e.is_number()) fail(k, "expected an array of numbers");
    }
    return v.get<T>();
  }

  template <class T>
  T get(const std::string& k, T fallback) {
    return opt<T>(k).value_or(fallback);
  }

  template <class T>
  T req(const std::string& k) {
    auto v = opt<T>(k);
    if (!v) fail(k, "required");
    return *v;
  }

  Section sub(const std::string& k) {
    seen_.insert(k);
    static const json empty = json::object();
    return Section(has(k) ? j_.at(k) : empty, path_.empty() ? k : path_ + "." + k);
  }

  std::string choice(const std::string& k, const std::vector<std::string>& allowed, const std::string& fallback) {
    const auto v = get<std::string>(k, fallback);
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : "|") + a;
      fail(k, "must be one of " + list);
    }
    return v;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(key(k) + ": unknown key");
  }

  [[noreturn]] void fail(const std::string& k, const std::string& what) const {
    throw ConfigError(key(k) + ": " + what);
  }

 private:
  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

struct SurrogateSpec {
  std::string source = "synthetic";  // synthetic | constant | csv
  Index states = 1;
  Index degree = 24;
  std::optional<Index> csv_degree;
  std::filesystem::path path;
  Complex t{1.0, 0.0};
};

struct GeometrySpec {
  std::string init = "random";  // random | uniform | lens | file | checkpoint
  std::uint64_t seed = 99;
  std::filesystem::path path;
  double lens_depth = 0.0;
};

struct SweepSystemSpec {
  std::string id;
  std::string source;  // config | checkpoint | gaussian
  std::filesystem::path checkpoint;
  std::optional<Index> shot;
  std::optional<Index> rows;
};

struct SweepSpec {
  bench::SweepConfig bench;
  std::vector<SweepSystemSpec> systems;
};

struct GapSpec {
  double sparsity = 0.05;
  Index trials = 20;
  std::string source = "config";
  std::filesystem::path checkpoint;
};

struct EvalSpec {
  std::filesystem::path object;
  std::optional<std::filesystem::path> estimate;
  std::optional<std::filesystem::path> checkpoint;
  std::string system = "optical";  // optical | identity
  std::optional<double> alpha;
  std::optional<double> beta;
};

struct RunConfig {
  json raw;
  std::filesystem::path base_dir;
  std::uint64_t seed = 0;
  int threads = 1;
  double w_min = 0.0, w_max = 0.0;
  optics::OpticalGrid grid;
  SurrogateSpec surrogate;
  GeometrySpec geometry;
  ObjectDims object;
  Index sensor_rows = 0, sensor_cols = 0;
  std::optional<Index> shots;
  train::ObjectDistribution objects;
  double noise_fraction = 0.02;
  SolverOptions solver;
  train::TrainConfig train;  // geometry, surrogate and grid filled by resolve()
  train::AuditOptions gradcheck;
  SweepSpec sweep;
  GapSpec gap;
  EvalSpec eval;

  std::filesystem::path resolve_path(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : base_dir / p;
  }
};

/// Command-line overrides, applied to the raw document before parsing so the
/// echoed config is the effective one.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<double> alpha, beta, sparsity, noise;
  std::optional<std::string> object;
};

inline void apply_overrides(json& j, const Overrides& o) {
  if (!j.is_object()) throw ConfigError("config: top level must be a table");
  auto table = [&](const char* k) -> json& {
    if (!j.contains(k)) j[k] = json::object();
    return j[k];
  };
  if (o.seed) j["seed"] = *o.seed;
  if (o.threads) j["threads"] = *o.threads;
  if (o.noise) table("noise")["fraction"] = *o.noise;
  if (o.sparsity) {
    table("objects")["sparsity"] = *o.sparsity;
    table("sweep")["sparsities"] = json::array({*o.sparsity});
    table("gap")["sparsity"] = *o.sparsity;
  }
  if (o.alpha) {
    table("train")["alpha0"] = *o.alpha;
    table("sweep")["alpha"] = *o.alpha;
    table("eval")["alpha"] = *o.alpha;
  }
  if (o.beta) {
    table("train")["beta0"] = *o.beta;
    table("sweep")["beta"] = *o.beta;
    table("eval")["beta"] = *o.beta;
  }
  if (o.object) table("eval")["object"] = *o.object;
}

namespace detail {

inline imaging::ObjectKind parse_kind(Section& s, const std::string& key) {
  return s.choice(key, {"physical", "unphysical"}, "physical") == "physical" ? imaging::ObjectKind::physical
                                                                              : imaging::ObjectKind::unphysical;
}

inline SolverOptions parse_solver(Section s) {
  SolverOptions o;
  o.max_iters = s.get<int>("max_iters", o.max_iters);
  o.tol = s.get<double>("tol", o.tol);
  o.restart = s.get<bool>("restart", o.restart);
  s.finish();
  if (o.max_iters < 1) throw ConfigError("solver.max_iters: must be >= 1");
  if (!(o.tol > 0.0)) throw ConfigError("solver.tol: must be > 0");
  return o;
}

}  // namespace detail

/// Parses and validates everything that does not touch the filesystem.
inline RunConfig parse_config(const json& doc, std::filesystem::path base_dir = {}) {
  RunConfig c;
  c.raw = doc;
  c.base_dir = std::move(base_dir);
  Section top(doc, "");
  c.seed = top.get<std::uint64_t>("seed", 0);
  c.threads = top.get<int>("threads", 1);
  if (c.threads < 1) top.fail("threads", "must be >= 1");

  {
    auto s = top.sub("optics");
    c.grid.cells = s.req<Index>("cells");
    c.grid.pitch = s.req<double>("pitch_m");
    c.grid.wavelength = s.req<double>("wavelength_m");
    c.grid.sensor_distance = s.req<double>("sensor_distance_m");
    c.grid.padding = s.get<Index>("padding", 0);
    c.grid.binning = s.get<Index>("binning", 1);
    c.w_min = s.req<double>("w_min_m");
    c.w_max = s.req<double>("w_max_m");
    if (!(c.w_max > c.w_min && c.w_min > 0.0)) s.fail("w_max_m", "width bounds must satisfy 0 < w_min_m < w_max_m");
    if (s.has("depths_m") && s.has("depth_range_m")) s.fail("depths_m", "give depths_m or depth_range_m, not both");
    if (auto d = s.opt<std::vector<double>>("depths_m")) {
      c.grid.depths = *d;
    } else {
      auto r = s.sub("depth_range_m");
      const double near = r.req<double>("near"), far = r.req<double>("far");
      const Index count = r.req<Index>("count");
      r.finish();
      if (count < 1 || !(near > 0.0) || !(far >= near)) throw ConfigError("optics.depth_range_m: need 0 < near <= far, count >= 1");
      c.grid.depths = optics::inverse_spaced_depths(near, far, count);
    }
    s.finish();
    c.grid.validate();
  }
  {
    auto s = top.sub("surrogate");
    auto& g = c.surrogate;
    g.source = s.choice("source", {"synthetic", "constant", "csv"}, "synthetic");
    g.states = s.get<Index>("states", 1);
    g.degree = s.get<Index>("degree", 24);
    if (g.source == "csv") {
      g.path = s.req<std::string>("path");
      g.csv_degree = s.opt<Index>("degree");
    }
    if (g.source == "constant") {
      const auto t = s.get<std::vector<double>>("t", {1.0, 0.0});
      if (t.size() != 2) s.fail("t", "expected [re, im]");
      g.t = {t[0], t[1]};
    }
    s.finish();
    if (g.states < 1 || g.states > 2) throw ConfigError("surrogate.states: must be 1 or 2");
    if (g.degree < 0) throw ConfigError("surrogate.degree: must be >= 0");
  }
  {
    auto s = top.sub("geometry");
    auto& g = c.geometry;
    g.init = s.choice("init", {"random", "uniform", "lens", "file", "checkpoint"}, "random");
    g.seed = s.get<std::uint64_t>("seed", 99);
    if (g.init == "file" || g.init == "checkpoint") g.path = s.req<std::string>("path");
    if (g.init == "lens") g.lens_depth = s.get<double>("depth_m", c.grid.depths.front());
    s.finish();
  }
  {
    auto s = top.sub("system");
    c.object.rows = s.req<Index>("object_rows");
    c.object.cols = s.req<Index>("object_cols");
    c.object.channels = static_cast<Index>(c.grid.depths.size());
    c.sensor_rows = s.req<Index>("sensor_rows");
    c.sensor_cols = s.req<Index>("sensor_cols");
    c.shots = s.opt<Index>("shots");
    s.finish();
    if (c.object.rows < 1 || c.object.cols < 1) throw ConfigError("system: object dims must be >= 1");
    if (c.sensor_rows < 1 || c.sensor_cols < 1) throw ConfigError("system: sensor dims must be >= 1");
    if (c.shots && (*c.shots < 1 || *c.shots > c.surrogate.states))
      throw ConfigError("system.shots: must lie in [1, surrogate.states]");
  }
  {
    auto s = top.sub("objects");
    c.objects.sparsity = s.get<double>("sparsity", 0.05);
    c.objects.kind = detail::parse_kind(s, "kind");
    const auto r = s.get<std::vector<double>>("range", {0.8, 1.2});
    if (r.size() != 2 || r[1] < r[0]) s.fail("range", "expected [lo, hi] with lo <= hi");
    c.objects.range = {r[0], r[1]};
    s.finish();
    if (!(c.objects.sparsity > 0.0 && c.objects.sparsity <= 1.0)) throw ConfigError("objects.sparsity: must lie in (0, 1]");
  }
  {
    auto s = top.sub("noise");
    c.noise_fraction = s.get<double>("fraction", 0.02);
    s.finish();
    if (c.noise_fraction < 0.0) throw ConfigError("noise.fraction: must be >= 0");
  }
  c.solver = detail::parse_solver(top.sub("solver"));

  {
    auto s = top.sub("train");
    auto& t = c.train;
    t.object = c.object;
    t.sensor_rows = c.sensor_rows;
    t.sensor_cols = c.sensor_cols;
    t.shots = c.shots;
    t.objects = c.objects;
    t.noise_fraction = c.noise_fraction;
    t.solver = c.solver;
    t.seed = c.seed;
    t.threads = c.threads;
    t.w_min = c.w_min;
    t.w_max = c.w_max;
    t.grid = c.grid;
    t.batch_size = s.get<Index>("batch_size", t.batch_size);
    t.iterations = s.get<int>("iterations", t.iterations);
    t.adam.lr_theta = s.get<double>("lr_theta", t.adam.lr_theta);
    t.adam.lr_log = s.get<double>("lr_log", t.adam.lr_log);
    t.alpha0 = s.opt<double>("alpha0");
    t.beta0 = s.opt<double>("beta0");
    t.fixed_batch = s.get<bool>("fixed_batch", t.fixed_batch);
    t.train_geometry = s.get<bool>("train_geometry", t.train_geometry);
    t.train_alpha = s.get<bool>("train_alpha", t.train_alpha);
    t.train_beta = s.get<bool>("train_beta", t.train_beta);
    t.validation_size = s.get<Index>("validation_size", t.validation_size);
    t.validation_every = s.get<int>("validation_every", t.validation_every);
    t.checkpoint_every = s.get<int>("checkpoint_every", t.checkpoint_every);
    t.cg_tol = s.get<double>("cg_tol", t.cg_tol);
    s.finish();
  }
  {
    auto s = top.sub("gradcheck");
    auto& g = c.gradcheck;
    g.theta_coords = s.get<Index>("theta_coords", g.theta_coords);
    g.step = s.get<double>("step", g.step);
    g.tolerance = s.get<double>("tolerance", g.tolerance);
    g.seed = s.get<std::uint64_t>("seed", c.seed);
    s.finish();
    if (g.theta_coords < 0 || !(g.step > 0.0) || !(g.tolerance > 0.0))
      throw ConfigError("gradcheck: need theta_coords >= 0, step > 0, tolerance > 0");
  }
  {
    auto s = top.sub("sweep");
    auto& b = c.sweep.bench;
    b.sparsities = s.get<std::vector<double>>("sparsities", {c.objects.sparsity});
    b.trials = s.get<Index>("trials", b.trials);
    b.noise_fraction = c.noise_fraction;
    b.kind = c.objects.kind;
    b.range = c.objects.range;
    b.seed = c.seed;
    b.alpha = s.opt<double>("alpha");
    b.beta = s.get<double>("beta", 0.0);
    b.search_lo = s.get<double>("search_lo", b.search_lo);
    b.search_hi = s.get<double>("search_hi", b.search_hi);
    b.search_evals = s.get<int>("search_evals", b.search_evals);
    b.solver = c.solver;
    b.threads = c.threads;
    if (s.has("systems")) {
      const json& arr = doc.at("sweep").at("systems");
      s.opt<json>("systems");
      if (!arr.is_array() || arr.empty()) s.fail("systems", "expected a non-empty array");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        Section e(arr[i], "sweep.systems[" + std::to_string(i) + "]");
        SweepSystemSpec sp;
        sp.id = e.req<std::string>("id");
        sp.source = e.choice("source", {"config", "checkpoint", "gaussian"}, "config");
        if (sp.source == "checkpoint") sp.checkpoint = e.req<std::string>("checkpoint");
        sp.shot = e.opt<Index>("shot");
        sp.rows = e.opt<Index>("rows");
        e.finish();
        c.sweep.systems.push_back(sp);
      }
    } else {
      c.sweep.systems.push_back({"config", "config", {}, std::nullopt, std::nullopt});
    }
    s.finish();
    b.validate();
  }
  {
    auto s = top.sub("gap");
    c.gap.sparsity = s.get<double>("sparsity", c.objects.sparsity);
    c.gap.trials = s.get<Index>("trials", c.gap.trials);
    c.gap.source = s.choice("source", {"config", "checkpoint"}, "config");
    if (c.gap.source == "checkpoint") c.gap.checkpoint = s.req<std::string>("checkpoint");
    s.finish();
    if (!(c.gap.sparsity > 0.0 && c.gap.sparsity <= 1.0) || c.gap.trials < 1)
      throw ConfigError("gap: need sparsity in (0, 1] and trials >= 1");
  }
  {
    auto s = top.sub("eval");
    auto& e = c.eval;
    if (auto o = s.opt<std::string>("object")) e.object = *o;
    if (auto o = s.opt<std::string>("estimate")) e.estimate = *o;
    if (auto o = s.opt<std::string>("checkpoint")) e.checkpoint = *o;
    e.system = s.choice("system", {"optical", "identity"}, "optical");
    e.alpha = s.opt<double>("alpha");
    e.beta = s.opt<double>("beta");
    s.finish();
    if ((e.alpha && *e.alpha < 0.0) || (e.beta && *e.beta < 0.0)) throw ConfigError("eval: alpha and beta must be >= 0");
  }
  top.finish();
  return c;
}

inline json load_document(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot open " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline optics::SurrogateModel build_surrogate(const RunConfig& c) {
  const auto& s = c.surrogate;
  if (s.source == "synthetic") return optics::synthetic_surrogate(c.w_min, c.w_max, s.states, s.degree);
  if (s.source == "constant") return optics::constant_surrogate(c.w_min, c.w_max, s.t, s.states);
  auto m = io::load_surrogate_csv(c.resolve_path(s.path), c.w_min, c.w_max, s.csv_degree);
  if (m.states() != s.states) throw ConfigError("surrogate: csv state count differs from surrogate.states");
  return m;
}

inline RealField load_theta(const std::filesystem::path& p) {
  try {
    return io::field_from_npy(io::read_npy(p));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("geometry: cannot read " + p.string() + ": " + e.what());
  }
}

inline RealField initial_theta(const RunConfig& c) {
  const auto& g = c.geometry;
  RealField theta;
  if (g.init == "random") theta = optics::random_geometry(c.grid.cells, c.w_min, c.w_max, g.seed).theta;
  else if (g.init == "uniform") theta = optics::uniform_geometry(c.grid.cells, c.w_min, c.w_max).theta;
  else if (g.init == "lens") theta = optics::lens_geometry(c.grid, c.w_min, c.w_max, g.lens_depth).theta;
  else if (g.init == "file") theta = load_theta(c.resolve_path(g.path));
  else theta = load_theta(c.resolve_path(g.path) / "theta.npy");
  if (theta.rows() != c.grid.cells || theta.cols() != c.grid.cells)
    throw ConfigError("geometry: theta must be cells x cells");
  return theta;
}

/// Fills the parts of the training config that need files.
inline train::TrainConfig resolve_train(const RunConfig& c) {
  train::TrainConfig t = c.train;
  t.surrogate = build_surrogate(c);
  t.theta0 = initial_theta(c);
  t.validate();
  return t;
}

}  // namespace metacs::cli
