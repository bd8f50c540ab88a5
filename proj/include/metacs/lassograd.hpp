#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "metacs/linop/conv.hpp"
#include "metacs/linop/tv.hpp"
#include "metacs/sparsesolve.hpp"

namespace metacs {

inline constexpr double kDefaultSupportThreshold = 1e-6;

/// Support S of Psi u and the signs of (Psi u)_S.
struct SupportData {
  std::vector<Index> indices;
  std::vector<int> signs;
  Regularizer psi_kind = Regularizer::identity;
  Index psi_rows = 0;
};

/// S = { j : |(Psi u)_j| > rel_threshold * max_k |(Psi u)_k| }.
/// `psi` null means identity.
inline SupportData extract_support(const Vector& u, const LinearOperator* psi = nullptr,
                                   double rel_threshold = kDefaultSupportThreshold) {
  if (!(rel_threshold > 0.0 && rel_threshold < 1.0))
    throw ConfigError("extract_support: rel_threshold must lie in (0, 1)");
  const Vector v = psi ? psi->apply(u) : u;
  SupportData sd;
  sd.psi_kind = psi ? Regularizer::tv : Regularizer::identity;
  sd.psi_rows = v.size();
  const double peak = v.size() ? v.cwiseAbs().maxCoeff() : 0.0;
  if (peak == 0.0) return sd;
  const double cut = rel_threshold * peak;
  for (Index j = 0; j < v.size(); ++j) {
    if (std::abs(v[j]) > cut) {
      sd.indices.push_back(j);
      sd.signs.push_back(v[j] > 0 ? 1 : -1);
    }
  }
  return sd;
}

/// Orthonormal-row reduction P_S onto { x : supp(Psi x) subset of S }.
/// l1: gathers the support entries. TV: one coordinate per connected region
/// (pixels joined by off-support, i.e. zero-difference, edges), equal to the
/// region sum divided by sqrt(region size).
class SupportProjector {
 public:
  static SupportProjector l1(std::vector<Index> indices, Index n) {
    SupportProjector p;
    p.kind_ = Regularizer::identity;
    p.n_ = n;
    p.indices_ = std::move(indices);
    for (Index i : p.indices_)
      if (i < 0 || i >= n) throw ConfigError("projector: support index out of range");
    return p;
  }

  static SupportProjector tv(const SupportData& sd, const TvGradient& grad) {
    SupportProjector p;
    p.kind_ = Regularizer::tv;
    const Index n = grad.cols();
    p.n_ = n;
    if (sd.psi_rows != grad.rows()) throw ConfigError("projector: support/gradient size mismatch");
    std::vector<char> active(static_cast<std::size_t>(grad.rows()), 0);
    for (Index e : sd.indices) active[static_cast<std::size_t>(e)] = 1;

    std::vector<Index> parent(static_cast<std::size_t>(n));
    std::iota(parent.begin(), parent.end(), Index{0});
    auto find = [&](Index i) {
      while (parent[static_cast<std::size_t>(i)] != i) {
        auto& pi = parent[static_cast<std::size_t>(i)];
        pi = parent[static_cast<std::size_t>(pi)];
        i = pi;
      }
      return i;
    };
    for (Index a = 0; a < grad.axes(); ++a)
      for (Index i = 0; i < n; ++i) {
        if (active[static_cast<std::size_t>(a * n + i)]) continue;
        const Index ra = find(i), rb = find(grad.neighbour(i, a));
        if (ra != rb) parent[static_cast<std::size_t>(std::max(ra, rb))] = std::min(ra, rb);
      }
    // Labels in order of first appearance.
    std::vector<Index> root_label(static_cast<std::size_t>(n), -1);
    p.labels_.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      const Index r = find(i);
      auto& lbl = root_label[static_cast<std::size_t>(r)];
      if (lbl < 0) {
        lbl = static_cast<Index>(p.region_sizes_.size());
        p.region_sizes_.push_back(0);
      }
      p.labels_[static_cast<std::size_t>(i)] = lbl;
      ++p.region_sizes_[static_cast<std::size_t>(lbl)];
    }
    return p;
  }

  Regularizer kind() const { return kind_; }
  Index full_size() const { return n_; }
  Index rank() const {
    return kind_ == Regularizer::identity ? static_cast<Index>(indices_.size())
                                          : static_cast<Index>(region_sizes_.size());
  }
  const std::vector<Index>& indices() const { return indices_; }
  const std::vector<Index>& labels() const { return labels_; }
  const std::vector<Index>& region_sizes() const { return region_sizes_; }

  /// P_S x
  Vector restrict(const Vector& x) const {
    Vector r = Vector::Zero(rank());
    if (kind_ == Regularizer::identity) {
      for (Index k = 0; k < rank(); ++k) r[k] = x[indices_[static_cast<std::size_t>(k)]];
    } else {
      for (Index i = 0; i < n_; ++i) r[labels_[static_cast<std::size_t>(i)]] += x[i];
      for (Index k = 0; k < rank(); ++k)
        r[k] /= std::sqrt(static_cast<double>(region_sizes_[static_cast<std::size_t>(k)]));
    }
    return r;
  }

  /// P_S^T r
  Vector extend(const Vector& r) const {
    Vector x = Vector::Zero(n_);
    if (kind_ == Regularizer::identity) {
      for (Index k = 0; k < rank(); ++k) x[indices_[static_cast<std::size_t>(k)]] = r[k];
    } else {
      for (Index i = 0; i < n_; ++i) {
        const Index k = labels_[static_cast<std::size_t>(i)];
        x[i] = r[k] / std::sqrt(static_cast<double>(region_sizes_[static_cast<std::size_t>(k)]));
      }
    }
    return x;
  }

 private:
  Regularizer kind_ = Regularizer::identity;
  Index n_ = 0;
  std::vector<Index> indices_;
  std::vector<Index> labels_;
  std::vector<Index> region_sizes_;
};

/// `grad` is required for TV supports and ignored for l1.
inline SupportProjector build_projector(const SupportData& sd, Index n,
                                        const TvGradient* grad = nullptr) {
  if (sd.psi_kind == Regularizer::identity) return SupportProjector::l1(sd.indices, n);
  if (!grad) throw ConfigError("build_projector: TV support needs the gradient operator");
  if (grad->cols() != n) throw ConfigError("build_projector: dims mismatch");
  return SupportProjector::tv(sd, *grad);
}

/// Reduced KKT operator A = P_S G'G P_S' + beta I.
inline Vector apply_kkt_operator(const LinearOperator& G, double beta, const SupportProjector& proj,
                                 const Vector& v) {
  const Vector full = proj.extend(v);
  return proj.restrict(G.adjoint(G.apply(full))) + beta * v;
}

struct CgResult {
  Vector solution;
  int iterations = 0;
  double relative_residual = 0.0;
};

/// Conjugate gradients on the reduced KKT system. Default iteration cap is
/// 10 * rank(P_S). Throws SolverError if the tolerance is not reached.
inline CgResult solve_kkt_adjoint(const LinearOperator& G, double beta, const SupportProjector& proj,
                                  const Vector& rhs, double tol = 1e-10,
                                  std::optional<int> max_iters = std::nullopt) {
  if (beta < 0.0) throw ConfigError("kkt adjoint: beta must be >= 0");
  if (!rhs.allFinite()) throw ValidationError("kkt adjoint: non-finite right-hand side");
  if (rhs.size() != proj.rank()) throw ConfigError("kkt adjoint: rhs size != rank(P_S)");
  CgResult res;
  res.solution = Vector::Zero(rhs.size());
  const double bnorm = rhs.norm();
  if (bnorm == 0.0) return res;

  const int cap = max_iters.value_or(static_cast<int>(10 * proj.rank()));
  Vector r = rhs;
  Vector p = r;
  double rr = r.squaredNorm();
  for (int k = 1; k <= cap; ++k) {
    const Vector ap = apply_kkt_operator(G, beta, proj, p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) throw SolverError("kkt adjoint: operator not positive definite", std::sqrt(rr) / bnorm);
    const double step = rr / pap;
    res.solution += step * p;
    r -= step * ap;
    const double rr_new = r.squaredNorm();
    res.iterations = k;
    res.relative_residual = std::sqrt(rr_new) / bnorm;
    if (res.relative_residual <= tol) return res;
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  throw SolverError("kkt adjoint: conjugate gradients did not converge", res.relative_residual);
}

/// Right-hand side b = P_S G'y - alpha/2 P_S Psi' s of the reduced KKT system.
inline Vector kkt_rhs(const LassoProblem& p, const SupportData& sd, const SupportProjector& proj) {
  Vector s_full = Vector::Zero(sd.psi_rows);
  for (std::size_t k = 0; k < sd.indices.size(); ++k) s_full[sd.indices[k]] = sd.signs[k];
  const Vector psi_t_s = p.psi_kind == Regularizer::identity ? s_full : p.psi->adjoint(s_full);
  return proj.restrict(p.G.adjoint(p.y)) - 0.5 * p.alpha * proj.restrict(psi_t_s);
}

struct VjpOptions {
  double cg_tol = 1e-10;
  double support_threshold = kDefaultSupportThreshold;
  /// When y = G u + eta was formed inside the pipeline, pass u so the
  /// (u, G lambda) pair is routed into the operator gradient.
  std::optional<Vector> generating_object;
};

struct AdjointResult {
  double grad_alpha = 0.0;
  double grad_beta = 0.0;
  Vector grad_y;
  /// Operator cotangent as outer-product pairs.
  std::vector<CotangentPair> pairs;
  /// Filled when G is a ConvMeasurement (same layout as its kernels).
  std::vector<RealField> grad_psf;
  Vector lambda_full;
  int cg_iterations = 0;
  double cg_residual = 0.0;
  Index support_size = 0;
};

/// Reverse-mode sensitivity of u_est through the reduced KKT system.
/// Gradients are subgradients where the support is not locally constant.
inline AdjointResult lasso_vjp(const LassoProblem& p, const LassoSolution& sol, const Vector& dl_du,
                               const VjpOptions& opts = {}) {
  validate_problem(p);
  if (!sol.converged)
    throw SolverError("lasso_vjp: refusing to differentiate a non-converged solution");
  if (dl_du.size() != p.G.cols()) throw ConfigError("lasso_vjp: cotangent length mismatch");
  const TvGradient* tv = nullptr;
  if (p.psi_kind == Regularizer::tv) {
    if (!p.psi) throw ConfigError("lasso_vjp: TV regularizer needs psi");
    tv = p.psi->target<TvGradient>();
    if (!tv) throw UnsupportedError("lasso_vjp: TV psi must be a TvGradient");
  }
  const SupportData sd =
      extract_support(sol.u_est, tv ? &*p.psi : nullptr, opts.support_threshold);
  const SupportProjector proj = build_projector(sd, p.G.cols(), tv);

  AdjointResult out;
  out.support_size = proj.rank();
  const CgResult cg = solve_kkt_adjoint(p.G, p.beta, proj, proj.restrict(dl_du), opts.cg_tol);
  out.cg_iterations = cg.iterations;
  out.cg_residual = cg.relative_residual;
  out.lambda_full = proj.extend(cg.solution);
  const Vector& lam = out.lambda_full;

  Vector s_full = Vector::Zero(sd.psi_rows);
  for (std::size_t k = 0; k < sd.indices.size(); ++k) s_full[sd.indices[k]] = sd.signs[k];
  const Vector psi_t_s = tv ? p.psi->adjoint(s_full) : s_full;

  out.grad_alpha = -0.5 * lam.dot(psi_t_s);
  out.grad_beta = -lam.dot(sol.u_est);
  const Vector g_lam = p.G.apply(lam);
  out.grad_y = g_lam;
  const Vector residual = p.y - p.G.apply(sol.u_est);
  out.pairs.push_back({lam, residual});
  out.pairs.push_back({sol.u_est, -g_lam});
  if (opts.generating_object) out.pairs.push_back({*opts.generating_object, g_lam});
  if (const auto* conv = p.G.target<ConvMeasurement>()) out.grad_psf = conv->psf_gradient(out.pairs);
  return out;
}

}  // namespace metacs
