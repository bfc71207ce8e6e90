#include "dmpsc/sdp.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

#include <Eigen/Eigenvalues>

namespace dmpsc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

MatrixXd SdpBlock::eval(const VectorXd& x) const {
  MatrixXd s = f0;
  for (size_t j = 0; j < var.size(); ++j) s += x[var[j]] * coeff[j];
  return s;
}

SdpBlock& SdpProblem::add_block(int dim, std::string tag) {
  SdpBlock b;
  b.dim = dim;
  b.f0 = MatrixXd::Zero(dim, dim);
  b.tag = std::move(tag);
  blocks.push_back(std::move(b));
  return blocks.back();
}

void SdpProblem::add_scalar(const std::vector<int>& idx, const VectorXd& a,
                            double b, std::string tag) {
  SdpBlock& blk = add_block(1, std::move(tag));
  blk.f0(0, 0) = b;
  for (int k = 0; k < a.size(); ++k) {
    if (a[k] == 0.0) continue;
    blk.var.push_back(idx[k]);
    blk.coeff.push_back(MatrixXd::Constant(1, 1, a[k]));
  }
}

namespace {

struct BarrierEval {
  bool interior = false;
  double value = 0.0;
};

BarrierEval barrier_value(const std::vector<SdpBlock>& blocks,
                          const VectorXd& x) {
  BarrierEval out;
  double v = 0.0;
  for (const auto& b : blocks) {
    MatrixXd s = b.eval(x);
    Eigen::LLT<MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) return out;
    double logdet = 0.0;
    for (int i = 0; i < b.dim; ++i) {
      double d = llt.matrixL()(i, i);
      if (!(d > 0.0) || !std::isfinite(d)) return out;
      logdet += std::log(d);
    }
    v -= 2.0 * logdet;
  }
  out.interior = std::isfinite(v);
  out.value = v;
  return out;
}

// Gradient and Hessian of the log-det barrier in x-space.
void barrier_derivatives(const std::vector<SdpBlock>& blocks,
                         const VectorXd& x, VectorXd& grad, MatrixXd& hess) {
  grad.setZero();
  hess.setZero();
  std::vector<MatrixXd> u;
  for (const auto& b : blocks) {
    MatrixXd s = b.eval(x);
    Eigen::LLT<MatrixXd> llt(s);
    MatrixXd sinv = llt.solve(MatrixXd::Identity(b.dim, b.dim));
    const size_t nv = b.var.size();
    u.resize(nv);
    for (size_t j = 0; j < nv; ++j) {
      u[j] = sinv * b.coeff[j];
      grad[b.var[j]] -= u[j].trace();
    }
    for (size_t j = 0; j < nv; ++j) {
      for (size_t l = j; l < nv; ++l) {
        double h = u[j].cwiseProduct(u[l].transpose()).sum();
        hess(b.var[j], b.var[l]) += h;
        if (b.var[j] != b.var[l]) hess(b.var[l], b.var[j]) += h;
      }
    }
  }
}

struct PathResult {
  VectorXd x;
  int steps = 0;
  bool ok = false;
};

// Minimize t*c'x + barrier(x) over x = xp + N*y, following the central path
// until n_constraints/t_final < gap_tol.  `stop` allows early exit (phase I).
PathResult follow_path(const std::vector<SdpBlock>& blocks, const VectorXd& c,
                       const VectorXd& xp, const MatrixXd& N, VectorXd y,
                       const SdpOptions& opts,
                       const std::function<bool(const VectorXd&)>& stop) {
  PathResult out;
  const int ny = static_cast<int>(N.cols());
  const int nx = static_cast<int>(xp.size());
  int m = 0;
  for (const auto& b : blocks) m += b.dim;

  VectorXd gx(nx);
  MatrixXd hx(nx, nx);

  double t = 1.0;
  VectorXd x = xp + N * y;
  while (true) {
    // Newton centering at fixed t.
    for (int it = 0; it < 80; ++it) {
      if (out.steps++ > opts.max_newton)
        throw std::runtime_error("sdp: newton iteration limit");
      barrier_derivatives(blocks, x, gx, hx);
      VectorXd g = N.transpose() * (t * c + gx);
      MatrixXd h = N.transpose() * hx * N;
      double ridge = 1e-13 * (1.0 + h.trace() / std::max(1, ny));
      h.diagonal().array() += ridge;
      Eigen::LDLT<MatrixXd> ldlt(h);
      VectorXd dy = ldlt.solve(-g);
      double decrement = -g.dot(dy);
      if (!(decrement > 0)) {  // non-descent due to numerics
        dy = -g;
        decrement = g.squaredNorm();
      }
      double f0 = t * c.dot(x);
      BarrierEval b0 = barrier_value(blocks, x);
      double alpha = 1.0;
      if (stop && dy[ny - 1] < 0.0) {
        // phase I: keep the slack coordinate from overshooting far below 0
        double cap = (-1.0 - y[ny - 1]) / dy[ny - 1];
        if (cap > 0.0) alpha = std::min(alpha, cap);
      }
      VectorXd ycand, xcand;
      for (; alpha > 1e-14; alpha *= 0.5) {
        ycand = y + alpha * dy;
        xcand = xp + N * ycand;
        BarrierEval bc = barrier_value(blocks, xcand);
        if (!bc.interior) continue;
        double lhs = t * c.dot(xcand) + bc.value;
        if (lhs <= f0 + b0.value - 0.25 * alpha * decrement) break;
      }
      if (alpha <= 1e-14) break;  // stalled; accept current center
      y = ycand;
      x = xcand;
      if (stop && stop(x)) {
        out.x = x;
        out.ok = true;
        return out;
      }
      if (decrement < 1e-10 || decrement * alpha < 1e-12) break;
    }
    if (static_cast<double>(m) / t < opts.gap_tol) break;
    t *= opts.mu;
  }
  out.x = x;
  out.ok = true;
  return out;
}

}  // namespace

SdpResult solve_sdp(const SdpProblem& prob, const SdpOptions& opts) {
  SdpResult res;
  const int nx = prob.nvar;

  // Eliminate equality constraints: x = xp + N y.
  MatrixXd N;
  VectorXd xp = VectorXd::Zero(nx);
  if (prob.eq_a.rows() > 0) {
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(prob.eq_a);
    xp = cod.solve(prob.eq_b);
    if ((prob.eq_a * xp - prob.eq_b).norm() > 1e-8 * (1.0 + prob.eq_b.norm())) {
      res.message = "inconsistent equality constraints";
      return res;
    }
    Eigen::FullPivLU<MatrixXd> lu(prob.eq_a);
    lu.setThreshold(1e-10);
    N = lu.kernel();
  } else {
    N = MatrixXd::Identity(nx, nx);
  }

  // Phase I: minimize s subject to F_k(x) + s I >= 0.  Box bounds keep the
  // phase-I barrier bounded in variables the slack does not touch.
  std::vector<SdpBlock> aug = prob.blocks;
  for (auto& b : aug) {
    b.var.push_back(nx);
    b.coeff.push_back(MatrixXd::Identity(b.dim, b.dim));
  }
  const double box = 1e6;
  for (int j = 0; j < nx; ++j) {
    SdpBlock lo, hi;
    lo.dim = hi.dim = 1;
    lo.f0 = hi.f0 = MatrixXd::Constant(1, 1, box);
    lo.var = {j};
    hi.var = {j};
    lo.coeff = {MatrixXd::Constant(1, 1, 1.0)};
    hi.coeff = {MatrixXd::Constant(1, 1, -1.0)};
    aug.push_back(std::move(lo));
    aug.push_back(std::move(hi));
  }
  MatrixXd n1 = MatrixXd::Zero(nx + 1, N.cols() + 1);
  n1.topLeftCorner(nx, N.cols()) = N;
  n1(nx, N.cols()) = 1.0;
  VectorXd xp1 = VectorXd::Zero(nx + 1);
  xp1.head(nx) = xp;

  double s0 = 1.0;
  {
    VectorXd x0 = xp;
    for (const auto& b : prob.blocks) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(b.eval(x0));
      s0 = std::max(s0, -es.eigenvalues().minCoeff() + 1.0);
    }
  }
  VectorXd y1 = VectorXd::Zero(N.cols() + 1);
  y1[N.cols()] = s0;
  VectorXd c1 = VectorXd::Zero(nx + 1);
  c1[nx] = 1.0;

  const double margin = opts.interior_margin;
  PathResult p1;
  try {
    p1 = follow_path(aug, c1, xp1, n1, y1, opts,
                     [&](const VectorXd& x) { return x[nx] < -margin; });
  } catch (const std::exception& e) {
    res.message = e.what();
    return res;
  }
  res.newton_steps = p1.steps;
  res.phase1_slack = p1.x[nx];
  if (!(p1.x[nx] < -0.0)) {
    res.message = "infeasible (phase-I slack " + std::to_string(p1.x[nx]) + ")";
    return res;
  }

  VectorXd xfeas = p1.x.head(nx);
  res.feasible = true;

  if (prob.cost.size() == 0 || prob.cost.norm() == 0.0) {
    res.x = xfeas;
    res.objective = 0.0;
    return res;
  }

  // Phase II from the interior point.
  Eigen::CompleteOrthogonalDecomposition<MatrixXd> codn(N);
  VectorXd y = codn.solve(xfeas - xp);
  PathResult p2;
  try {
    p2 = follow_path(prob.blocks, prob.cost, xp, N, y, opts, nullptr);
  } catch (const std::exception& e) {
    res.feasible = false;
    res.message = e.what();
    return res;
  }
  res.newton_steps += p2.steps;
  res.x = p2.x;
  res.objective = prob.cost.dot(p2.x);
  return res;
}

}  // namespace dmpsc
