#include "dmpsc/conic.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

namespace dmpsc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

double LinearTerm::eval(const VectorXd& x) const {
  double v = 0.0;
  for (size_t k = 0; k < idx.size(); ++k) v += coef[k] * x[idx[k]];
  return v;
}

double QuadraticConstraint::violation(const VectorXd& x) const {
  VectorXd xi(idx.size());
  for (size_t k = 0; k < idx.size(); ++k) xi[k] = x[idx[k]];
  return xi.dot(shape * xi) + lin.dot(xi) - rhs;
}

void ConicProgram::init_objective() {
  q = MatrixXd::Zero(nvar, nvar);
  c = VectorXd::Zero(nvar);
}

double ConicProgram::objective(const VectorXd& x) const {
  if (q.size() == 0) return c0;
  return 0.5 * x.dot(q * x) + c.dot(x) + c0;
}

double ConicProgram::max_violation(const VectorXd& x) const {
  double v = 0.0;
  for (const auto& e : eq) v = std::max(v, std::abs(e.violation(x)));
  for (const auto& l : ineq) v = std::max(v, l.violation(x));
  for (const auto& qc : qineq) v = std::max(v, qc.violation(x));
  return v;
}

namespace {

// Reduced-space barrier data; phase-I appends a slack coordinate s so that
// every constraint reads  w'yz <= b  (linear)  or  q(y) - s <= 0  (quadratic).
struct Reduction {
  MatrixXd n;        // x = xp + n*y
  VectorXd xp;
  int ny = 0;
};

struct QuadData {
  std::vector<int> idx;
  MatrixXd n_rows;   // rows of N at idx
  VectorXd xp_rows;
  MatrixXd hess_y;   // 2 N_I' P N_I, padded with zero slack row/col
  const QuadraticConstraint* src = nullptr;

  double value(const VectorXd& y, int ny) const {
    VectorXd xi = xp_rows + n_rows * y.head(ny);
    return xi.dot(src->shape * xi) + src->lin.dot(xi) - src->rhs;
  }
  VectorXd grad(const VectorXd& y, int ny, int nz) const {
    VectorXd xi = xp_rows + n_rows * y.head(ny);
    VectorXd g = VectorXd::Zero(nz);
    g.head(ny) = n_rows.transpose() * (2.0 * (src->shape * xi) + src->lin);
    return g;
  }
};

struct BarrierProblem {
  int nz = 0;            // y dims (+1 in phase I)
  int ny = 0;
  bool phase1 = false;
  MatrixXd lin_w;        // one row per linear inequality
  VectorXd lin_b;
  std::vector<QuadData> quads;
  // objective: 0.5 y'Qy + cy'y  (phase I: Q=0, c=e_s)
  MatrixXd obj_q;
  VectorXd obj_c;

  int m() const { return static_cast<int>(lin_b.size() + quads.size()); }

  bool slacks(const VectorXd& y, VectorXd& dl, VectorXd& dq) const {
    dl = lin_b - lin_w * y;
    dq.resize(quads.size());
    for (size_t j = 0; j < quads.size(); ++j) {
      double qv = quads[j].value(y, ny);
      dq[j] = phase1 ? y[nz - 1] - qv : -qv;
    }
    return (dl.size() == 0 || dl.minCoeff() > 0.0) &&
           (dq.size() == 0 || dq.minCoeff() > 0.0);
  }

  double merit(double t, const VectorXd& y, bool& interior) const {
    VectorXd dl, dq;
    if (!slacks(y, dl, dq)) {
      interior = false;
      return 0.0;
    }
    interior = true;
    double v = t * (0.5 * y.dot(obj_q * y) + obj_c.dot(y));
    v -= dl.array().log().sum();
    if (dq.size() > 0) v -= dq.array().log().sum();
    return v;
  }
};

// Newton path-following on the reduced barrier problem.  In phase I the
// last coordinate is the feasibility slack; steps along it are capped so a
// nearly-linear objective cannot overshoot by orders of magnitude.
VectorXd follow_path(const BarrierProblem& bp, VectorXd y,
                     const ConicOptions& opts, int& steps,
                     const std::function<bool(const VectorXd&)>& stop) {
  const int nz = bp.nz;
  const int m = bp.m();
  VectorXd dl, dq;
  double t = 1.0;
  while (true) {
    for (int inner = 0; inner < 80; ++inner) {
      if (steps++ > opts.max_newton)
        throw std::runtime_error("conic: newton iteration limit");
      if (!bp.slacks(y, dl, dq))
        throw std::runtime_error("conic: lost interior point");
      VectorXd g = t * (bp.obj_q * y + bp.obj_c);
      MatrixXd h = t * bp.obj_q;
      // Linear inequalities: scaled rows, single rank-k update.
      MatrixXd scaled = dl.cwiseInverse().asDiagonal() * bp.lin_w;
      g.noalias() += scaled.transpose() * VectorXd::Ones(scaled.rows());
      h.noalias() += scaled.transpose() * scaled;
      for (size_t j = 0; j < bp.quads.size(); ++j) {
        VectorXd gq = bp.quads[j].grad(y, bp.ny, nz);
        if (bp.phase1) gq[nz - 1] -= 1.0;
        g.noalias() += -gq / -dq[j];  // grad of -log(dq), dq = -(q - s)
        h.noalias() += (gq * gq.transpose()) / (dq[j] * dq[j]);
        h.noalias() += bp.quads[j].hess_y / dq[j];
      }
      double ridge = 1e-13 * (1.0 + h.trace() / std::max(1, nz));
      h.diagonal().array() += ridge;
      Eigen::LDLT<MatrixXd> ldlt(h);
      VectorXd dy = ldlt.solve(-g);
      double dec = -g.dot(dy);
      if (!(dec > 0)) {
        dy = -g;
        dec = g.squaredNorm();
      }
      bool ok = false;
      double f0 = bp.merit(t, y, ok);
      double alpha = 1.0;
      if (bp.phase1 && dy[nz - 1] < 0.0) {
        // do not drive the slack far past its goal of "slightly negative"
        double cap = (-1.0 - y[nz - 1]) / dy[nz - 1];
        if (cap > 0.0) alpha = std::min(alpha, cap);
      }
      VectorXd ycand;
      for (; alpha > 1e-14; alpha *= 0.5) {
        ycand = y + alpha * dy;
        bool interior = false;
        double fc = bp.merit(t, ycand, interior);
        if (interior && fc <= f0 - 0.25 * alpha * dec) break;
      }
      if (alpha <= 1e-14) break;
      y = ycand;
      if (stop && stop(y)) return y;
      if (dec < 1e-9 || dec * alpha < 1e-12) break;
    }
    if (static_cast<double>(m) / t < opts.gap_tol) break;
    t *= opts.mu;
  }
  return y;
}

Reduction reduce(const ConicProgram& prog, ConicResult& res) {
  Reduction red;
  const int nx = prog.nvar;
  if (!prog.eq.empty()) {
    MatrixXd a = MatrixXd::Zero(prog.eq.size(), nx);
    VectorXd b(prog.eq.size());
    for (size_t r = 0; r < prog.eq.size(); ++r) {
      const auto& e = prog.eq[r];
      for (size_t k = 0; k < e.a.idx.size(); ++k)
        a(r, e.a.idx[k]) += e.a.coef[k];
      b[r] = e.rhs;
    }
    Eigen::CompleteOrthogonalDecomposition<MatrixXd> cod(a);
    red.xp = cod.solve(b);
    if ((a * red.xp - b).norm() > 1e-8 * (1.0 + b.norm())) {
      res.status = SolveStatus::kInfeasible;
      res.message = "inconsistent equality constraints";
      return red;
    }
    Eigen::FullPivLU<MatrixXd> lu(a);
    lu.setThreshold(1e-10);
    red.n = lu.kernel();
  } else {
    red.xp = VectorXd::Zero(nx);
    red.n = MatrixXd::Identity(nx, nx);
  }
  red.ny = static_cast<int>(red.n.cols());
  res.status = SolveStatus::kOptimal;
  return red;
}

BarrierProblem build_barrier(const ConicProgram& prog, const Reduction& red,
                             bool phase1) {
  BarrierProblem bp;
  bp.ny = red.ny;
  bp.phase1 = phase1;
  bp.nz = red.ny + (phase1 ? 1 : 0);
  const int nl = static_cast<int>(prog.ineq.size());
  // Phase I additionally boxes the reduced coordinates so the barrier stays
  // bounded along directions the slack does not touch.
  const int nbox = phase1 ? 2 * red.ny : 0;
  bp.lin_w = MatrixXd::Zero(nl + nbox, bp.nz);
  bp.lin_b = VectorXd::Zero(nl + nbox);
  for (int r = 0; r < nl; ++r) {
    const auto& l = prog.ineq[r];
    VectorXd ax = VectorXd::Zero(prog.nvar);
    for (size_t k = 0; k < l.a.idx.size(); ++k) ax[l.a.idx[k]] += l.a.coef[k];
    bp.lin_w.row(r).head(red.ny) = (red.n.transpose() * ax).transpose();
    bp.lin_b[r] = l.rhs - ax.dot(red.xp);
    if (phase1) bp.lin_w(r, bp.nz - 1) = -1.0;
  }
  for (int j = 0; j < nbox / 2; ++j) {
    bp.lin_w(nl + 2 * j, j) = 1.0;
    bp.lin_b[nl + 2 * j] = 1e6;
    bp.lin_w(nl + 2 * j + 1, j) = -1.0;
    bp.lin_b[nl + 2 * j + 1] = 1e6;
  }
  for (const auto& qc : prog.qineq) {
    QuadData qd;
    qd.src = &qc;
    qd.idx = qc.idx;
    const int ni = static_cast<int>(qc.idx.size());
    qd.n_rows = MatrixXd::Zero(ni, red.ny);
    qd.xp_rows = VectorXd::Zero(ni);
    for (int k = 0; k < ni; ++k) {
      qd.n_rows.row(k) = red.n.row(qc.idx[k]);
      qd.xp_rows[k] = red.xp[qc.idx[k]];
    }
    qd.hess_y = MatrixXd::Zero(bp.nz, bp.nz);
    qd.hess_y.topLeftCorner(red.ny, red.ny) =
        2.0 * qd.n_rows.transpose() * qc.shape * qd.n_rows;
    bp.quads.push_back(std::move(qd));
  }
  bp.obj_q = MatrixXd::Zero(bp.nz, bp.nz);
  bp.obj_c = VectorXd::Zero(bp.nz);
  if (phase1) {
    bp.obj_c[bp.nz - 1] = 1.0;
  } else if (prog.q.size() > 0) {
    bp.obj_q.topLeftCorner(red.ny, red.ny) =
        red.n.transpose() * prog.q * red.n;
    bp.obj_c.head(red.ny) =
        red.n.transpose() * (prog.q * red.xp + prog.c);
  }
  return bp;
}

ConicResult solve_impl(const ConicProgram& prog, const ConicOptions& opts,
                       bool feasibility_only) {
  ConicResult res;
  Reduction red = reduce(prog, res);
  if (res.status == SolveStatus::kInfeasible) return res;
  res.status = SolveStatus::kError;

  // Phase I.
  BarrierProblem bp1 = build_barrier(prog, red, /*phase1=*/true);
  VectorXd y1 = VectorXd::Zero(bp1.nz);
  if (!bp1.quads.empty()) {
    // The particular solution can sit orders of magnitude outside the
    // quadratic constraints; path-following then crawls.  Start at the
    // minimizer of the total quadratic load instead (one linear solve).
    MatrixXd h = MatrixXd::Zero(red.ny, red.ny);
    VectorXd g = VectorXd::Zero(red.ny);
    for (const auto& qd : bp1.quads) {
      h += qd.hess_y.topLeftCorner(red.ny, red.ny);
      g += qd.grad(VectorXd::Zero(bp1.nz), bp1.ny, bp1.nz).head(red.ny);
    }
    h.diagonal().array() += 1e-8 * (1.0 + h.trace() / std::max(1, red.ny));
    VectorXd y0 = Eigen::LDLT<MatrixXd>(h).solve(-g);
    if (y0.allFinite() && y0.lpNorm<Eigen::Infinity>() < 1e5)
      y1.head(red.ny) = y0;
  }
  {
    double s0 = 1.0;
    if (bp1.lin_b.size() > 0) {
      VectorXd dl = bp1.lin_b - bp1.lin_w * y1;
      s0 = std::max(s0, 1.0 - dl.minCoeff());
    }
    for (const auto& qd : bp1.quads)
      s0 = std::max(s0, qd.value(y1, bp1.ny) + 1.0);
    y1[bp1.nz - 1] = s0;
  }
  const double margin = opts.interior_margin;
  try {
    y1 = follow_path(bp1, y1, opts, res.newton_steps,
                     [&](const VectorXd& y) { return y[bp1.nz - 1] < -margin; });
  } catch (const std::exception& e) {
    res.message = e.what();
    return res;
  }
  res.phase1_slack = y1[bp1.nz - 1];
  if (!(res.phase1_slack < 0.0)) {
    res.status = SolveStatus::kInfeasible;
    res.message = "infeasible (phase-I slack " +
                  std::to_string(res.phase1_slack) + ")";
    return res;
  }
  VectorXd yfeas = y1.head(red.ny);
  if (feasibility_only || (prog.q.size() == 0 && prog.c.size() == 0)) {
    res.status = SolveStatus::kOptimal;
    res.x = red.xp + red.n * yfeas;
    res.objective = prog.objective(res.x);
    return res;
  }

  // Phase II.
  BarrierProblem bp2 = build_barrier(prog, red, /*phase1=*/false);
  VectorXd y;
  try {
    y = follow_path(bp2, yfeas, opts, res.newton_steps, nullptr);
  } catch (const std::exception& e) {
    res.message = e.what();
    return res;
  }
  res.status = SolveStatus::kOptimal;
  res.x = red.xp + red.n * y;
  res.objective = prog.objective(res.x);
  return res;
}

}  // namespace

ConicResult solve_conic(const ConicProgram& prog, const ConicOptions& opts) {
  return solve_impl(prog, opts, false);
}

ConicResult solve_feasibility(const ConicProgram& prog,
                              const ConicOptions& opts) {
  return solve_impl(prog, opts, true);
}

}  // namespace dmpsc
