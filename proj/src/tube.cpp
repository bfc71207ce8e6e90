#include "dmpsc/tube.hpp"

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

#include "dmpsc/sdp.hpp"

namespace dmpsc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kStrictMargin = 1e-9;
// Supports are capped a little inside the constraint offsets so the
// tightened sets keep a nonempty interior.
constexpr double kContainment = 0.99;

int vech_count(int n) { return n * (n + 1) / 2; }

// Index of entry (r, c), r >= c, in column-major lower-triangle storage.
int vech_index(int n, int r, int c) {
  if (r < c) std::swap(r, c);
  return c * n - c * (c - 1) / 2 + (r - c);
}

MatrixXd sym_basis(int n, int r, int c) {
  MatrixXd s = MatrixXd::Zero(n, n);
  s(r, c) = 1.0;
  s(c, r) = 1.0;
  return s;
}

struct VarMap {
  std::vector<int> e_base, k_base, tau, eta_base, theta_base;
  int total = 0;
};

VarMap make_varmap(const NetworkModel& model) {
  VarMap vm;
  const int M = model.size();
  vm.e_base.resize(M);
  vm.k_base.resize(M);
  vm.tau.resize(M);
  vm.eta_base.resize(M);
  vm.theta_base.resize(M);
  int idx = 0;
  for (int i = 0; i < M; ++i) {
    const auto& s = model.subsystem(i);
    vm.e_base[i] = idx;
    idx += vech_count(s.state_dim);
    vm.k_base[i] = idx;
    idx += s.input_dim * model.neighborhood_dim(i);
    vm.tau[i] = idx++;
    vm.eta_base[i] = idx;
    idx += s.state_constraints.size();
    vm.theta_base[i] = idx;
    idx += s.input_constraints.size();
  }
  vm.total = idx;
  return vm;
}

struct BlockBuilder {
  int dim;
  MatrixXd f0;
  std::map<int, MatrixXd> terms;

  explicit BlockBuilder(int d) : dim(d), f0(MatrixXd::Zero(d, d)) {}
  MatrixXd& at(int v) {
    auto it = terms.find(v);
    if (it == terms.end())
      it = terms.emplace(v, MatrixXd::Zero(dim, dim)).first;
    return it->second;
  }
  void flush(SdpProblem& p, std::string tag) {
    SdpBlock& b = p.add_block(dim, std::move(tag));
    b.f0 = f0;
    for (auto& [v, m] : terms) {
      b.var.push_back(v);
      b.coeff.push_back(std::move(m));
    }
  }
};

SdpProblem build_tube_sdp(const NetworkModel& model, double tau_bar,
                          const VarMap& vm) {
  const int M = model.size();
  SdpProblem prob;
  prob.nvar = vm.total;
  prob.cost = VectorXd::Zero(vm.total);

  // Coupling cancellation equalities A_ij E_j + B_i K_i[:, j-cols] = 0.
  int neq = 0;
  for (int i = 0; i < M; ++i)
    for (int j : model.neighbors(i))
      if (j != i)
        neq += model.subsystem(i).state_dim * model.subsystem(j).state_dim;
  prob.eq_a = MatrixXd::Zero(neq, vm.total);
  prob.eq_b = VectorXd::Zero(neq);
  int row = 0;
  for (int i = 0; i < M; ++i) {
    const auto& si = model.subsystem(i);
    for (int j : model.neighbors(i)) {
      if (j == i) continue;
      const int nj = model.subsystem(j).state_dim;
      const MatrixXd& aij = si.coupling.at(j);
      const int off = model.neighborhood_offset(i, j);
      const int nbh = model.neighborhood_dim(i);
      for (int r = 0; r < si.state_dim; ++r)
        for (int c = 0; c < nj; ++c) {
          for (int s = 0; s < nj; ++s)
            prob.eq_a(row, vm.e_base[j] + vech_index(nj, s, c)) +=
                aij(r, s);
          for (int t = 0; t < si.input_dim; ++t)
            prob.eq_a(row, vm.k_base[i] + t * nbh + off + c) +=
                si.input_matrix(r, t);
          ++row;
        }
    }
  }

  for (int i = 0; i < M; ++i) {
    const auto& si = model.subsystem(i);
    const int n = si.state_dim, m = si.input_dim, p = si.disturbance_dim;
    const int nbh = model.neighborhood_dim(i);
    const int own = model.neighborhood_offset(i, i);
    const MatrixXd& aii = si.coupling.at(i);

    // Invariance certificate block for subsystem i.
    BlockBuilder lmi(n + p + n);
    const int z0 = n + p;
    lmi.f0.block(z0, n, n, p) = si.disturbance_matrix;
    lmi.f0.block(n, z0, p, n) = si.disturbance_matrix.transpose();
    lmi.f0.diagonal().array() -= kStrictMargin;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c <= r; ++c) {
        MatrixXd s = sym_basis(n, r, c);
        MatrixXd& cm = lmi.at(vm.e_base[i] + vech_index(n, r, c));
        cm.block(0, 0, n, n) += tau_bar * s;
        cm.block(z0, z0, n, n) += s;
        MatrixXd as = aii * s;
        cm.block(z0, 0, n, n) += as;
        cm.block(0, z0, n, n) += as.transpose();
      }
    for (int t = 0; t < m; ++t)
      for (int c = 0; c < n; ++c) {
        MatrixXd& cm = lmi.at(vm.k_base[i] + t * nbh + own + c);
        MatrixXd bk = si.input_matrix.col(t) * MatrixXd::Identity(n, n).row(c);
        cm.block(z0, 0, n, n) += bk;
        cm.block(0, z0, n, n) += bk.transpose();
      }
    if (p > 0) lmi.at(vm.tau[i]).block(n, n, p, p) += si.disturbance_set.shape;
    lmi.flush(prob, "rpi_" + std::to_string(i));

    // Multiplier budget and nonnegativity.
    prob.add_scalar({vm.tau[i]},
                    -VectorXd::Constant(1, si.disturbance_set.level),
                    -(tau_bar - 1.0) / M, "budget_" + std::to_string(i));
    prob.add_scalar({vm.tau[i]}, VectorXd::Ones(1), 0.0,
                    "taupos_" + std::to_string(i));

    // State-row support blocks over the neighborhood.
    for (int rj = 0; rj < si.state_constraints.size(); ++rj) {
      BlockBuilder blk(1 + nbh);
      blk.at(vm.eta_base[i] + rj)(0, 0) = 1.0;
      int off = 0;
      for (int j : model.neighbors(i)) {
        const int nj = model.subsystem(j).state_dim;
        VectorXd cseg =
            si.state_constraints.rows.row(rj).segment(off, nj).transpose();
        for (int r = 0; r < nj; ++r)
          for (int c = 0; c <= r; ++c) {
            MatrixXd s = sym_basis(nj, r, c);
            MatrixXd& cm = blk.at(vm.e_base[j] + vech_index(nj, r, c));
            cm.block(1 + off, 1 + off, nj, nj) += s;
            Eigen::RowVectorXd cs = cseg.transpose() * s;
            cm.block(0, 1 + off, 1, nj) += cs;
            cm.block(1 + off, 0, nj, 1) += cs.transpose();
          }
        off += nj;
      }
      prob.cost[vm.eta_base[i] + rj] = 1.0;
      double cap = kContainment * si.state_constraints.offsets[rj];
      prob.add_scalar({vm.eta_base[i] + rj}, -VectorXd::Ones(1), cap * cap,
                      "xcap_" + std::to_string(i) + "_" + std::to_string(rj));
      blk.flush(prob, "xrow_" + std::to_string(i) + "_" + std::to_string(rj));
    }

    // Input-row support blocks.
    for (int rj = 0; rj < si.input_constraints.size(); ++rj) {
      BlockBuilder blk(1 + nbh);
      blk.at(vm.theta_base[i] + rj)(0, 0) = 1.0;
      for (int t = 0; t < m; ++t) {
        double ot = si.input_constraints.rows(rj, t);
        if (ot == 0.0) continue;
        for (int c = 0; c < nbh; ++c) {
          MatrixXd& cm = blk.at(vm.k_base[i] + t * nbh + c);
          cm(0, 1 + c) += ot;
          cm(1 + c, 0) += ot;
        }
      }
      int off = 0;
      for (int j : model.neighbors(i)) {
        const int nj = model.subsystem(j).state_dim;
        for (int r = 0; r < nj; ++r)
          for (int c = 0; c <= r; ++c)
            blk.at(vm.e_base[j] + vech_index(nj, r, c))
                .block(1 + off, 1 + off, nj, nj) += sym_basis(nj, r, c);
        off += nj;
      }
      prob.cost[vm.theta_base[i] + rj] = 1.0;
      double cap = kContainment * si.input_constraints.offsets[rj];
      prob.add_scalar({vm.theta_base[i] + rj}, -VectorXd::Ones(1), cap * cap,
                      "ucap_" + std::to_string(i) + "_" + std::to_string(rj));
      blk.flush(prob, "urow_" + std::to_string(i) + "_" + std::to_string(rj));
    }
  }
  return prob;
}

struct TubeAttempt {
  bool feasible = false;
  double objective = 0.0;
  double slack = 0.0;
  VectorXd x;
};

TubeAttempt try_tau(const NetworkModel& model, double tau_bar,
                    const VarMap& vm) {
  SdpProblem prob = build_tube_sdp(model, tau_bar, vm);
  SdpOptions opts;
  opts.gap_tol = 1e-8;
  SdpResult res = solve_sdp(prob, opts);
  TubeAttempt out;
  out.feasible = res.feasible;
  out.objective = res.objective;
  out.slack = res.phase1_slack;
  out.x = res.x;
  return out;
}

StructuredTube extract_tube(const NetworkModel& model, const VarMap& vm,
                            const VectorXd& x, double tau_bar,
                            double objective) {
  const int M = model.size();
  StructuredTube tube;
  tube.coupling_multiplier = tau_bar;
  tube.objective = objective;
  tube.multipliers = VectorXd::Zero(M);
  tube.shape_blocks.resize(M);
  tube.inverse_blocks.resize(M);
  tube.gains.resize(M);
  for (int i = 0; i < M; ++i) {
    const auto& si = model.subsystem(i);
    const int n = si.state_dim;
    MatrixXd e(n, n);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c <= r; ++c)
        e(r, c) = e(c, r) = x[vm.e_base[i] + vech_index(n, r, c)];
    tube.inverse_blocks[i] = e;
    tube.shape_blocks[i] = e.llt().solve(MatrixXd::Identity(n, n));
    tube.multipliers[i] = x[vm.tau[i]];
    const int nbh = model.neighborhood_dim(i);
    MatrixXd k(si.input_dim, nbh);
    for (int t = 0; t < si.input_dim; ++t)
      for (int c = 0; c < nbh; ++c) k(t, c) = x[vm.k_base[i] + t * nbh + c];
    tube.gains[i] = k;
  }
  // Convert K_i = K_{Omega,i} E_{N_i} back to the feedback gain.
  for (int i = 0; i < M; ++i) {
    int off = 0;
    for (int j : model.neighbors(i)) {
      const int nj = model.subsystem(j).state_dim;
      tube.gains[i].middleCols(off, nj) =
          tube.gains[i].middleCols(off, nj) * tube.shape_blocks[j];
      off += nj;
    }
  }
  tube.global_shape = MatrixXd::Zero(model.state_dim(), model.state_dim());
  tube.global_gain = MatrixXd::Zero(model.input_dim(), model.state_dim());
  for (int i = 0; i < M; ++i) {
    const auto& si = model.subsystem(i);
    tube.global_shape.block(model.state_offset(i), model.state_offset(i),
                            si.state_dim, si.state_dim) =
        tube.shape_blocks[i];
    tube.global_gain.middleRows(model.input_offset(i), si.input_dim) =
        tube.gains[i] * model.neighborhood_selector(i);
  }
  return tube;
}

}  // namespace

StructuredTube synthesize_tube(const NetworkModel& model,
                               std::optional<double> tau_fixed) {
  VarMap vm = make_varmap(model);
  double best_tau = 0.0, best_obj = 0.0, best_slack = 1e300;
  TubeAttempt best;

  if (tau_fixed) {
    if (!(*tau_fixed > 0.0 && *tau_fixed < 1.0))
      throw std::invalid_argument("coupling multiplier must lie in (0, 1)");
    best = try_tau(model, *tau_fixed, vm);
    best_tau = *tau_fixed;
    best_slack = best.slack;
  } else {
    std::vector<double> grid = {0.02, 0.055, 0.1, 0.2, 0.35, 0.5, 0.7, 0.9};
    std::map<double, TubeAttempt> tried;
    for (double tau : grid) {
      TubeAttempt a = try_tau(model, tau, vm);
      best_slack = std::min(best_slack, a.slack);
      if (a.feasible && (!best.feasible || a.objective < best.objective)) {
        best = a;
        best_tau = tau;
      }
      tried[tau] = std::move(a);
    }
    if (best.feasible) {
      // Golden-section refinement between the grid neighbors of the best.
      size_t k = 0;
      while (grid[k] != best_tau) ++k;
      double lo = (k == 0) ? best_tau * 0.5 : grid[k - 1];
      double hi = (k + 1 == grid.size()) ? std::min(0.99, best_tau * 1.5)
                                         : grid[k + 1];
      const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
      for (int it = 0; it < 6; ++it) {
        double a = hi - phi * (hi - lo);
        double b = lo + phi * (hi - lo);
        TubeAttempt ra = try_tau(model, a, vm);
        TubeAttempt rb = try_tau(model, b, vm);
        double fa = ra.feasible ? ra.objective : 1e300;
        double fb = rb.feasible ? rb.objective : 1e300;
        if (fa < fb) {
          hi = b;
          if (ra.feasible && ra.objective < best.objective) {
            best = std::move(ra);
            best_tau = a;
          }
        } else {
          lo = a;
          if (rb.feasible && rb.objective < best.objective) {
            best = std::move(rb);
            best_tau = b;
          }
        }
      }
    }
  }
  if (!best.feasible)
    throw std::runtime_error(
        "tube synthesis infeasible (best phase-I slack " +
        std::to_string(best_slack) + ")");
  best_obj = best.objective;
  return extract_tube(model, vm, best.x, best_tau, best_obj);
}

int verify_rpi_monte_carlo(const StructuredTube& tube,
                           const NetworkModel& model, int samples,
                           unsigned seed) {
  const int n = model.state_dim();
  const MatrixXd& p = tube.global_shape;
  MatrixXd acl = model.global_a() + model.global_b() * tube.global_gain;
  Eigen::LLT<MatrixXd> llt(p);

  std::mt19937 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  auto ball = [&](int d) {
    VectorXd u(d);
    for (int k = 0; k < d; ++k) u[k] = gauss(rng);
    double nrm = u.norm();
    if (nrm == 0.0) return VectorXd::Zero(d).eval();
    return (u / nrm * std::pow(unif(rng), 1.0 / d)).eval();
  };

  std::vector<MatrixXd> wfac(model.size());
  for (int i = 0; i < model.size(); ++i) {
    const auto& ws = model.subsystem(i).disturbance_set;
    if (ws.dim() > 0)
      wfac[i] = Eigen::LLT<MatrixXd>(ws.shape)
                    .matrixU()
                    .solve(MatrixXd::Identity(ws.dim(), ws.dim())) *
                std::sqrt(std::max(0.0, ws.level));
  }

  int violations = 0;
  VectorXd w(model.disturbance_dim());
  for (int s = 0; s < samples; ++s) {
    VectorXd e = llt.matrixU().solve(ball(n));
    for (int i = 0; i < model.size(); ++i) {
      const int d = model.subsystem(i).disturbance_dim;
      if (d > 0)
        w.segment(model.disturbance_offset(i), d) = wfac[i] * ball(d);
    }
    VectorXd enext = acl * e + model.global_g() * w;
    if (enext.dot(p * enext) > 1.0 + kMembershipSlack) ++violations;
  }
  return violations;
}

std::vector<MatrixXd> project_to_conte_form(const StructuredTube& tube,
                                            const NetworkModel& model) {
  std::vector<MatrixXd> out(model.size());
  for (int i = 0; i < model.size(); ++i) {
    const int nbh = model.neighborhood_dim(i);
    out[i] = MatrixXd::Zero(nbh, nbh);
    const int off = model.neighborhood_offset(i, i);
    const int n = model.subsystem(i).state_dim;
    out[i].block(off, off, n, n) = tube.shape_blocks[i];
  }
  return out;
}

TightenedConstraints tighten_constraints(const NetworkModel& model,
                                         const StructuredTube& tube) {
  const int n = model.state_dim();
  MatrixXd pinv = tube.global_shape.llt().solve(MatrixXd::Identity(n, n));
  TightenedConstraints out;
  out.state.resize(model.size());
  out.input.resize(model.size());
  for (int i = 0; i < model.size(); ++i) {
    const auto& si = model.subsystem(i);
    MatrixXd w = model.neighborhood_selector(i);
    Polytope xs = si.state_constraints;
    for (int r = 0; r < xs.size(); ++r) {
      VectorXd lifted = (xs.rows.row(r) * w).transpose();
      xs.offsets[r] -= std::sqrt(lifted.dot(pinv * lifted));
      if (xs.offsets[r] <= 0.0)
        throw std::runtime_error("empty tightened set: state row " +
                                 std::to_string(r) + " of subsystem " +
                                 std::to_string(i));
    }
    out.state[i] = std::move(xs);

    MatrixXd krows =
        tube.global_gain.middleRows(model.input_offset(i), si.input_dim);
    Polytope us = si.input_constraints;
    for (int r = 0; r < us.size(); ++r) {
      VectorXd lifted = (us.rows.row(r) * krows).transpose();
      us.offsets[r] -= std::sqrt(lifted.dot(pinv * lifted));
      if (us.offsets[r] <= 0.0)
        throw std::runtime_error("empty tightened set: input row " +
                                 std::to_string(r) + " of subsystem " +
                                 std::to_string(i));
    }
    out.input[i] = std::move(us);
  }
  return out;
}

}  // namespace dmpsc
