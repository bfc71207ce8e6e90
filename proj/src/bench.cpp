#include "dmpsc/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "dmpsc/conic.hpp"

namespace dmpsc {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  return n % 2 == 1 ? values[n / 2]
                    : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double stage_cost(const VectorXd& x_nbh, const VectorXd& u) {
  return 0.5 * x_nbh.squaredNorm() + u.squaredNorm();
}

VectorXd sample_disturbance(const Ellipsoid& set, std::mt19937& rng,
                            bool boundary) {
  const int n = set.dim();
  if (set.level <= 0.0) return VectorXd::Zero(n);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  VectorXd g(n);
  for (int k = 0; k < n; ++k) g[k] = gauss(rng);
  g /= g.norm();
  double r = boundary ? 1.0 : std::pow(unif(rng), 1.0 / n);
  Eigen::LLT<MatrixXd> llt(set.shape);
  return llt.matrixU().solve(g) * (r * std::sqrt(set.level));
}

VectorXd sample_disturbance_global(const NetworkModel& model,
                                   std::mt19937& rng, bool boundary) {
  VectorXd w(model.disturbance_dim());
  for (int i = 0; i < model.size(); ++i) {
    const auto& set = model.subsystem(i).disturbance_set;
    w.segment(model.disturbance_offset(i), set.dim()) =
        sample_disturbance(set, rng, boundary);
  }
  return w;
}

namespace {

// Underdamped pole placement for single-input double integrators, discrete
// LQR otherwise.  The surrogate must be plausible yet unsafe near tight
// bounds, so the placed poles keep a visible overshoot.
MatrixXd local_feedback_gain(const MatrixXd& a, const MatrixXd& b) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(b.cols());
  if (n == 2 && m == 1) {
    // poles 0.92 e^{+-0.18i}: lightly damped, overshoots a tight bound
    const double p1 = 2.0 * 0.92 * std::cos(0.18);
    const double p0 = 0.92 * 0.92;
    MatrixXd ctrb(2, 2);
    ctrb.col(0) = b;
    ctrb.col(1) = a * b;
    MatrixXd alpha = a * a - p1 * a + p0 * MatrixXd::Identity(2, 2);
    Eigen::RowVector2d e2(0.0, 1.0);
    return e2 * ctrb.inverse() * alpha;
  }
  MatrixXd p = MatrixXd::Identity(n, n);
  MatrixXd k;
  for (int it = 0; it < 500; ++it) {
    k = (MatrixXd::Identity(m, m) + b.transpose() * p * b)
            .ldlt()
            .solve(b.transpose() * p * a);
    p = MatrixXd::Identity(n, n) + a.transpose() * p * (a - b * k);
    p = 0.5 * (p + p.transpose());
  }
  return k;
}

struct MpcLayout {
  std::vector<int> z_base, v_base;
  int total = 0;
};

// N-step MPC with stage costs only: no terminal set, no terminal cost,
// original constraint sets.  Falls back to the unconstrained finite-horizon
// problem when infeasible.
VectorXd nominal_mpc_input(const NetworkModel& model, int horizon,
                           const VectorXd& x) {
  const int M = model.size();
  const int N = horizon;
  MpcLayout lay;
  lay.z_base.resize(M);
  lay.v_base.resize(M);
  for (int i = 0; i < M; ++i) {
    lay.z_base[i] = lay.total;
    lay.total += model.subsystem(i).state_dim * (N + 1);
    lay.v_base[i] = lay.total;
    lay.total += model.subsystem(i).input_dim * N;
  }
  auto zi = [&](int i, int k, int c) {
    return lay.z_base[i] + k * model.subsystem(i).state_dim + c;
  };
  auto vi = [&](int i, int k, int c) {
    return lay.v_base[i] + k * model.subsystem(i).input_dim + c;
  };

  ConicProgram prog;
  prog.nvar = lay.total;
  prog.init_objective();
  for (int i = 0; i < M; ++i) {
    const auto& spec = model.subsystem(i);
    const int ni = spec.state_dim;
    const int mi = spec.input_dim;
    for (int c = 0; c < ni; ++c) {
      LinearConstraint eq;
      eq.owner = i;
      eq.a.idx = {zi(i, 0, c)};
      eq.a.coef = VectorXd::Ones(1);
      eq.rhs = x[model.state_offset(i) + c];
      prog.eq.push_back(std::move(eq));
    }
    for (int k = 0; k < N; ++k)
      for (int r = 0; r < ni; ++r) {
        LinearConstraint eq;
        eq.owner = i;
        eq.a.idx.push_back(zi(i, k + 1, r));
        std::vector<double> coefs{1.0};
        for (int j : model.neighbors(i)) {
          const MatrixXd& aij = spec.coupling.at(j);
          for (int c = 0; c < aij.cols(); ++c) {
            eq.a.idx.push_back(zi(j, k, c));
            coefs.push_back(-aij(r, c));
          }
        }
        for (int t = 0; t < mi; ++t) {
          eq.a.idx.push_back(vi(i, k, t));
          coefs.push_back(-spec.input_matrix(r, t));
        }
        eq.a.coef = Eigen::Map<VectorXd>(coefs.data(), coefs.size());
        prog.eq.push_back(std::move(eq));
      }
    // stage costs: 0.5 |z_{N_i}(k)|^2 counts each z_j once per neighborhood
    for (int k = 0; k < N; ++k) {
      for (int j : model.neighbors(i)) {
        const int nj = model.subsystem(j).state_dim;
        for (int c = 0; c < nj; ++c) prog.q(zi(j, k, c), zi(j, k, c)) += 1.0;
      }
      for (int t = 0; t < mi; ++t) prog.q(vi(i, k, t), vi(i, k, t)) += 2.0;
    }
    for (int k = 0; k < N; ++k) {
      const auto& xp = spec.state_constraints;
      for (int r = 0; r < xp.size(); ++r) {
        LinearConstraint le;
        le.owner = i;
        int off = 0;
        for (int j : model.neighbors(i)) {
          const int nj = model.subsystem(j).state_dim;
          for (int c = 0; c < nj; ++c) le.a.idx.push_back(zi(j, k, c));
          off += nj;
        }
        le.a.coef = xp.rows.row(r).transpose();
        le.rhs = xp.offsets[r];
        prog.ineq.push_back(std::move(le));
      }
      const auto& up = spec.input_constraints;
      for (int r = 0; r < up.size(); ++r) {
        LinearConstraint le;
        le.owner = i;
        for (int t = 0; t < mi; ++t) le.a.idx.push_back(vi(i, k, t));
        le.a.coef = up.rows.row(r).transpose();
        le.rhs = up.offsets[r];
        prog.ineq.push_back(std::move(le));
      }
    }
  }

  ConicResult res = solve_conic(prog);
  if (res.status != SolveStatus::kOptimal) {
    ConicProgram lq = prog;
    lq.ineq.clear();
    res = solve_conic(lq);
  }
  VectorXd u = VectorXd::Zero(model.input_dim());
  if (res.status != SolveStatus::kOptimal) return u;
  for (int i = 0; i < M; ++i)
    for (int t = 0; t < model.subsystem(i).input_dim; ++t)
      u[model.input_offset(i) + t] = res.x[vi(i, 0, t)];
  return u;
}

// Robust baseline: certification constraint system with a performance
// objective (stage costs plus terminal penalty) and a free certified input.
CertResult rdmpc_step(const NetworkModel& model, const Artifacts& artifacts,
                      const CertSession& session, const VectorXd& x) {
  const auto t0 = std::chrono::steady_clock::now();
  const int N = session.horizon;
  CertLayout lay = make_cert_layout(model, N);
  CertRequest req{x, VectorXd::Zero(model.input_dim())};
  ConicProgram prog = build_program(model, artifacts, session, req, lay);
  prog.q.setZero();
  prog.c.setZero();
  prog.c0 = 0.0;
  for (int i = 0; i < model.size(); ++i) {
    const int ni = model.subsystem(i).state_dim;
    const int mi = model.subsystem(i).input_dim;
    for (int k = 0; k < N; ++k) {
      for (int j : model.neighbors(i)) {
        const int nj = model.subsystem(j).state_dim;
        for (int c = 0; c < nj; ++c) {
          int g = lay.z_index(j, k, c, model);
          prog.q(g, g) += 1.0;
        }
      }
      for (int t = 0; t < mi; ++t) {
        int g = lay.v_index(i, k, t, model);
        prog.q(g, g) += 2.0;
      }
    }
    const MatrixXd& pf = artifacts.terminal.shape_blocks[i];
    for (int r = 0; r < ni; ++r)
      for (int c = 0; c < ni; ++c)
        prog.q(lay.z_index(i, N, r, model), lay.z_index(i, N, c, model)) +=
            2.0 * pf(r, c);
  }

  CertResult out;
  ConicResult res = solve_conic(prog);
  if (res.status == SolveStatus::kOptimal) {
    out = unpack_result(model, lay, res.x);
    out.status = SolveStatus::kOptimal;
    out.objective = res.objective;
  } else {
    out.status = SolveStatus::kInfeasible;
    out.fallback = true;
    out.z = session.candidate_z;
    out.v = session.candidate_v;
    out.beta_tilde = session.beta;
    out.delta_beta = VectorXd::Zero(model.size());
    out.certified = VectorXd::Zero(model.input_dim());
    for (int i = 0; i < model.size(); ++i) {
      const int mi = model.subsystem(i).input_dim;
      VectorXd e = model.neighborhood_state(i, x) -
                   model.neighborhood_state(i, session.candidate_z.col(0));
      out.certified.segment(model.input_offset(i), mi) =
          session.candidate_v.block(model.input_offset(i), 0, mi, 1) +
          artifacts.tube.gains[i] * e;
    }
  }
  out.solve_ms = std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
  return out;
}

}  // namespace

Policy make_policy(const PolicySpec& spec, const NetworkModel& model,
                   const Artifacts& artifacts) {
  (void)artifacts;
  switch (spec.kind) {
    case PolicyKind::kZero:
      return [m = model.input_dim()](const VectorXd&, int) {
        return VectorXd::Zero(m);
      };
    case PolicyKind::kLinearFeedback: {
      std::vector<MatrixXd> gains;
      for (int i = 0; i < model.size(); ++i)
        gains.push_back(local_feedback_gain(
            model.subsystem(i).coupling.at(i),
            model.subsystem(i).input_matrix));
      return [&model, gains](const VectorXd& x, int) {
        VectorXd u = VectorXd::Zero(model.input_dim());
        for (int i = 0; i < model.size(); ++i)
          u.segment(model.input_offset(i), model.subsystem(i).input_dim) =
              -gains[i] * model.local_state(i, x);
        return u;
      };
    }
    case PolicyKind::kNominalDmpc:
      return [&model, n = spec.horizon](const VectorXd& x, int) {
        return nominal_mpc_input(model, n, x);
      };
  }
  throw std::invalid_argument("unknown policy kind");
}

SimTrace simulate(const NetworkModel& model, const Artifacts& artifacts,
                  const PolicySpec& policy, ControllerKind controller,
                  int steps, int horizon, unsigned seed, const VectorXd& x0) {
  Policy pol = make_policy(policy, model, artifacts);
  std::mt19937 rng(seed);
  SimTrace trace;
  VectorXd x = x0;

  CertSession session;
  const bool managed = controller != ControllerKind::kRaw;
  if (managed) session = init_session(model, artifacts, x0, horizon);

  std::vector<double> times;
  for (int t = 0; t < steps; ++t) {
    SimStep step;
    step.t = t;
    step.x = x;
    step.u_learn = pol(x, t);

    CertResult res;
    switch (controller) {
      case ControllerKind::kRaw:
        step.u_applied = step.u_learn;
        break;
      case ControllerKind::kCertified:
        res = certify(model, artifacts, session, {x, step.u_learn});
        step.u_applied = res.certified;
        break;
      case ControllerKind::kRdmpc:
        res = rdmpc_step(model, artifacts, session, x);
        step.u_applied = res.certified;
        break;
    }
    if (managed) {
      step.beta = session.beta;
      step.alpha = session.alpha;
      step.fallback = res.fallback;
      step.solve_ms = res.solve_ms;
      times.push_back(res.solve_ms);
    }

    step.w = sample_disturbance_global(model, rng);
    step.stage_costs = VectorXd::Zero(model.size());
    for (int i = 0; i < model.size(); ++i) {
      VectorXd ui = step.u_applied.segment(model.input_offset(i),
                                           model.subsystem(i).input_dim);
      step.stage_costs[i] =
          stage_cost(model.neighborhood_state(i, x), ui);
      if (!model.subsystem(i).state_constraints.contains(
              model.neighborhood_state(i, x), 1e-9))
        ++trace.state_violations;
      if (!model.subsystem(i).input_constraints.contains(ui, 1e-9))
        ++trace.input_violations;
    }
    trace.total_cost += step.stage_costs.sum();

    x = step_truth(model, x, step.u_applied, step.w);
    if (managed) advance_session(model, artifacts, session, x, res);
    trace.steps.push_back(std::move(step));
  }
  trace.median_solve_ms = median(times);
  return trace;
}

VectorXd sample_initial_state(const NetworkModel& model,
                              const Artifacts& artifacts, int horizon,
                              std::mt19937& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    VectorXd x = VectorXd::Zero(model.state_dim());
    for (int i = 0; i < model.size(); ++i) {
      // bounds of the leading (position) coordinate from the own box rows
      const auto& poly = model.subsystem(i).state_constraints;
      const int own = model.neighborhood_offset(i, i);
      double lo = -1.0, hi = 1.0;
      for (int r = 0; r < poly.size(); ++r) {
        VectorXd row = poly.rows.row(r).transpose();
        if (row.cwiseAbs().sum() > std::abs(row[own]) + 1e-12) continue;
        if (row[own] > 0.0)
          hi = std::min(hi, poly.offsets[r] / row[own]);
        else if (row[own] < 0.0)
          lo = std::max(lo, poly.offsets[r] / row[own]);
      }
      x[model.state_offset(i)] = 0.6 * (lo + unif(rng) * (hi - lo));
    }
    try {
      init_session(model, artifacts, x, horizon);
      return x;
    } catch (const std::runtime_error&) {
    }
  }
  throw std::runtime_error("no feasible initial state found");
}

CompareSummary compare_controllers(const NetworkModel& model,
                                   const Artifacts& artifacts, int steps,
                                   int runs, int horizon, unsigned seed) {
  CompareSummary sum;
  for (int run = 0; run < runs; ++run) {
    std::mt19937 rng(seed + 1000u * run);
    VectorXd x0 = sample_initial_state(model, artifacts, horizon, rng);
    unsigned wseed = seed + static_cast<unsigned>(run);
    SimTrace t1 = simulate(model, artifacts,
                           {PolicyKind::kLinearFeedback, horizon},
                           ControllerKind::kCertified, steps, horizon, wseed,
                           x0);
    SimTrace t2 = simulate(model, artifacts,
                           {PolicyKind::kNominalDmpc, horizon},
                           ControllerKind::kCertified, steps, horizon, wseed,
                           x0);
    SimTrace t3 = simulate(model, artifacts, {PolicyKind::kZero, horizon},
                           ControllerKind::kRdmpc, steps, horizon, wseed, x0);
    sum.cost_dmpsc1.push_back(t1.total_cost);
    sum.cost_dmpsc2.push_back(t2.total_cost);
    sum.cost_rdmpc.push_back(t3.total_cost);
    sum.ms_dmpsc1.push_back(t1.median_solve_ms);
    sum.ms_dmpsc2.push_back(t2.median_solve_ms);
    sum.ms_rdmpc.push_back(t3.median_solve_ms);
    sum.violations_dmpsc1 += t1.state_violations + t1.input_violations;
    sum.violations_dmpsc2 += t2.state_violations + t2.input_violations;
    sum.violations_rdmpc += t3.state_violations + t3.input_violations;
  }
  return sum;
}

namespace {

void join(std::ofstream& out, const VectorXd& v, int width) {
  for (int k = 0; k < width; ++k) {
    out << ",";
    if (k < v.size()) out << v[k];
  }
}

json quartiles(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  auto at = [&](double q) {
    if (v.empty()) return 0.0;
    double pos = q * (v.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - lo) * (v[hi] - v[lo]);
  };
  return {{"q1", at(0.25)}, {"median", at(0.5)}, {"q3", at(0.75)}};
}

}  // namespace

void write_trace_csv(const SimTrace& trace, const NetworkModel& model,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  int nx = 0, nu = 0, nw = 0;
  for (int i = 0; i < model.size(); ++i) {
    nx = std::max(nx, model.subsystem(i).state_dim);
    nu = std::max(nu, model.subsystem(i).input_dim);
    nw = std::max(nw, model.subsystem(i).disturbance_dim);
  }
  out << "t,subsystem";
  for (int k = 0; k < nx; ++k) out << ",x" << k;
  for (int k = 0; k < nu; ++k) out << ",u_L" << k;
  for (int k = 0; k < nu; ++k) out << ",u_cert" << k;
  for (int k = 0; k < nw; ++k) out << ",w" << k;
  out << ",beta,alpha,status,stage_cost,solve_ms\n";
  for (const auto& s : trace.steps)
    for (int i = 0; i < model.size(); ++i) {
      out << s.t << "," << i;
      join(out, s.x.segment(model.state_offset(i),
                            model.subsystem(i).state_dim), nx);
      join(out, s.u_learn.segment(model.input_offset(i),
                                  model.subsystem(i).input_dim), nu);
      join(out, s.u_applied.segment(model.input_offset(i),
                                    model.subsystem(i).input_dim), nu);
      join(out, s.w.segment(model.disturbance_offset(i),
                            model.subsystem(i).disturbance_dim), nw);
      out << ",";
      if (s.beta.size() > i) out << s.beta[i];
      out << ",";
      if (s.alpha.size() > i) out << s.alpha[i];
      out << "," << (s.fallback ? "fallback" : "feasible") << ","
          << s.stage_costs[i] << "," << s.solve_ms << "\n";
    }
}

void write_summary_json(const CompareSummary& s, const std::string& path) {
  json doc;
  doc["dmpsc1"] = {{"costs", s.cost_dmpsc1},
                   {"cost_quartiles", quartiles(s.cost_dmpsc1)},
                   {"median_solve_ms", median(s.ms_dmpsc1)},
                   {"violations", s.violations_dmpsc1}};
  doc["dmpsc2"] = {{"costs", s.cost_dmpsc2},
                   {"cost_quartiles", quartiles(s.cost_dmpsc2)},
                   {"median_solve_ms", median(s.ms_dmpsc2)},
                   {"violations", s.violations_dmpsc2}};
  doc["rdmpc"] = {{"costs", s.cost_rdmpc},
                  {"cost_quartiles", quartiles(s.cost_rdmpc)},
                  {"median_solve_ms", median(s.ms_rdmpc)},
                  {"violations", s.violations_rdmpc}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << doc.dump(2) << "\n";
}

}  // namespace dmpsc
