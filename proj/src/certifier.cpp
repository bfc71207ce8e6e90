#include "dmpsc/certifier.hpp"

#include <chrono>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace dmpsc {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

Artifacts design_artifacts(const NetworkModel& model,
                           std::optional<double> tau) {
  Artifacts a;
  a.tube = synthesize_tube(model, tau);
  a.tightened = tighten_constraints(model, a.tube);
  a.terminal = synthesize_terminal(model, a.tightened);
  a.nbh_shapes = project_to_conte_form(a.tube, model);
  return a;
}

CertLayout make_cert_layout(const NetworkModel& model, int horizon) {
  if (horizon < 1) throw std::invalid_argument("horizon must be positive");
  CertLayout lay;
  lay.horizon = horizon;
  const int M = model.size();
  lay.z_base.resize(M);
  lay.v_base.resize(M);
  lay.u_base.resize(M);
  lay.beta_idx.resize(M);
  lay.dbeta_idx.resize(M);
  int idx = 0;
  for (int i = 0; i < M; ++i) {
    const int ni = model.subsystem(i).state_dim;
    const int mi = model.subsystem(i).input_dim;
    lay.z_base[i] = idx;
    idx += ni * (horizon + 1);
    lay.v_base[i] = idx;
    idx += mi * horizon;
    lay.u_base[i] = idx;
    idx += mi;
    lay.beta_idx[i] = idx++;
    lay.dbeta_idx[i] = idx++;
  }
  lay.total = idx;
  return lay;
}

namespace {

// indices of z_{N_i}(k) in layout order
std::vector<int> nbh_z_indices(const NetworkModel& model,
                               const CertLayout& lay, int i, int k) {
  std::vector<int> idx;
  idx.reserve(model.neighborhood_dim(i));
  for (int j : model.neighbors(i)) {
    const int nj = model.subsystem(j).state_dim;
    for (int c = 0; c < nj; ++c) idx.push_back(lay.z_index(j, k, c, model));
  }
  return idx;
}

void fill_result_from_x(const NetworkModel& model, const CertLayout& lay,
                        const VectorXd& x, CertResult& out) {
  const int N = lay.horizon;
  out.z = MatrixXd::Zero(model.state_dim(), N + 1);
  out.v = MatrixXd::Zero(model.input_dim(), N);
  out.certified = VectorXd::Zero(model.input_dim());
  out.beta_tilde = VectorXd::Zero(model.size());
  out.delta_beta = VectorXd::Zero(model.size());
  for (int i = 0; i < model.size(); ++i) {
    const int ni = model.subsystem(i).state_dim;
    const int mi = model.subsystem(i).input_dim;
    for (int k = 0; k <= N; ++k)
      out.z.block(model.state_offset(i), k, ni, 1) =
          x.segment(lay.z_base[i] + k * ni, ni);
    for (int k = 0; k < N; ++k)
      out.v.block(model.input_offset(i), k, mi, 1) =
          x.segment(lay.v_base[i] + k * mi, mi);
    out.certified.segment(model.input_offset(i), mi) =
        x.segment(lay.u_base[i], mi);
    out.beta_tilde[i] = x[lay.beta_idx[i]];
    out.delta_beta[i] = x[lay.dbeta_idx[i]];
  }
}

}  // namespace

CertResult unpack_result(const NetworkModel& model, const CertLayout& layout,
                         const VectorXd& x) {
  CertResult out;
  fill_result_from_x(model, layout, x, out);
  return out;
}

ConicProgram build_program(const NetworkModel& model,
                           const Artifacts& artifacts,
                           const CertSession& session,
                           const CertRequest& request,
                           const CertLayout& lay) {
  const int M = model.size();
  const int N = lay.horizon;
  if (artifacts.nbh_shapes.size() != static_cast<size_t>(M) ||
      artifacts.tightened.state.size() != static_cast<size_t>(M))
    throw std::invalid_argument("artifacts do not match the model");
  if (session.beta.size() != M || session.alpha.size() != M)
    throw std::invalid_argument("session budgets do not match the model");
  if (request.state.size() != model.state_dim() ||
      request.proposed.size() != model.input_dim())
    throw std::invalid_argument("request dimensions do not match the model");

  ConicProgram prog;
  prog.nvar = lay.total;
  prog.init_objective();

  for (int i = 0; i < M; ++i) {
    const int ni = model.subsystem(i).state_dim;
    const int mi = model.subsystem(i).input_dim;
    const int nbh = model.neighborhood_dim(i);
    const auto& spec = model.subsystem(i);

    // objective |u_L_i - u_i|^2
    VectorXd ul = request.proposed.segment(model.input_offset(i), mi);
    for (int t = 0; t < mi; ++t) {
      prog.q(lay.u_base[i] + t, lay.u_base[i] + t) = 2.0;
      prog.c[lay.u_base[i] + t] = -2.0 * ul[t];
    }
    prog.c0 += ul.squaredNorm();

    // nominal dynamics z_i(k+1) = A_{N_i} z_{N_i}(k) + B_i v_i(k)
    for (int k = 0; k < N; ++k)
      for (int r = 0; r < ni; ++r) {
        LinearConstraint eq;
        eq.owner = i;
        eq.tag = "dyn_" + std::to_string(i) + "_" + std::to_string(k);
        eq.a.idx.push_back(lay.z_index(i, k + 1, r, model));
        std::vector<double> coefs{1.0};
        for (int j : model.neighbors(i)) {
          const MatrixXd& aij = spec.coupling.at(j);
          for (int c = 0; c < aij.cols(); ++c) {
            eq.a.idx.push_back(lay.z_index(j, k, c, model));
            coefs.push_back(-aij(r, c));
          }
        }
        for (int t = 0; t < mi; ++t) {
          eq.a.idx.push_back(lay.v_index(i, k, t, model));
          coefs.push_back(-spec.input_matrix(r, t));
        }
        eq.a.coef = Eigen::Map<VectorXd>(coefs.data(), coefs.size());
        prog.eq.push_back(std::move(eq));
      }

    // budget link and trade rows
    {
      LinearConstraint eq;
      eq.owner = i;
      eq.tag = "blink_" + std::to_string(i);
      eq.a.idx = {lay.beta_idx[i], lay.dbeta_idx[i]};
      eq.a.coef = VectorXd(2);
      eq.a.coef << 1.0, -1.0;
      eq.rhs = session.beta[i];
      prog.eq.push_back(std::move(eq));
    }
    if (model.neighbors(i).size() > 1) {
      LinearConstraint eq;
      eq.owner = i;
      eq.tag = "negot_" + std::to_string(i);
      for (int j : model.neighbors(i)) {
        if (j == i) continue;
        eq.a.idx.push_back(lay.dbeta_idx[j]);
      }
      eq.a.coef = VectorXd(eq.a.idx.size());
      int c = 0;
      for (int j : model.neighbors(i)) {
        if (j == i) continue;
        eq.a.coef[c++] =
            1.0 / (static_cast<double>(model.neighbors(j).size()) - 1.0);
      }
      prog.eq.push_back(std::move(eq));
    }
    if (model.neighbors(i).size() == 1) {
      // this trade variable appears in no row; pin it so budgets balance
      LinearConstraint eq;
      eq.owner = i;
      eq.tag = "pin_" + std::to_string(i);
      eq.a.idx = {lay.dbeta_idx[i]};
      eq.a.coef = VectorXd::Ones(1);
      prog.eq.push_back(std::move(eq));
    }

    // certified input u_i = v_i(0) + K_i (x_{N_i} - z_{N_i}(0))
    VectorXd xn = model.neighborhood_state(i, request.state);
    const MatrixXd& kw = artifacts.tube.gains[i];
    VectorXd kx = kw * xn;
    std::vector<int> z0 = nbh_z_indices(model, lay, i, 0);
    for (int t = 0; t < mi; ++t) {
      LinearConstraint eq;
      eq.owner = i;
      eq.tag = "udef_" + std::to_string(i) + "_" + std::to_string(t);
      eq.a.idx.push_back(lay.u_base[i] + t);
      eq.a.idx.push_back(lay.v_index(i, 0, t, model));
      std::vector<double> coefs{1.0, -1.0};
      for (int c = 0; c < nbh; ++c) {
        eq.a.idx.push_back(z0[c]);
        coefs.push_back(kw(t, c));
      }
      eq.a.coef = Eigen::Map<VectorXd>(coefs.data(), coefs.size());
      eq.rhs = kx[t];
      prog.eq.push_back(std::move(eq));
    }

    // beta_tilde >= 0
    {
      LinearConstraint le;
      le.owner = i;
      le.tag = "bpos_" + std::to_string(i);
      le.a.idx = {lay.beta_idx[i]};
      le.a.coef = -VectorXd::Ones(1);
      prog.ineq.push_back(std::move(le));
    }

    // tightened state and input rows along the horizon
    const Polytope& xp = artifacts.tightened.state[i];
    for (int k = 0; k < N; ++k) {
      std::vector<int> zk = nbh_z_indices(model, lay, i, k);
      for (int r = 0; r < xp.size(); ++r) {
        LinearConstraint le;
        le.owner = i;
        le.tag = "xrow_" + std::to_string(i) + "_" + std::to_string(k) + "_" +
                 std::to_string(r);
        le.a.idx = zk;
        le.a.coef = xp.rows.row(r).transpose();
        le.rhs = xp.offsets[r];
        prog.ineq.push_back(std::move(le));
      }
      const Polytope& up = artifacts.tightened.input[i];
      for (int r = 0; r < up.size(); ++r) {
        LinearConstraint le;
        le.owner = i;
        le.tag = "urow_" + std::to_string(i) + "_" + std::to_string(k) + "_" +
                 std::to_string(r);
        for (int t = 0; t < mi; ++t)
          le.a.idx.push_back(lay.v_index(i, k, t, model));
        le.a.coef = up.rows.row(r).transpose();
        le.rhs = up.offsets[r];
        prog.ineq.push_back(std::move(le));
      }
    }

    // initial tube membership (x_{N_i} - z_{N_i}(0))' P_{N_i} (...) <= beta
    {
      QuadraticConstraint qc;
      qc.owner = i;
      qc.tag = "tube0_" + std::to_string(i);
      qc.idx = z0;
      qc.idx.push_back(lay.beta_idx[i]);
      const MatrixXd& pn = artifacts.nbh_shapes[i];
      qc.shape = MatrixXd::Zero(nbh + 1, nbh + 1);
      qc.shape.topLeftCorner(nbh, nbh) = pn;
      qc.lin = VectorXd::Zero(nbh + 1);
      qc.lin.head(nbh) = -2.0 * pn * xn;
      qc.lin[nbh] = -1.0;
      qc.rhs = -xn.dot(pn * xn);
      prog.qineq.push_back(std::move(qc));
    }

    // terminal level set on z_i(N)
    {
      QuadraticConstraint qc;
      qc.owner = i;
      qc.tag = "term_" + std::to_string(i);
      for (int c = 0; c < ni; ++c)
        qc.idx.push_back(lay.z_index(i, N, c, model));
      qc.shape = artifacts.terminal.shape_blocks[i];
      qc.lin = VectorXd::Zero(ni);
      qc.rhs = session.alpha[i];
      prog.qineq.push_back(std::move(qc));
    }
  }
  return prog;
}

CertResult certify(const NetworkModel& model, const Artifacts& artifacts,
                   const CertSession& session, const CertRequest& request) {
  const auto t0 = std::chrono::steady_clock::now();
  CertLayout lay = make_cert_layout(model, session.horizon);
  ConicProgram prog = build_program(model, artifacts, session, request, lay);

  CertResult out;
  // fast path: if the proposed input is itself admissible, return it exactly
  {
    ConicProgram pinned = prog;
    for (int i = 0; i < model.size(); ++i) {
      const int mi = model.subsystem(i).input_dim;
      for (int t = 0; t < mi; ++t) {
        LinearConstraint eq;
        eq.owner = i;
        eq.tag = "upin_" + std::to_string(i) + "_" + std::to_string(t);
        eq.a.idx = {lay.u_base[i] + t};
        eq.a.coef = VectorXd::Ones(1);
        eq.rhs = request.proposed[model.input_offset(i) + t];
        pinned.eq.push_back(std::move(eq));
      }
    }
    ConicResult fr = solve_feasibility(pinned);
    if (fr.status == SolveStatus::kOptimal) {
      fill_result_from_x(model, lay, fr.x, out);
      out.certified = request.proposed;
      out.status = SolveStatus::kOptimal;
      out.objective = 0.0;
      out.solve_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
      return out;
    }
  }

  ConicResult res = solve_conic(prog);
  if (res.status == SolveStatus::kOptimal) {
    fill_result_from_x(model, lay, res.x, out);
    out.status = SolveStatus::kOptimal;
    out.objective = std::max(0.0, res.objective);
  } else {
    // infeasible request; apply the stored backup trajectory
    if (session.candidate_z.cols() != session.horizon + 1)
      throw std::runtime_error("no stored candidate to fall back on");
    out.status = SolveStatus::kInfeasible;
    out.fallback = true;
    out.z = session.candidate_z;
    out.v = session.candidate_v;
    out.beta_tilde = session.beta;
    out.delta_beta = VectorXd::Zero(model.size());
    out.certified = VectorXd::Zero(model.input_dim());
    for (int i = 0; i < model.size(); ++i) {
      const int mi = model.subsystem(i).input_dim;
      VectorXd e = model.neighborhood_state(i, request.state) -
                   model.neighborhood_state(i, session.candidate_z.col(0));
      out.certified.segment(model.input_offset(i), mi) =
          session.candidate_v.block(model.input_offset(i), 0, mi, 1) +
          artifacts.tube.gains[i] * e;
    }
    out.objective = (request.proposed - out.certified).squaredNorm();
  }
  out.solve_ms = std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
  return out;
}

CertSession init_session(const NetworkModel& model, const Artifacts& artifacts,
                         const VectorXd& x0, int horizon) {
  const int M = model.size();
  CertSession s;
  s.horizon = horizon;
  s.beta = VectorXd::Constant(M, 1.0 / M);
  s.alpha = artifacts.terminal.initial_levels;

  CertLayout lay = make_cert_layout(model, horizon);
  CertRequest req;
  req.state = x0;
  req.proposed = VectorXd::Zero(model.input_dim());
  ConicProgram prog = build_program(model, artifacts, s, req, lay);
  ConicResult fr = solve_feasibility(prog);
  if (fr.status != SolveStatus::kOptimal)
    throw std::runtime_error("x(0) outside implicit safe set X_N");
  CertResult seed;
  fill_result_from_x(model, lay, fr.x, seed);
  s.candidate_z = seed.z;
  s.candidate_v = seed.v;
  return s;
}

void advance_session(const NetworkModel& model, const Artifacts& artifacts,
                     CertSession& session, const VectorXd& x_next,
                     const CertResult& result) {
  const int M = model.size();
  const int N = session.horizon;
  if (result.z.cols() != N + 1 || result.v.cols() != N)
    throw std::invalid_argument("result horizon does not match the session");

  VectorXd beta_next(M);
  for (int i = 0; i < M; ++i) {
    VectorXd e = model.neighborhood_state(i, x_next) -
                 model.neighborhood_state(i, result.z.col(1));
    beta_next[i] = e.dot(artifacts.nbh_shapes[i] * e);
  }
  if (beta_next.sum() > 1.0 + kMembershipSlack)
    throw std::runtime_error(
        "tube budget sum exceeds 1: disturbance outside its bound");

  VectorXd zn = result.z.col(N);
  session.alpha =
      update_alpha(artifacts.terminal, model, session.alpha, zn);
  session.beta = beta_next;

  session.candidate_z.resize(model.state_dim(), N + 1);
  session.candidate_z.leftCols(N) = result.z.rightCols(N);
  session.candidate_z.col(N) =
      (model.global_a() + model.global_b() * artifacts.terminal.global_gain) *
      zn;
  session.candidate_v.resize(model.input_dim(), N);
  if (N > 1) session.candidate_v.leftCols(N - 1) = result.v.rightCols(N - 1);
  session.candidate_v.col(N - 1) = artifacts.terminal.global_gain * zn;
  session.fallback_history.push_back(result.fallback);
}

namespace {

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

MatrixXd matrix_from_json(const json& j) {
  const int r = static_cast<int>(j.size());
  const int c = r > 0 ? static_cast<int>(j[0].size()) : 0;
  MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int k = 0; k < c; ++k) m(i, k) = j[i][k].get<double>();
  return m;
}

json poly_to_json(const Polytope& p) {
  return {{"rows", matrix_to_json(p.rows)},
          {"offsets", matrix_to_json(p.offsets)}};
}

Polytope poly_from_json(const json& j) {
  Polytope p;
  p.rows = matrix_from_json(j.at("rows"));
  p.offsets = matrix_from_json(j.at("offsets")).col(0);
  return p;
}

}  // namespace

void save_artifacts(const Artifacts& a, const std::string& path) {
  const int M = static_cast<int>(a.tube.shape_blocks.size());
  json doc;
  doc["coupling_multiplier"] = a.tube.coupling_multiplier;
  doc["tube_objective"] = a.tube.objective;
  doc["level_budget"] = a.terminal.level_budget;
  json subs = json::array();
  for (int i = 0; i < M; ++i) {
    json s;
    s["tube_shape"] = matrix_to_json(a.tube.shape_blocks[i]);
    s["tube_gain"] = matrix_to_json(a.tube.gains[i]);
    s["tube_multiplier"] = a.tube.multipliers[i];
    s["state_tightened"] = poly_to_json(a.tightened.state[i]);
    s["input_tightened"] = poly_to_json(a.tightened.input[i]);
    s["terminal_shape"] = matrix_to_json(a.terminal.shape_blocks[i]);
    s["terminal_gain"] = matrix_to_json(a.terminal.gains[i]);
    s["relaxation"] = matrix_to_json(a.terminal.relaxation[i]);
    s["initial_level"] = a.terminal.initial_levels[i];
    subs.push_back(std::move(s));
  }
  doc["subsystems"] = std::move(subs);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << doc.dump(2) << "\n";
}

Artifacts load_artifacts(const NetworkModel& model, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  json doc = json::parse(in);
  const int M = model.size();
  if (static_cast<int>(doc.at("subsystems").size()) != M)
    throw std::runtime_error("artifact file does not match the model");

  Artifacts a;
  a.tube.coupling_multiplier = doc.at("coupling_multiplier").get<double>();
  a.tube.objective = doc.at("tube_objective").get<double>();
  a.tube.multipliers = VectorXd::Zero(M);
  a.terminal.level_budget = doc.at("level_budget").get<double>();
  a.terminal.initial_levels = VectorXd::Zero(M);
  a.tube.global_shape = MatrixXd::Zero(model.state_dim(), model.state_dim());
  a.tube.global_gain = MatrixXd::Zero(model.input_dim(), model.state_dim());
  a.terminal.global_shape = a.tube.global_shape;
  a.terminal.global_gain = a.tube.global_gain;
  for (int i = 0; i < M; ++i) {
    const json& s = doc.at("subsystems")[i];
    const int ni = model.subsystem(i).state_dim;
    const int mi = model.subsystem(i).input_dim;
    MatrixXd p = matrix_from_json(s.at("tube_shape"));
    a.tube.shape_blocks.push_back(p);
    a.tube.inverse_blocks.push_back(
        p.llt().solve(MatrixXd::Identity(ni, ni)));
    a.tube.gains.push_back(matrix_from_json(s.at("tube_gain")));
    a.tube.multipliers[i] = s.at("tube_multiplier").get<double>();
    a.tightened.state.push_back(poly_from_json(s.at("state_tightened")));
    a.tightened.input.push_back(poly_from_json(s.at("input_tightened")));
    a.terminal.shape_blocks.push_back(
        matrix_from_json(s.at("terminal_shape")));
    a.terminal.gains.push_back(matrix_from_json(s.at("terminal_gain")));
    a.terminal.relaxation.push_back(matrix_from_json(s.at("relaxation")));
    a.terminal.initial_levels[i] = s.at("initial_level").get<double>();

    a.tube.global_shape.block(model.state_offset(i), model.state_offset(i),
                              ni, ni) = p;
    a.terminal.global_shape.block(model.state_offset(i),
                                  model.state_offset(i), ni, ni) =
        a.terminal.shape_blocks[i];
    MatrixXd w = model.neighborhood_selector(i);
    a.tube.global_gain.middleRows(model.input_offset(i), mi) =
        a.tube.gains[i] * w;
    a.terminal.global_gain.middleRows(model.input_offset(i), mi) =
        a.terminal.gains[i] * w;
  }
  a.nbh_shapes = project_to_conte_form(a.tube, model);
  return a;
}

}  // namespace dmpsc
