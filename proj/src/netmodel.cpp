#include "dmpsc/netmodel.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <set>
#include <stdexcept>

#include <Eigen/Eigenvalues>
#include <json.hpp>

namespace dmpsc {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

bool Polytope::contains(const VectorXd& x, double slack) const {
  return ((rows * x - offsets).array() <= slack).all();
}

void Polytope::normalize() {
  for (int r = 0; r < rows.rows(); ++r) {
    double nrm = rows.row(r).norm();
    if (nrm > 0.0) {
      rows.row(r) /= nrm;
      offsets[r] /= nrm;
    }
  }
}

Polytope Polytope::box(const VectorXd& lo, const VectorXd& hi) {
  const int d = static_cast<int>(lo.size());
  Polytope p;
  p.rows = MatrixXd::Zero(2 * d, d);
  p.offsets = VectorXd::Zero(2 * d);
  for (int k = 0; k < d; ++k) {
    p.rows(2 * k, k) = 1.0;
    p.offsets[2 * k] = hi[k];
    p.rows(2 * k + 1, k) = -1.0;
    p.offsets[2 * k + 1] = -lo[k];
  }
  return p;
}

bool Ellipsoid::contains(const VectorXd& v, double slack) const {
  return v.dot(shape * v) <= level + slack;
}

NetworkModel::NetworkModel(std::vector<SubsystemSpec> subsystems)
    : subs_(std::move(subsystems)) {
  const int M = size();
  neighborhoods_.resize(M);
  for (int i = 0; i < M; ++i) {
    std::set<int> nb{i};
    for (const auto& [j, a] : subs_[i].coupling) nb.insert(j);
    neighborhoods_[i].assign(nb.begin(), nb.end());
  }
  state_off_.resize(M);
  input_off_.resize(M);
  dist_off_.resize(M);
  nbh_dim_.resize(M);
  for (int i = 0; i < M; ++i) {
    state_off_[i] = n_;
    input_off_[i] = m_;
    dist_off_[i] = p_;
    n_ += subs_[i].state_dim;
    m_ += subs_[i].input_dim;
    p_ += subs_[i].disturbance_dim;
  }
  for (int i = 0; i < M; ++i) {
    int d = 0;
    for (int j : neighborhoods_[i])
      if (j >= 0 && j < M) d += subs_[j].state_dim;
    nbh_dim_[i] = d;
  }

  // Constraint rows are stored in normalized form.
  for (auto& s : subs_) {
    s.state_constraints.normalize();
    s.input_constraints.normalize();
  }

  a_ = MatrixXd::Zero(n_, n_);
  b_ = MatrixXd::Zero(n_, m_);
  g_ = MatrixXd::Zero(n_, p_);
  for (int i = 0; i < M; ++i) {
    const auto& s = subs_[i];
    for (const auto& [j, blk] : s.coupling) {
      if (j < 0 || j >= M) continue;
      if (blk.rows() == s.state_dim && blk.cols() == subs_[j].state_dim)
        a_.block(state_off_[i], state_off_[j], blk.rows(), blk.cols()) = blk;
    }
    if (s.input_matrix.rows() == s.state_dim &&
        s.input_matrix.cols() == s.input_dim)
      b_.block(state_off_[i], input_off_[i], s.state_dim, s.input_dim) =
          s.input_matrix;
    if (s.disturbance_matrix.rows() == s.state_dim &&
        s.disturbance_matrix.cols() == s.disturbance_dim)
      g_.block(state_off_[i], dist_off_[i], s.state_dim, s.disturbance_dim) =
          s.disturbance_matrix;
  }

  // Global constraint stacks H x <= h, O u <= o.
  int qx = 0, qu = 0;
  for (const auto& s : subs_) {
    qx += s.state_constraints.size();
    qu += s.input_constraints.size();
  }
  global_x_.rows = MatrixXd::Zero(qx, n_);
  global_x_.offsets = VectorXd::Zero(qx);
  global_u_.rows = MatrixXd::Zero(qu, m_);
  global_u_.offsets = VectorXd::Zero(qu);
  int rx = 0, ru = 0;
  for (int i = 0; i < M; ++i) {
    const auto& s = subs_[i];
    if (s.state_constraints.dim() == nbh_dim_[i]) {
      MatrixXd w = neighborhood_selector(i);
      global_x_.rows.middleRows(rx, s.state_constraints.size()) =
          s.state_constraints.rows * w;
      global_x_.offsets.segment(rx, s.state_constraints.size()) =
          s.state_constraints.offsets;
    }
    rx += s.state_constraints.size();
    if (s.input_constraints.dim() == s.input_dim) {
      global_u_.rows.block(ru, input_off_[i], s.input_constraints.size(),
                           s.input_dim) = s.input_constraints.rows;
      global_u_.offsets.segment(ru, s.input_constraints.size()) =
          s.input_constraints.offsets;
    }
    ru += s.input_constraints.size();
  }
}

int NetworkModel::neighborhood_offset(int i, int j) const {
  int off = 0;
  for (int k : neighborhoods_[i]) {
    if (k == j) return off;
    off += subs_[k].state_dim;
  }
  throw std::invalid_argument("subsystem " + std::to_string(j) +
                              " is not a neighbor of " + std::to_string(i));
}

MatrixXd NetworkModel::state_selector(int i) const {
  MatrixXd t = MatrixXd::Zero(subs_[i].state_dim, n_);
  t.middleCols(state_off_[i], subs_[i].state_dim).setIdentity();
  return t;
}

MatrixXd NetworkModel::neighborhood_selector(int i) const {
  MatrixXd w = MatrixXd::Zero(nbh_dim_[i], n_);
  int r = 0;
  for (int j : neighborhoods_[i]) {
    w.block(r, state_off_[j], subs_[j].state_dim, subs_[j].state_dim)
        .setIdentity();
    r += subs_[j].state_dim;
  }
  return w;
}

VectorXd NetworkModel::local_state(int i, const VectorXd& x) const {
  return x.segment(state_off_[i], subs_[i].state_dim);
}

VectorXd NetworkModel::neighborhood_state(int i, const VectorXd& x) const {
  VectorXd xn(nbh_dim_[i]);
  int r = 0;
  for (int j : neighborhoods_[i]) {
    xn.segment(r, subs_[j].state_dim) =
        x.segment(state_off_[j], subs_[j].state_dim);
    r += subs_[j].state_dim;
  }
  return xn;
}

std::vector<std::string> validate(const NetworkModel& model) {
  std::vector<std::string> report;
  const int M = model.size();
  auto flag = [&](const std::string& msg) { report.push_back(msg); };

  for (int i = 0; i < M; ++i) {
    const auto& s = model.subsystem(i);
    const std::string tag = "subsystem " + std::to_string(i) + ": ";
    for (const auto& [j, blk] : s.coupling) {
      if (j < 0 || j >= M) {
        flag(tag + "coupling references unknown subsystem " +
             std::to_string(j));
        continue;
      }
      if (blk.rows() != s.state_dim ||
          blk.cols() != model.subsystem(j).state_dim)
        flag(tag + "coupling block A_" + std::to_string(i) + "," +
             std::to_string(j) + " has wrong dimensions");
    }
    if (s.input_matrix.rows() != s.state_dim ||
        s.input_matrix.cols() != s.input_dim)
      flag(tag + "input matrix has wrong dimensions");
    if (s.disturbance_matrix.rows() != s.state_dim ||
        s.disturbance_matrix.cols() != s.disturbance_dim)
      flag(tag + "disturbance matrix has wrong dimensions");
    if (s.state_constraints.dim() != model.neighborhood_dim(i))
      flag(tag + "state constraints not over neighborhood coordinates");
    if (s.input_constraints.dim() != s.input_dim)
      flag(tag + "input constraints have wrong dimension");
    for (int r = 0; r < s.state_constraints.size(); ++r)
      if (s.state_constraints.rows.row(r).norm() == 0.0)
        flag(tag + "zero row in state constraints");
    for (int r = 0; r < s.input_constraints.size(); ++r)
      if (s.input_constraints.rows.row(r).norm() == 0.0)
        flag(tag + "zero row in input constraints");
    if (s.state_constraints.size() > 0 &&
        s.state_constraints.offsets.minCoeff() <= 0.0)
      flag(tag + "origin not in interior of state constraints");
    if (s.input_constraints.size() > 0 &&
        s.input_constraints.offsets.minCoeff() <= 0.0)
      flag(tag + "origin not in interior of input constraints");
    if (s.disturbance_set.dim() != s.disturbance_dim) {
      flag(tag + "disturbance set has wrong dimension");
    } else if (s.disturbance_dim > 0) {
      const MatrixXd& q = s.disturbance_set.shape;
      if ((q - q.transpose()).norm() > 1e-9 * (1.0 + q.norm()))
        flag(tag + "disturbance shape not symmetric");
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(q);
      if (es.eigenvalues().minCoeff() < -1e-9)
        flag(tag + "disturbance shape not positive semi-definite");
      if (s.disturbance_set.level < 0.0)
        flag(tag + "negative disturbance level");
    }
  }

  // Undirected neighborhoods (Lemma-style symmetry).
  for (int i = 0; i < M; ++i)
    for (int j : model.neighbors(i)) {
      if (j == i) continue;
      const auto& nj = model.neighbors(j);
      if (!std::binary_search(nj.begin(), nj.end(), i))
        flag("asymmetric neighborhood: " + std::to_string(j) + " in N_" +
             std::to_string(i) + " but " + std::to_string(i) + " not in N_" +
             std::to_string(j));
    }

  // Connected communication graph.
  if (M > 0) {
    std::vector<bool> seen(M, false);
    std::queue<int> q;
    q.push(0);
    seen[0] = true;
    int count = 1;
    while (!q.empty()) {
      int i = q.front();
      q.pop();
      for (int j : model.neighbors(i))
        if (!seen[j]) {
          seen[j] = true;
          ++count;
          q.push(j);
        }
    }
    if (count < M) flag("graph not connected");
  }

  // Stabilizability of the assembled pair (A, B) via the PBH test.
  if (report.empty() && model.state_dim() > 0) {
    const MatrixXd& a = model.global_a();
    const MatrixXd& b = model.global_b();
    Eigen::EigenSolver<MatrixXd> es(a);
    for (int k = 0; k < a.rows(); ++k) {
      std::complex<double> lam = es.eigenvalues()[k];
      if (std::abs(lam) < 1.0 - 1e-9) continue;
      Eigen::MatrixXcd pencil(a.rows(), a.cols() + b.cols());
      pencil << a.cast<std::complex<double>>() -
                    lam * Eigen::MatrixXcd::Identity(a.rows(), a.cols()),
          b.cast<std::complex<double>>();
      Eigen::JacobiSVD<Eigen::MatrixXcd> svd(pencil);
      double smin = svd.singularValues().minCoeff();
      if (smin < 1e-8 * (1.0 + svd.singularValues().maxCoeff())) {
        flag("pair (A, B) not stabilizable (uncontrollable mode at |lambda|=" +
             std::to_string(std::abs(lam)) + ")");
        break;
      }
    }
  }
  return report;
}

VectorXd step_truth(const NetworkModel& model, const VectorXd& x,
                    const VectorXd& u, const VectorXd& w) {
  if (x.size() != model.state_dim() || u.size() != model.input_dim() ||
      w.size() != model.disturbance_dim())
    throw std::invalid_argument("step_truth: dimension mismatch");
  for (int i = 0; i < model.size(); ++i) {
    const auto& s = model.subsystem(i);
    VectorXd wi = w.segment(model.disturbance_offset(i), s.disturbance_dim);
    if (s.disturbance_dim > 0 && !s.disturbance_set.contains(wi))
      throw std::invalid_argument("step_truth: disturbance of subsystem " +
                                  std::to_string(i) + " outside W_i");
  }
  VectorXd next(model.state_dim());
  for (int i = 0; i < model.size(); ++i) {
    const auto& s = model.subsystem(i);
    VectorXd xi = VectorXd::Zero(s.state_dim);
    for (const auto& [j, blk] : s.coupling)
      xi += blk * x.segment(model.state_offset(j),
                            model.subsystem(j).state_dim);
    xi += s.input_matrix * u.segment(model.input_offset(i), s.input_dim);
    xi += s.disturbance_matrix *
          w.segment(model.disturbance_offset(i), s.disturbance_dim);
    next.segment(model.state_offset(i), s.state_dim) = xi;
  }
  return next;
}

NetworkModel build_chain_benchmark(const ChainParams& prm) {
  if (prm.masses < 1) throw std::invalid_argument("chain needs M >= 1");
  if (prm.dt <= 0.0 || prm.mass <= 0.0)
    throw std::invalid_argument("chain needs positive dt and mass");
  const int M = prm.masses;
  const double dt = prm.dt;
  const double k = prm.spring, d = prm.damper, m = prm.mass;

  std::vector<SubsystemSpec> subs(M);
  for (int i = 0; i < M; ++i) {
    auto& s = subs[i];
    s.state_dim = 2;
    s.input_dim = 1;
    s.disturbance_dim = 2;
    int links = (M == 1) ? 0 : ((i == 0 || i == M - 1) ? 1 : 2);
    MatrixXd aii(2, 2);
    aii << 1.0, dt, -links * k * dt / m, 1.0 - links * d * dt / m;
    s.coupling[i] = aii;
    MatrixXd anb(2, 2);
    anb << 0.0, 0.0, k * dt / m, d * dt / m;
    if (i > 0) s.coupling[i - 1] = anb;
    if (i + 1 < M) s.coupling[i + 1] = anb;
    s.input_matrix = MatrixXd::Zero(2, 1);
    s.input_matrix(1, 0) = dt / m;
    s.disturbance_matrix = dt * MatrixXd::Identity(2, 2);
    s.input_constraints =
        Polytope::box(-prm.input_bound * VectorXd::Ones(1),
                      prm.input_bound * VectorXd::Ones(1));
    s.disturbance_set = {MatrixXd::Identity(2, 2), prm.disturbance_level};
  }
  // Neighborhood state constraints: each subsystem contributes its own box
  // rows so the stacked global polytope is exactly the state box.
  for (int i = 0; i < M; ++i) {
    auto& s = subs[i];
    int nbh = 2 * (1 + (M == 1 ? 0 : ((i == 0 || i == M - 1) ? 1 : 2)));
    int own = (i == 0) ? 0 : 2;  // own block offset inside x_{N_i}
    double p_hi = prm.position_bound, p_lo = -prm.position_bound;
    if (prm.tight_second_mass && i == 1) p_hi = 0.1;
    MatrixXd h = MatrixXd::Zero(4, nbh);
    VectorXd off(4);
    h(0, own) = 1.0;
    off[0] = p_hi;
    h(1, own) = -1.0;
    off[1] = -p_lo;
    h(2, own + 1) = 1.0;
    off[2] = prm.velocity_bound;
    h(3, own + 1) = -1.0;
    off[3] = prm.velocity_bound;
    s.state_constraints = {h, off};
  }
  return NetworkModel(std::move(subs));
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
  if (!j.is_array() || j.empty()) return MatrixXd(0, 0);
  MatrixXd m(j.size(), j[0].size());
  for (size_t r = 0; r < j.size(); ++r)
    for (size_t c = 0; c < j[r].size(); ++c) m(r, c) = j[r][c].get<double>();
  return m;
}

json vector_to_json(const VectorXd& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

VectorXd vector_from_json(const json& j) {
  VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

}  // namespace

NetworkModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model file " + path);
  json doc = json::parse(in);
  std::vector<SubsystemSpec> subs;
  for (const auto& js : doc.at("subsystems")) {
    SubsystemSpec s;
    s.state_dim = js.at("n").get<int>();
    s.input_dim = js.at("m").get<int>();
    s.disturbance_dim = js.at("p").get<int>();
    for (auto it = js.at("A").begin(); it != js.at("A").end(); ++it)
      s.coupling[std::stoi(it.key())] = matrix_from_json(it.value());
    s.input_matrix = matrix_from_json(js.at("B"));
    s.disturbance_matrix = matrix_from_json(js.at("G"));
    s.state_constraints = {matrix_from_json(js.at("X").at("H")),
                           vector_from_json(js.at("X").at("h"))};
    s.input_constraints = {matrix_from_json(js.at("U").at("O")),
                           vector_from_json(js.at("U").at("o"))};
    s.disturbance_set = {matrix_from_json(js.at("W").at("Q")),
                         js.at("W").at("q").get<double>()};
    subs.push_back(std::move(s));
  }
  NetworkModel model(std::move(subs));
  auto report = validate(model);
  if (!report.empty()) {
    std::string msg = "model file rejected:";
    for (const auto& r : report) msg += "\n  " + r;
    throw std::runtime_error(msg);
  }
  return model;
}

void save_model(const NetworkModel& model, const std::string& path) {
  json doc;
  doc["subsystems"] = json::array();
  for (int i = 0; i < model.size(); ++i) {
    const auto& s = model.subsystem(i);
    json js;
    js["n"] = s.state_dim;
    js["m"] = s.input_dim;
    js["p"] = s.disturbance_dim;
    js["A"] = json::object();
    for (const auto& [j, blk] : s.coupling)
      js["A"][std::to_string(j)] = matrix_to_json(blk);
    js["B"] = matrix_to_json(s.input_matrix);
    js["G"] = matrix_to_json(s.disturbance_matrix);
    js["X"] = {{"H", matrix_to_json(s.state_constraints.rows)},
               {"h", vector_to_json(s.state_constraints.offsets)}};
    js["U"] = {{"O", matrix_to_json(s.input_constraints.rows)},
               {"o", vector_to_json(s.input_constraints.offsets)}};
    js["W"] = {{"Q", matrix_to_json(s.disturbance_set.shape)},
               {"q", s.disturbance_set.level}};
    doc["subsystems"].push_back(js);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write model file " + path);
  out << doc.dump(2) << "\n";
}

}  // namespace dmpsc
