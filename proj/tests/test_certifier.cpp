#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include <Eigen/Dense>

#include "dmpsc/certifier.hpp"
#include "dmpsc/netmodel.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace dmpsc;

namespace {

const NetworkModel& chain_model() {
  static NetworkModel m = build_chain_benchmark({});
  return m;
}

const Artifacts& chain_artifacts() {
  static Artifacts a = design_artifacts(chain_model(), 0.055);
  return a;
}

// scalar subsystems on an arbitrary undirected graph; constraint rows only
// touch each subsystem's own coordinate
NetworkModel graph_model(int M, const std::set<std::pair<int, int>>& edges) {
  std::vector<std::set<int>> adj(M);
  for (const auto& [a, b] : edges) {
    adj[a].insert(b);
    adj[b].insert(a);
  }
  std::vector<SubsystemSpec> specs(M);
  for (int i = 0; i < M; ++i) {
    SubsystemSpec& s = specs[i];
    s.state_dim = 1;
    s.input_dim = 1;
    s.disturbance_dim = 1;
    s.coupling[i] = MatrixXd::Constant(1, 1, 0.5);
    for (int j : adj[i]) s.coupling[j] = MatrixXd::Constant(1, 1, 0.01);
    s.input_matrix = MatrixXd::Identity(1, 1);
    s.disturbance_matrix = MatrixXd::Identity(1, 1);
    int own = 0;
    for (int j : adj[i])
      if (j < i) ++own;
    const int nbh = static_cast<int>(adj[i].size()) + 1;
    MatrixXd rows = MatrixXd::Zero(2, nbh);
    rows(0, own) = 1.0;
    rows(1, own) = -1.0;
    s.state_constraints = {rows, VectorXd::Ones(2)};
    s.input_constraints = Polytope::box(-VectorXd::Ones(1), VectorXd::Ones(1));
    s.disturbance_set = {MatrixXd::Identity(1, 1), 1e-3};
  }
  return NetworkModel(std::move(specs));
}

// identity-shaped artifacts, good enough for structural program checks
Artifacts dummy_artifacts(const NetworkModel& m) {
  Artifacts a;
  for (int i = 0; i < m.size(); ++i) {
    const int ni = m.subsystem(i).state_dim;
    const int mi = m.subsystem(i).input_dim;
    a.tube.shape_blocks.push_back(MatrixXd::Identity(ni, ni));
    a.tube.inverse_blocks.push_back(MatrixXd::Identity(ni, ni));
    a.tube.gains.push_back(MatrixXd::Zero(mi, m.neighborhood_dim(i)));
    a.tightened.state.push_back(m.subsystem(i).state_constraints);
    a.tightened.input.push_back(m.subsystem(i).input_constraints);
    a.terminal.shape_blocks.push_back(MatrixXd::Identity(ni, ni));
    a.terminal.gains.push_back(MatrixXd::Zero(mi, m.neighborhood_dim(i)));
    a.terminal.relaxation.push_back(
        MatrixXd::Zero(m.neighborhood_dim(i), m.neighborhood_dim(i)));
  }
  a.tube.multipliers = VectorXd::Ones(m.size());
  a.terminal.level_budget = 1.0;
  a.terminal.initial_levels = VectorXd::Constant(m.size(), 1.0 / m.size());
  a.nbh_shapes = project_to_conte_form(a.tube, m);
  return a;
}

CertSession dummy_session(const NetworkModel& m, int horizon) {
  CertSession s;
  s.horizon = horizon;
  s.beta = VectorXd::Constant(m.size(), 1.0 / m.size());
  s.alpha = VectorXd::Constant(m.size(), 0.1);
  return s;
}

// budget-trade rows (negotiation plus pins) restricted to the trade variables
MatrixXd trade_rows(const ConicProgram& prog, const CertLayout& lay, int M) {
  std::vector<VectorXd> rows;
  for (const auto& eq : prog.eq) {
    if (eq.tag.rfind("negot_", 0) != 0 && eq.tag.rfind("pin_", 0) != 0)
      continue;
    VectorXd r = VectorXd::Zero(M);
    for (size_t k = 0; k < eq.a.idx.size(); ++k) {
      int col = -1;
      for (int i = 0; i < M; ++i)
        if (lay.dbeta_idx[i] == eq.a.idx[k]) col = i;
      REQUIRE(col >= 0);
      r[col] = eq.a.coef[k];
    }
    rows.push_back(r);
  }
  MatrixXd out(rows.size(), M);
  for (size_t r = 0; r < rows.size(); ++r) out.row(r) = rows[r];
  return out;
}

VectorXd sample_disturbance(const NetworkModel& m, std::mt19937& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  VectorXd w(m.disturbance_dim());
  for (int i = 0; i < m.size(); ++i) {
    const auto& ell = m.subsystem(i).disturbance_set;
    VectorXd g(ell.dim());
    for (int k = 0; k < g.size(); ++k) g[k] = gauss(rng);
    g /= g.norm();
    double r = std::pow(unif(rng), 1.0 / ell.dim());
    VectorXd v = Eigen::LLT<MatrixXd>(ell.shape).matrixU().solve(g);
    w.segment(m.disturbance_offset(i), ell.dim()) =
        v * r * std::sqrt(ell.level) * 0.999;
  }
  return w;
}

// candidate trajectory written into the decision vector of the program
VectorXd assemble_candidate(const NetworkModel& m, const CertLayout& lay,
                            const Artifacts& a, const CertSession& s,
                            const VectorXd& x) {
  VectorXd out = VectorXd::Zero(lay.total);
  for (int i = 0; i < m.size(); ++i) {
    const int ni = m.subsystem(i).state_dim;
    const int mi = m.subsystem(i).input_dim;
    for (int k = 0; k <= lay.horizon; ++k)
      out.segment(lay.z_base[i] + k * ni, ni) =
          s.candidate_z.block(m.state_offset(i), k, ni, 1);
    for (int k = 0; k < lay.horizon; ++k)
      out.segment(lay.v_base[i] + k * mi, mi) =
          s.candidate_v.block(m.input_offset(i), k, mi, 1);
    VectorXd e = m.neighborhood_state(i, x) -
                 m.neighborhood_state(i, s.candidate_z.col(0));
    out.segment(lay.u_base[i], mi) =
        s.candidate_v.block(m.input_offset(i), 0, mi, 1) +
        a.tube.gains[i] * e;
    out[lay.beta_idx[i]] = s.beta[i];
    out[lay.dbeta_idx[i]] = 0.0;
  }
  return out;
}

}  // namespace

TEST_CASE("layout: contiguous per-subsystem blocks") {
  const NetworkModel& m = chain_model();
  CertLayout lay = make_cert_layout(m, 10);
  // per subsystem: 2*11 states, 1*10 inputs, 1 certified, beta, dbeta
  CHECK(lay.total == 9 * (22 + 10 + 1 + 2));
  CHECK(lay.z_base[0] == 0);
  CHECK(lay.v_base[0] == 22);
  CHECK(lay.u_base[0] == 32);
  CHECK(lay.z_index(3, 2, 1, m) == lay.z_base[3] + 5);
  CHECK_THROWS_AS(make_cert_layout(m, 0), std::invalid_argument);
}

TEST_CASE("single agent: trade variable pinned to zero") {
  NetworkModel m = graph_model(1, {});
  Artifacts a = dummy_artifacts(m);
  CertSession s = dummy_session(m, 1);
  CertLayout lay = make_cert_layout(m, 1);
  CertRequest req{VectorXd::Zero(1), VectorXd::Zero(1)};
  ConicProgram prog = build_program(m, a, s, req, lay);
  MatrixXd r = trade_rows(prog, lay, 1);
  REQUIRE(r.rows() == 1);
  CHECK(r(0, 0) == 1.0);  // pin row
  // variables: z(0), z(1), v(0), u, beta, dbeta
  CHECK(lay.total == 6);
}

TEST_CASE("star graph: trade rows pin the hub and balance the leaves") {
  std::set<std::pair<int, int>> edges{{0, 1}, {0, 2}, {0, 3}, {0, 4}};
  NetworkModel m = graph_model(5, edges);
  Artifacts a = dummy_artifacts(m);
  CertSession s = dummy_session(m, 2);
  CertLayout lay = make_cert_layout(m, 2);
  CertRequest req{VectorXd::Zero(5), VectorXd::Zero(5)};
  MatrixXd r = trade_rows(build_program(m, a, s, req, lay), lay, 5);
  Eigen::FullPivLU<MatrixXd> lu(r);
  CHECK(lu.rank() == 2);
  MatrixXd ker = lu.kernel();
  for (int c = 0; c < ker.cols(); ++c) {
    CHECK(std::abs(ker(0, c)) < 1e-12);            // hub cannot trade
    CHECK(std::abs(ker.col(c).sum()) < 1e-12);     // leaves balance
  }
}

TEST_CASE("ring graph: trade rows force all variables to zero") {
  std::set<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 0}};
  NetworkModel m = graph_model(5, edges);
  Artifacts a = dummy_artifacts(m);
  CertSession s = dummy_session(m, 2);
  CertLayout lay = make_cert_layout(m, 2);
  CertRequest req{VectorXd::Zero(5), VectorXd::Zero(5)};
  MatrixXd r = trade_rows(build_program(m, a, s, req, lay), lay, 5);
  CHECK(Eigen::FullPivLU<MatrixXd>(r).rank() == 5);
}

TEST_CASE("budget trades sum to zero on random connected graphs") {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> msize(2, 8);
    const int M = msize(rng);
    std::set<std::pair<int, int>> edges;
    for (int v = 1; v < M; ++v) {
      std::uniform_int_distribution<int> parent(0, v - 1);
      edges.insert({parent(rng), v});
    }
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int aa = 0; aa < M; ++aa)
      for (int bb = aa + 1; bb < M; ++bb)
        if (unif(rng) < 0.25) edges.insert({aa, bb});

    NetworkModel m = graph_model(M, edges);
    Artifacts a = dummy_artifacts(m);
    CertSession s = dummy_session(m, 1);
    CertLayout lay = make_cert_layout(m, 1);
    CertRequest req{VectorXd::Zero(M), VectorXd::Zero(M)};
    MatrixXd r = trade_rows(build_program(m, a, s, req, lay), lay, M);
    Eigen::FullPivLU<MatrixXd> lu(r);
    MatrixXd ker = lu.kernel();
    if (lu.rank() == M) continue;  // only the zero trade is feasible
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int draw = 0; draw < 10; ++draw) {
      VectorXd c(ker.cols());
      for (int k = 0; k < c.size(); ++k) c[k] = gauss(rng);
      VectorXd d = ker * c;
      if (d.norm() > 0) d /= d.norm();
      CHECK(std::abs(d.sum()) <= 1e-9);
    }
  }
}

TEST_CASE("chain: session starts with uniform splits at the origin") {
  CertSession s = init_session(chain_model(), chain_artifacts(),
                               VectorXd::Zero(18), 10);
  CHECK(s.beta.size() == 9);
  CHECK(s.beta[0] == doctest::Approx(1.0 / 9.0));
  CHECK(s.alpha.sum() <=
        chain_artifacts().terminal.level_budget * (1.0 + 1e-12));
  CHECK(s.candidate_z.cols() == 11);
  CHECK(s.candidate_v.cols() == 10);
  CHECK(s.fallback_history.empty());
}

TEST_CASE("chain: far-away initial state is rejected") {
  VectorXd x0 = VectorXd::Zero(18);
  for (int i = 0; i < 9; ++i) x0[2 * i] = 5.0;
  CHECK_THROWS_AS(init_session(chain_model(), chain_artifacts(), x0, 10),
                  std::runtime_error);
}

TEST_CASE("chain: zero request at the origin passes through exactly") {
  CertSession s = init_session(chain_model(), chain_artifacts(),
                               VectorXd::Zero(18), 10);
  CertRequest req{VectorXd::Zero(18), VectorXd::Zero(9)};
  CertResult r = certify(chain_model(), chain_artifacts(), s, req);
  CHECK(r.status == SolveStatus::kOptimal);
  CHECK_FALSE(r.fallback);
  CHECK(r.objective == 0.0);
  CHECK(r.certified.norm() == 0.0);
}

TEST_CASE("chain: mild requests pass through, aggressive ones are modified") {
  const NetworkModel& m = chain_model();
  const Artifacts& a = chain_artifacts();
  CertSession s = init_session(m, a, VectorXd::Zero(18), 10);
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> small(-0.05, 0.05);
  for (int trial = 0; trial < 5; ++trial) {
    VectorXd ul(9);
    for (int i = 0; i < 9; ++i) ul[i] = small(rng);
    CertResult r = certify(m, a, s, {VectorXd::Zero(18), ul});
    CHECK(r.status == SolveStatus::kOptimal);
    CHECK(r.objective <= 1e-6);
    CHECK((r.certified - ul).norm() == 0.0);
  }
  // inputs this large would push some state out of its box over the horizon
  VectorXd ul = VectorXd::Constant(9, 4.9);
  CertResult r = certify(m, a, s, {VectorXd::Zero(18), ul});
  CHECK(r.status == SolveStatus::kOptimal);
  CHECK(r.objective > 1e-3);
  for (int i = 0; i < 9; ++i)
    CHECK(m.subsystem(i).input_constraints.contains(
        r.certified.segment(i, 1), 1e-7));
}

TEST_CASE("chain: optimizer satisfies the reported program") {
  const NetworkModel& m = chain_model();
  const Artifacts& a = chain_artifacts();
  VectorXd x0 = VectorXd::Zero(18);
  x0[4] = 0.05;
  x0[5] = -0.04;
  CertSession s = init_session(m, a, x0, 10);
  VectorXd ul = VectorXd::Constant(9, 2.0);
  CertResult r = certify(m, a, s, {x0, ul});
  REQUIRE(r.status == SolveStatus::kOptimal);
  CHECK(r.beta_tilde.minCoeff() >= -1e-9);
  CHECK(r.beta_tilde.sum() <= 1.0 + 1e-8);
  CHECK(std::abs(r.delta_beta.sum()) <= 1e-8);
  // reported input matches the tube law applied to the optimizer
  for (int i = 0; i < 9; ++i) {
    VectorXd e = m.neighborhood_state(i, x0) -
                 m.neighborhood_state(i, r.z.col(0));
    double u = r.v(i, 0) + (a.tube.gains[i] * e)(0);
    CHECK(r.certified[i] == doctest::Approx(u).epsilon(1e-8));
  }
  // nominal trajectory satisfies the dynamics
  for (int k = 0; k < 10; ++k)
    CHECK((r.z.col(k + 1) - m.global_a() * r.z.col(k) -
           m.global_b() * r.v.col(k))
              .norm() < 1e-8);
}

TEST_CASE("chain: certified closed loop stays feasible under disturbances") {
  const NetworkModel& m = chain_model();
  const Artifacts& a = chain_artifacts();
  VectorXd x = VectorXd::Zero(18);
  x[0] = 0.1;
  CertSession s = init_session(m, a, x, 10);
  std::mt19937 rng(11);
  std::uniform_real_distribution<double> pol(-2.0, 2.0);
  for (int t = 0; t < 8; ++t) {
    VectorXd ul(9);
    for (int i = 0; i < 9; ++i) ul[i] = pol(rng);
    CertResult r = certify(m, a, s, {x, ul});
    REQUIRE(r.status == SolveStatus::kOptimal);
    REQUIRE_FALSE(r.fallback);
    x = step_truth(m, x, r.certified, sample_disturbance(m, rng));
    advance_session(m, a, s, x, r);
    CHECK(s.beta.sum() <= 1.0 + 1e-9);
    CHECK(s.beta.minCoeff() >= 0.0);
    for (int i = 0; i < 9; ++i)
      CHECK(m.subsystem(i).state_constraints.contains(
          m.neighborhood_state(i, x), 1e-9));
  }
  CHECK(s.fallback_history.size() == 8);
}

TEST_CASE("chain: shifted candidate survives any in-spec disturbance") {
  const NetworkModel& m = chain_model();
  const Artifacts& a = chain_artifacts();
  VectorXd x0 = VectorXd::Zero(18);
  x0[4] = 0.08;
  CertSession s0 = init_session(m, a, x0, 10);
  CertResult r = certify(m, a, s0, {x0, VectorXd::Zero(9)});
  REQUIRE(r.status == SolveStatus::kOptimal);
  CertLayout lay = make_cert_layout(m, 10);
  std::mt19937 rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    VectorXd x1 = step_truth(m, x0, r.certified, sample_disturbance(m, rng));
    CertSession s1 = s0;
    advance_session(m, a, s1, x1, r);
    ConicProgram prog =
        build_program(m, a, s1, {x1, VectorXd::Zero(9)}, lay);
    VectorXd cand = assemble_candidate(m, lay, a, s1, x1);
    CHECK(prog.max_violation(cand) <= 1e-6);
  }
}

TEST_CASE("chain: budget integrity check trips on out-of-spec disturbance") {
  const NetworkModel& m = chain_model();
  const Artifacts& a = chain_artifacts();
  CertSession s = init_session(m, a, VectorXd::Zero(18), 10);
  CertResult r = certify(m, a, s, {VectorXd::Zero(18), VectorXd::Zero(9)});
  REQUIRE(r.status == SolveStatus::kOptimal);
  VectorXd x1 = VectorXd::Constant(18, 0.9);  // far outside every tube
  CHECK_THROWS_AS(advance_session(m, a, s, x1, r), std::runtime_error);
}

TEST_CASE("chain: feasibility is monotone in the horizon") {
  const NetworkModel& m = chain_model();
  const Artifacts& a = chain_artifacts();
  std::mt19937 rng(41);
  std::normal_distribution<double> gauss(0.0, 1.0);
  int tested = 0;
  for (int dir = 0; dir < 3; ++dir) {
    VectorXd d(18);
    for (int k = 0; k < 18; ++k) d[k] = gauss(rng);
    d /= d.norm();
    double scale = 0.9;
    for (int tries = 0; tries < 8; ++tries, scale *= 0.5) {
      bool ok = true;
      try {
        init_session(m, a, scale * d, 5);
      } catch (const std::runtime_error&) {
        ok = false;
      }
      if (!ok) continue;
      CHECK_NOTHROW(init_session(m, a, scale * d, 6));
      ++tested;
      break;
    }
  }
  CHECK(tested == 3);
}

TEST_CASE("artifacts: json round trip preserves the design") {
  const Artifacts& a = chain_artifacts();
  const char* path = "artifacts_roundtrip.json";
  save_artifacts(a, path);
  Artifacts b = load_artifacts(chain_model(), path);
  std::remove(path);
  REQUIRE(b.tube.shape_blocks.size() == 9);
  for (int i = 0; i < 9; ++i) {
    CHECK((a.tube.shape_blocks[i] - b.tube.shape_blocks[i]).norm() < 1e-12);
    CHECK((a.tube.gains[i] - b.tube.gains[i]).norm() < 1e-12);
    CHECK((a.terminal.shape_blocks[i] - b.terminal.shape_blocks[i]).norm() <
          1e-12);
    CHECK((a.terminal.gains[i] - b.terminal.gains[i]).norm() < 1e-12);
    CHECK((a.terminal.relaxation[i] - b.terminal.relaxation[i]).norm() <
          1e-12);
    CHECK((a.tightened.state[i].offsets - b.tightened.state[i].offsets)
              .norm() < 1e-12);
    CHECK((a.nbh_shapes[i] - b.nbh_shapes[i]).norm() < 1e-12);
  }
  CHECK(b.terminal.level_budget ==
        doctest::Approx(a.terminal.level_budget).epsilon(1e-14));
  CHECK((b.tube.global_gain - a.tube.global_gain).norm() < 1e-12);
  CHECK((b.terminal.global_shape - a.terminal.global_shape).norm() < 1e-12);
}
