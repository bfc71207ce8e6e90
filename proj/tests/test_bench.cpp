#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <Eigen/Dense>

#include "dmpsc/bench.hpp"

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

}  // namespace

TEST_CASE("stage cost values") {
  CHECK(stage_cost(VectorXd::Zero(4), VectorXd::Zero(1)) == 0.0);
  VectorXd e1 = VectorXd::Unit(6, 0);
  CHECK(stage_cost(e1, VectorXd::Zero(1)) == doctest::Approx(0.5));
  CHECK(stage_cost(VectorXd::Zero(6), VectorXd::Ones(1)) ==
        doctest::Approx(1.0));
  VectorXd x(2), u(1);
  x << 1.0, 2.0;
  u << 3.0;
  CHECK(stage_cost(x, u) == doctest::Approx(0.5 * 5.0 + 9.0));
}

TEST_CASE("disturbance sampling stays inside the set") {
  std::mt19937 rng(7);

  Ellipsoid degenerate{MatrixXd::Identity(3, 3), 0.0};
  for (int k = 0; k < 10; ++k)
    CHECK(sample_disturbance(degenerate, rng).norm() == 0.0);

  const auto& set = chain_model().subsystem(0).disturbance_set;
  const int n = 100000;
  VectorXd mean = VectorXd::Zero(set.dim());
  double vmax = 0.0;
  for (int k = 0; k < n; ++k) {
    VectorXd w = sample_disturbance(set, rng);
    vmax = std::max(vmax, w.squaredNorm());
    mean += w;
  }
  mean /= n;
  CHECK(vmax <= 1.1e-3 * (1.0 + 1e-12));
  CHECK(vmax > 0.9e-3);  // the boundary is approached
  // coordinate std of a uniform ball of radius R is R/sqrt(d+2)
  const double radius = std::sqrt(1.1e-3);
  const double sigma = radius / std::sqrt(set.dim() + 2.0) / std::sqrt(n);
  for (int c = 0; c < set.dim(); ++c) CHECK(std::abs(mean[c]) <= 3.0 * sigma);

  for (int k = 0; k < 50; ++k) {
    VectorXd w = sample_disturbance(set, rng, true);
    CHECK(w.dot(set.shape * w) == doctest::Approx(set.level).epsilon(1e-9));
  }
}

TEST_CASE("global disturbance stacks per-subsystem samples") {
  std::mt19937 rng(3);
  VectorXd w = sample_disturbance_global(chain_model(), rng);
  REQUIRE(w.size() == chain_model().disturbance_dim());
  for (int i = 0; i < chain_model().size(); ++i) {
    const auto& set = chain_model().subsystem(i).disturbance_set;
    VectorXd wi = w.segment(chain_model().disturbance_offset(i), set.dim());
    CHECK(set.contains(wi));
  }
}

TEST_CASE("zero policy returns zero") {
  Policy p = make_policy({PolicyKind::kZero, 10}, chain_model(),
                         chain_artifacts());
  CHECK(p(VectorXd::Zero(chain_model().state_dim()), 0).norm() == 0.0);
  CHECK(p(VectorXd::Random(chain_model().state_dim()), 5).norm() == 0.0);
}

TEST_CASE("linear feedback respects the neighborhood structure") {
  const auto& m = chain_model();
  Policy p = make_policy({PolicyKind::kLinearFeedback, 10}, m,
                         chain_artifacts());
  std::mt19937 rng(11);
  std::normal_distribution<double> gauss(0.0, 0.1);
  for (int trial = 0; trial < 5; ++trial) {
    VectorXd x(m.state_dim());
    for (int k = 0; k < x.size(); ++k) x[k] = gauss(rng);
    VectorXd u = p(x, 0);
    for (int i = 0; i < m.size(); ++i) {
      // perturb everything outside N_i; u_i must not move
      VectorXd y = x;
      for (int j = 0; j < m.size(); ++j) {
        bool nbr = false;
        for (int q : m.neighbors(i)) nbr |= (q == j);
        if (!nbr)
          y.segment(m.state_offset(j), m.subsystem(j).state_dim).array() +=
              0.5;
      }
      VectorXd uy = p(y, 0);
      CHECK((uy - u).segment(m.input_offset(i), m.subsystem(i).input_dim)
                .norm() == 0.0);
    }
    // and it does react to its own state
    VectorXd z = x;
    z[m.state_offset(4)] += 0.3;
    CHECK(std::abs((p(z, 0) - u)[m.input_offset(4)]) > 1e-6);
  }
}

TEST_CASE("nominal MPC matches the unconstrained finite-horizon solution "
          "deep inside the constraints") {
  const auto& m = chain_model();
  const int N = 10;
  Policy p = make_policy({PolicyKind::kNominalDmpc, N}, m, chain_artifacts());

  // accumulated stage weights: 0.5 x'Qx + u'u with Q = sum_i W_i' W_i
  MatrixXd qhat = MatrixXd::Zero(m.state_dim(), m.state_dim());
  for (int i = 0; i < m.size(); ++i) {
    MatrixXd w = m.neighborhood_selector(i);
    qhat += w.transpose() * w;
  }
  const MatrixXd& a = m.global_a();
  const MatrixXd& b = m.global_b();
  MatrixXd rhat = 2.0 * MatrixXd::Identity(m.input_dim(), m.input_dim());

  MatrixXd pk = MatrixXd::Zero(m.state_dim(), m.state_dim());
  MatrixXd k0;
  for (int k = N - 1; k >= 0; --k) {
    k0 = (rhat + b.transpose() * pk * b)
             .ldlt()
             .solve(b.transpose() * pk * a);
    pk = qhat + a.transpose() * pk * (a - b * k0);
    pk = 0.5 * (pk + pk.transpose());
  }

  std::mt19937 rng(23);
  std::uniform_real_distribution<double> unif(-0.02, 0.02);
  for (int trial = 0; trial < 3; ++trial) {
    VectorXd x(m.state_dim());
    for (int c = 0; c < x.size(); ++c) x[c] = unif(rng);
    VectorXd u = p(x, 0);
    VectorXd u_lq = -k0 * x;
    CHECK((u - u_lq).lpNorm<Eigen::Infinity>() <= 1e-6);
  }
}

TEST_CASE("raw simulation is deterministic and its cost recomputes") {
  const auto& m = chain_model();
  std::mt19937 rng(5);
  VectorXd x0 = sample_initial_state(m, chain_artifacts(), 10, rng);
  SimTrace t1 = simulate(m, chain_artifacts(), {PolicyKind::kLinearFeedback},
                         ControllerKind::kRaw, 20, 10, 99, x0);
  SimTrace t2 = simulate(m, chain_artifacts(), {PolicyKind::kLinearFeedback},
                         ControllerKind::kRaw, 20, 10, 99, x0);
  REQUIRE(t1.steps.size() == 20);
  CHECK(t1.total_cost == t2.total_cost);
  double replay = 0.0;
  for (size_t k = 0; k < t1.steps.size(); ++k) {
    const auto& s1 = t1.steps[k];
    const auto& s2 = t2.steps[k];
    CHECK((s1.x - s2.x).norm() == 0.0);
    CHECK((s1.w - s2.w).norm() == 0.0);
    CHECK((s1.u_applied - s2.u_applied).norm() == 0.0);
    for (int i = 0; i < m.size(); ++i) {
      VectorXd ui = s1.u_applied.segment(m.input_offset(i),
                                         m.subsystem(i).input_dim);
      replay += stage_cost(m.neighborhood_state(i, s1.x), ui);
    }
  }
  CHECK(replay == doctest::Approx(t1.total_cost).epsilon(1e-12));
}

TEST_CASE("certified run records budgets and stays deterministic") {
  const auto& m = chain_model();
  std::mt19937 rng(2);
  VectorXd x0 = sample_initial_state(m, chain_artifacts(), 10, rng);
  SimTrace t1 = simulate(m, chain_artifacts(), {PolicyKind::kLinearFeedback},
                         ControllerKind::kCertified, 6, 10, 31, x0);
  SimTrace t2 = simulate(m, chain_artifacts(), {PolicyKind::kLinearFeedback},
                         ControllerKind::kCertified, 6, 10, 31, x0);
  CHECK(t1.state_violations == 0);
  CHECK(t1.input_violations == 0);
  CHECK(t1.total_cost == doctest::Approx(t2.total_cost).epsilon(1e-9));
  for (const auto& s : t1.steps) {
    REQUIRE(s.beta.size() == m.size());
    CHECK(s.beta.sum() <= 1.0 + 1e-9);
    CHECK(s.beta.minCoeff() >= 0.0);
    CHECK(!s.fallback);
  }
}

TEST_CASE("certification leaves a distant subsystem untouched") {
  const auto& m = chain_model();
  // push the second mass hard; mass 8 starts at rest far down the chain
  VectorXd x0 = VectorXd::Zero(m.state_dim());
  x0[0] = -0.55;
  x0[2] = -0.60;
  x0[4] = -0.55;
  SimTrace raw = simulate(m, chain_artifacts(), {PolicyKind::kLinearFeedback},
                          ControllerKind::kRaw, 20, 10, 17, x0);
  SimTrace cert = simulate(m, chain_artifacts(),
                           {PolicyKind::kLinearFeedback},
                           ControllerKind::kCertified, 20, 10, 17, x0);
  double p2raw = -2.0, p2cert = -2.0, gap8 = 0.0, gap2 = 0.0;
  for (size_t k = 0; k < raw.steps.size(); ++k) {
    p2raw = std::max(p2raw, raw.steps[k].x[2]);
    p2cert = std::max(p2cert, cert.steps[k].x[2]);
    gap8 = std::max(gap8, std::abs(raw.steps[k].u_applied[8] -
                                   cert.steps[k].u_applied[8]));
    gap2 = std::max(gap2, std::abs(raw.steps[k].u_applied[2] -
                                   cert.steps[k].u_applied[2]));
  }
  CHECK(p2raw > 0.1);           // unfiltered law overshoots the tight bound
  CHECK(p2cert <= 0.1 + 1e-9);  // filtered one does not
  CHECK(gap2 > 1e-4);           // the filter intervened near the bound
  CHECK(gap8 <= 1e-6);          // and passed the far subsystem through
  CHECK(cert.state_violations == 0);
}

TEST_CASE("trace CSV has one row per step and subsystem") {
  const auto& m = chain_model();
  VectorXd x0 = VectorXd::Zero(m.state_dim());
  SimTrace t = simulate(m, chain_artifacts(), {PolicyKind::kZero},
                        ControllerKind::kRaw, 3, 10, 1, x0);
  const std::string path = "/tmp/dmpsc_trace_test.csv";
  write_trace_csv(t, m, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("t,subsystem", 0) == 0);
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3 * m.size());
}

TEST_CASE("controller comparison is reproducible") {
  const auto& m = chain_model();
  CompareSummary s1 = compare_controllers(m, chain_artifacts(), 3, 1, 10, 8);
  CompareSummary s2 = compare_controllers(m, chain_artifacts(), 3, 1, 10, 8);
  REQUIRE(s1.cost_dmpsc1.size() == 1);
  CHECK(s1.cost_dmpsc1[0] == doctest::Approx(s2.cost_dmpsc1[0]).epsilon(1e-9));
  CHECK(s1.cost_dmpsc2[0] == doctest::Approx(s2.cost_dmpsc2[0]).epsilon(1e-9));
  CHECK(s1.cost_rdmpc[0] == doctest::Approx(s2.cost_rdmpc[0]).epsilon(1e-9));
  CHECK(s1.violations_dmpsc1 == 0);
  CHECK(s1.violations_dmpsc2 == 0);
  CHECK(s1.violations_rdmpc == 0);

  const std::string path = "/tmp/dmpsc_summary_test.json";
  write_summary_json(s1, path);
  std::ifstream in(path);
  REQUIRE(in.good());
}

TEST_CASE("median helper") {
  CHECK(median({}) == 0.0);
  CHECK(median({3.0}) == 3.0);
  CHECK(median({4.0, 1.0}) == doctest::Approx(2.5));
  CHECK(median({5.0, 1.0, 3.0}) == 3.0);
}
