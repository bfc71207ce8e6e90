#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "dmpsc/netmodel.hpp"
#include "dmpsc/tube.hpp"

using Eigen::MatrixXd;
using Eigen::VectorXd;
using namespace dmpsc;

namespace {

NetworkModel scalar_model(double a, double q, double xmax = 10.0,
                          double umax = 10.0) {
  SubsystemSpec s;
  s.state_dim = 1;
  s.input_dim = 1;
  s.disturbance_dim = 1;
  s.coupling[0] = MatrixXd::Constant(1, 1, a);
  s.input_matrix = MatrixXd::Identity(1, 1);
  s.disturbance_matrix = MatrixXd::Identity(1, 1);
  s.state_constraints =
      Polytope::box(-xmax * VectorXd::Ones(1), xmax * VectorXd::Ones(1));
  s.input_constraints =
      Polytope::box(-umax * VectorXd::Ones(1), umax * VectorXd::Ones(1));
  s.disturbance_set = {MatrixXd::Identity(1, 1), q};
  return NetworkModel({s});
}

const NetworkModel& chain_model() {
  static NetworkModel m = build_chain_benchmark({});
  return m;
}

const StructuredTube& chain_tube() {
  static StructuredTube t = synthesize_tube(chain_model(), 0.055);
  return t;
}

// Maximize c'e over {e : e'Pe <= 1} by projected gradient ascent after a
// spectral change of variables that turns the ellipsoid into the unit ball.
double support_oracle(const VectorXd& c, const MatrixXd& p) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(p);
  VectorXd g = es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
               (es.eigenvectors().transpose() * c);
  VectorXd y = VectorXd::Zero(c.size());
  y[0] = 1.0;
  double best = 0.0;
  for (int it = 0; it < 500; ++it) {
    y += 0.5 * g;
    if (y.norm() > 1.0) y /= y.norm();
    best = std::max(best, g.dot(y));
  }
  return best;
}

}  // namespace

TEST_CASE("synthesize: scalar system against interval-recursion oracle") {
  const double a = 0.8, q = 0.04;
  NetworkModel model = scalar_model(a, q);
  StructuredTube tube = synthesize_tube(model, 0.5);
  REQUIRE(tube.shape_blocks.size() == 1);
  double p = tube.shape_blocks[0](0, 0);
  double k = tube.gains[0](0, 0);
  double acl = std::abs(a + k);
  REQUIRE(acl < 1.0);
  // minimal invariant interval radius for |w| <= sqrt(q)
  double radius = std::sqrt(q) / (1.0 - acl);
  CHECK(1.0 / std::sqrt(p) >= radius - 1e-7);
  CHECK(tube.multipliers[0] >= 0.0);
}

TEST_CASE("synthesize: zero-disturbance scalar is feasible") {
  NetworkModel model = scalar_model(0.5, 0.0);
  StructuredTube tube = synthesize_tube(model, 0.3);
  CHECK(tube.shape_blocks[0](0, 0) > 0.0);
  CHECK(verify_rpi_monte_carlo(tube, model, 2000, 1) == 0);
}

TEST_CASE("synthesize: invalid coupling multiplier rejected") {
  NetworkModel model = scalar_model(0.5, 0.01);
  CHECK_THROWS_AS(synthesize_tube(model, 1.5), std::invalid_argument);
}

TEST_CASE("synthesize: nine-mass chain feasible and contained") {
  const StructuredTube& tube = chain_tube();
  REQUIRE(tube.shape_blocks.size() == 9);
  CHECK(tube.objective > 0.0);
  for (const auto& p : tube.shape_blocks) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(p);
    CHECK(es.eigenvalues().minCoeff() > 0.0);
  }
  // containment in the state constraints comes out as a nonempty tightening
  TightenedConstraints tc = tighten_constraints(chain_model(), tube);
  for (const auto& poly : tc.state) CHECK(poly.offsets.minCoeff() > 0.0);
  for (const auto& poly : tc.input) CHECK(poly.offsets.minCoeff() > 0.0);
}

TEST_CASE("gain structure: zero outside neighborhood columns") {
  const StructuredTube& tube = chain_tube();
  const NetworkModel& model = chain_model();
  for (int i = 0; i < model.size(); ++i) {
    MatrixXd row = tube.global_gain.middleRows(model.input_offset(i), 1);
    for (int j = 0; j < model.size(); ++j) {
      const auto& nb = model.neighbors(i);
      bool neighbor = std::binary_search(nb.begin(), nb.end(), j);
      double mass = row.middleCols(model.state_offset(j), 2).norm();
      if (!neighbor) CHECK(mass == 0.0);
    }
  }
}

TEST_CASE("monte carlo: valid chain tube has zero violations") {
  CHECK(verify_rpi_monte_carlo(chain_tube(), chain_model(), 10000, 42) == 0);
}

TEST_CASE("monte carlo: corrupted tube is caught") {
  StructuredTube bad = chain_tube();
  bad.global_shape *= 100.0;
  for (auto& p : bad.shape_blocks) p *= 100.0;
  CHECK(verify_rpi_monte_carlo(bad, chain_model(), 10000, 42) > 0);
}

TEST_CASE("conte projection: single subsystem is identity") {
  NetworkModel model = scalar_model(0.5, 0.01);
  StructuredTube tube = synthesize_tube(model, 0.3);
  auto blocks = project_to_conte_form(tube, model);
  REQUIRE(blocks.size() == 1);
  CHECK((blocks[0] - tube.shape_blocks[0]).norm() < 1e-14);
}

TEST_CASE("conte projection: lifted sum reproduces the global form") {
  const StructuredTube& tube = chain_tube();
  const NetworkModel& model = chain_model();
  auto blocks = project_to_conte_form(tube, model);
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  VectorXd e(model.state_dim());
  for (int trial = 0; trial < 10; ++trial) {
    for (int k = 0; k < e.size(); ++k) e[k] = unif(rng);
    double total = 0.0;
    for (int i = 0; i < model.size(); ++i) {
      VectorXd en = model.neighborhood_state(i, e);
      total += en.dot(blocks[i] * en);
    }
    CHECK(total ==
          doctest::Approx(e.dot(tube.global_shape * e)).epsilon(1e-10));
  }
  // exactly one nonzero diagonal block per neighborhood
  for (int i = 0; i < model.size(); ++i) {
    int off = model.neighborhood_offset(i, i);
    MatrixXd copy = blocks[i];
    copy.block(off, off, 2, 2).setZero();
    CHECK(copy.norm() == 0.0);
  }
}

TEST_CASE("tighten: interval support") {
  // |x| <= 1 with tube 4e^2 <= 1 leaves |z| <= 0.5
  NetworkModel model = scalar_model(0.5, 0.01, 1.0);
  StructuredTube tube = synthesize_tube(model, 0.3);
  tube.global_shape = MatrixXd::Constant(1, 1, 4.0);
  tube.shape_blocks[0] = tube.global_shape;
  tube.global_gain.setZero();
  TightenedConstraints tc = tighten_constraints(model, tube);
  CHECK(tc.state[0].offsets[0] == doctest::Approx(0.5));
  CHECK(tc.state[0].offsets[1] == doctest::Approx(0.5));
}

TEST_CASE("tighten: unit-ball tube empties a unit box") {
  NetworkModel model = scalar_model(0.5, 0.01, 1.0);
  StructuredTube tube = synthesize_tube(model, 0.3);
  tube.global_shape = MatrixXd::Identity(1, 1);
  tube.global_gain.setZero();
  CHECK_THROWS_AS(tighten_constraints(model, tube), std::runtime_error);
}

TEST_CASE("tighten: offsets match a projected-gradient support oracle") {
  const StructuredTube& tube = chain_tube();
  const NetworkModel& model = chain_model();
  TightenedConstraints tc = tighten_constraints(model, tube);
  for (int i : {0, 1, 4}) {
    const auto& orig = model.subsystem(i).state_constraints;
    MatrixXd w = model.neighborhood_selector(i);
    for (int r = 0; r < orig.size(); ++r) {
      VectorXd lifted = (orig.rows.row(r) * w).transpose();
      double sup = support_oracle(lifted, tube.global_shape);
      CHECK(tc.state[i].offsets[r] ==
            doctest::Approx(orig.offsets[r] - sup).epsilon(1e-4));
    }
  }
}

TEST_CASE("tighten: sampled soundness of the tightened state set") {
  const StructuredTube& tube = chain_tube();
  const NetworkModel& model = chain_model();
  TightenedConstraints tc = tighten_constraints(model, tube);
  Eigen::LLT<MatrixXd> llt(tube.global_shape);
  std::mt19937 rng(17);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  // tightened rows are signed unit vectors, so read per-coordinate bounds
  const int n = model.state_dim();
  VectorXd lo(n), hi(n);
  for (int i = 0; i < model.size(); ++i) {
    const auto& poly = tc.state[i];
    MatrixXd w = model.neighborhood_selector(i);
    for (int r = 0; r < poly.size(); ++r) {
      Eigen::RowVectorXd lifted = poly.rows.row(r) * w;
      int coord;
      lifted.cwiseAbs().maxCoeff(&coord);
      if (lifted[coord] > 0.0)
        hi[coord] = poly.offsets[r];
      else
        lo[coord] = -poly.offsets[r];
    }
  }
  int checked = 0;
  for (int trial = 0; trial < 1200; ++trial) {
    VectorXd z(n);
    for (int k = 0; k < n; ++k) z[k] = lo[k] + unif(rng) * (hi[k] - lo[k]);
    bool inside = true;
    for (int i = 0; i < model.size() && inside; ++i)
      inside = tc.state[i].contains(model.neighborhood_state(i, z));
    if (!inside) continue;
    VectorXd u(n);
    for (int k = 0; k < n; ++k) u[k] = gauss(rng);
    u = u / u.norm() * std::pow(unif(rng), 1.0 / n);
    VectorXd e = llt.matrixU().solve(u);
    ++checked;
    CHECK(model.global_state_constraints().contains(z + e, 1e-7));
  }
  CHECK(checked >= 1000);
}

TEST_CASE("monotonicity: smaller disturbance never widens the tube") {
  double base = chain_tube().objective;
  ChainParams prm;
  prm.disturbance_level *= 0.25;
  StructuredTube small = synthesize_tube(build_chain_benchmark(prm), 0.055);
  CHECK(small.objective <= base + 1e-6);
}

TEST_CASE("local level split: any nonnegative split stays invariant") {
  const StructuredTube& tube = chain_tube();
  const NetworkModel& model = chain_model();
  MatrixXd acl = model.global_a() + model.global_b() * tube.global_gain;
  std::mt19937 rng(23);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int M = model.size();
  for (int trial = 0; trial < 300; ++trial) {
    VectorXd beta(M);
    double total = 0.0;
    for (int i = 0; i < M; ++i) {
      beta[i] = -std::log(unif(rng));
      total += beta[i];
    }
    beta *= unif(rng) / total;  // nonnegative, sum <= 1
    VectorXd e(model.state_dim()), w(model.disturbance_dim());
    for (int i = 0; i < M; ++i) {
      VectorXd u(2);
      u << gauss(rng), gauss(rng);
      u = u / u.norm() * std::pow(unif(rng), 0.5);
      Eigen::LLT<MatrixXd> llt(tube.shape_blocks[i]);
      e.segment(2 * i, 2) = llt.matrixU().solve(u) * std::sqrt(beta[i]);
      VectorXd v(2);
      v << gauss(rng), gauss(rng);
      v = v / v.norm() * std::pow(unif(rng), 0.5);
      w.segment(2 * i, 2) = v * std::sqrt(1.1e-3);
    }
    VectorXd enext = acl * e + model.global_g() * w;
    CHECK(enext.dot(tube.global_shape * enext) <= 1.0 + 1e-9);
  }
}
