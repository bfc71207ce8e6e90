#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dmpsc {

// Affine semidefinite constraint  F0 + sum_j x[var[j]] * coeff[j]  >= 0.
// A block of dimension 1 is an ordinary scalar inequality.
struct SdpBlock {
  int dim = 0;
  Eigen::MatrixXd f0;
  std::vector<int> var;
  std::vector<Eigen::MatrixXd> coeff;
  std::string tag;

  Eigen::MatrixXd eval(const Eigen::VectorXd& x) const;
};

// minimize cost'x  s.t.  blocks PSD,  eq_a x = eq_b.
struct SdpProblem {
  int nvar = 0;
  Eigen::VectorXd cost;
  std::vector<SdpBlock> blocks;
  Eigen::MatrixXd eq_a;  // may have zero rows
  Eigen::VectorXd eq_b;

  SdpBlock& add_block(int dim, std::string tag = {});
  // Scalar inequality  a'x + b >= 0.
  void add_scalar(const std::vector<int>& idx, const Eigen::VectorXd& a,
                  double b, std::string tag = {});
};

struct SdpOptions {
  double gap_tol = 1e-9;       // target duality-gap proxy m/t
  double interior_margin = 1e-7;  // phase-I slack needed to accept a start
  double mu = 20.0;
  int max_newton = 4000;
  bool verbose = false;
};

struct SdpResult {
  bool feasible = false;
  Eigen::VectorXd x;
  double objective = 0.0;
  double phase1_slack = 0.0;   // best-attempt infeasibility measure
  int newton_steps = 0;
  std::string message;
};

SdpResult solve_sdp(const SdpProblem& prob, const SdpOptions& opts = {});

}  // namespace dmpsc
