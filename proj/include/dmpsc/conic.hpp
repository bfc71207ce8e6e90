#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dmpsc {

// Sparse linear form  coef'(x at idx).
struct LinearTerm {
  std::vector<int> idx;
  Eigen::VectorXd coef;

  double eval(const Eigen::VectorXd& x) const;
};

// coef'(x at idx) == rhs   or   <= rhs, depending on which list it sits in.
struct LinearConstraint {
  LinearTerm a;
  double rhs = 0.0;
  int owner = -1;
  std::string tag;

  double violation(const Eigen::VectorXd& x) const { return a.eval(x) - rhs; }
};

// (x at idx)' shape (x at idx) + lin'(x at idx) <= rhs, shape PSD.
struct QuadraticConstraint {
  std::vector<int> idx;
  Eigen::MatrixXd shape;
  Eigen::VectorXd lin;
  double rhs = 0.0;
  int owner = -1;
  std::string tag;

  double violation(const Eigen::VectorXd& x) const;
};

// minimize (1/2) x'Q x + c'x + c0  subject to the constraint lists.
struct ConicProgram {
  int nvar = 0;
  Eigen::MatrixXd q;
  Eigen::VectorXd c;
  double c0 = 0.0;
  std::vector<LinearConstraint> eq;
  std::vector<LinearConstraint> ineq;
  std::vector<QuadraticConstraint> qineq;

  void init_objective();  // size q, c to nvar after nvar is final
  double objective(const Eigen::VectorXd& x) const;
  // Largest constraint violation (equalities by magnitude).
  double max_violation(const Eigen::VectorXd& x) const;
};

enum class SolveStatus { kOptimal, kInfeasible, kError };

struct ConicOptions {
  double gap_tol = 1e-11;
  double interior_margin = 1e-9;
  double mu = 50.0;
  int max_newton = 8000;
};

struct ConicResult {
  SolveStatus status = SolveStatus::kError;
  Eigen::VectorXd x;
  double objective = 0.0;
  double phase1_slack = 0.0;
  int newton_steps = 0;
  std::string message;
};

ConicResult solve_conic(const ConicProgram& prog, const ConicOptions& opts = {});

// Phase-I only: find a strictly feasible point, or report infeasibility.
ConicResult solve_feasibility(const ConicProgram& prog,
                              const ConicOptions& opts = {});

}  // namespace dmpsc
