#pragma once

#include <vector>

#include <Eigen/Dense>

#include "dmpsc/netmodel.hpp"
#include "dmpsc/tube.hpp"

namespace dmpsc {

// Structured terminal set {z : sum_i z_i' P_{f,i} z_i <= alpha} with the
// terminal law u_i = K_{f,i} z_{N_i} and time-varying local levels.
struct TerminalIngredients {
  std::vector<Eigen::MatrixXd> shape_blocks;  // P_{f,i}
  std::vector<Eigen::MatrixXd> gains;         // K_{f,i}, m_i x n_{N_i}
  std::vector<Eigen::MatrixXd> relaxation;    // Gamma_{N_i}, symmetric
  double level_budget = 0.0;                  // alpha_bar
  Eigen::VectorXd initial_levels;             // alpha_i(0)
  Eigen::MatrixXd global_shape;               // assembled P_f
  Eigen::MatrixXd global_gain;                // assembled K_f
};

// Solves a block-structured Lyapunov LMI against the tightened constraints
// and sizes the largest admissible level budget.
TerminalIngredients synthesize_terminal(const NetworkModel& model,
                                        const TightenedConstraints& tightened);

// alpha_i(t+1) = max(0, alpha_i(t) + z_{N_i}' Gamma_{N_i} z_{N_i}) with z
// the global terminal iterate.  Throws on negative input levels.
Eigen::VectorXd update_alpha(const TerminalIngredients& ingredients,
                             const NetworkModel& model,
                             const Eigen::VectorXd& alpha,
                             const Eigen::VectorXd& z);

bool check_terminal_membership(const Eigen::VectorXd& z_i,
                               const Eigen::MatrixXd& shape, double alpha_i);

}  // namespace dmpsc
