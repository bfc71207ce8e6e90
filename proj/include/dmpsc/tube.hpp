#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "dmpsc/netmodel.hpp"

namespace dmpsc {

// Structured ellipsoidal invariant tube {e : e'Pe <= 1} with block-diagonal
// P and neighborhood-structured error feedback u_i = K_i e_{N_i}.
struct StructuredTube {
  std::vector<Eigen::MatrixXd> shape_blocks;    // P_i
  std::vector<Eigen::MatrixXd> inverse_blocks;  // E_i = P_i^-1
  std::vector<Eigen::MatrixXd> gains;           // K_i, m_i x n_{N_i}
  Eigen::VectorXd multipliers;                  // tau_i
  double coupling_multiplier = 0.0;             // tau_{M+1}
  double objective = 0.0;                       // sum of squared supports
  Eigen::MatrixXd global_shape;                 // assembled P
  Eigen::MatrixXd global_gain;                  // assembled K, m x n
};

struct TightenedConstraints {
  std::vector<Polytope> state;  // per subsystem, neighborhood coordinates
  std::vector<Polytope> input;
};

// Invariance synthesis by semidefinite programming.  If tau_fixed is absent
// a line search over the scalar coupling multiplier in (0, 1) picks the
// value with the smallest tightening objective.
StructuredTube synthesize_tube(const NetworkModel& model,
                               std::optional<double> tau_fixed = std::nullopt);

// Samples e uniformly in the tube and w_i uniformly in each W_i, steps the
// closed-loop error dynamics once, and counts samples that leave the tube.
int verify_rpi_monte_carlo(const StructuredTube& tube,
                           const NetworkModel& model, int samples,
                           unsigned seed);

// Neighborhood shape blocks P_{N_i} with subsystem i's own diagonal block
// equal to P_i and everything else zero; their lifted sum reproduces the
// global quadratic form exactly.
std::vector<Eigen::MatrixXd> project_to_conte_form(const StructuredTube& tube,
                                                   const NetworkModel& model);

// Pulls each constraint row in by the support of the tube ellipsoid (state
// rows) or its image under the tube feedback (input rows).  Throws if any
// offset becomes nonpositive.
TightenedConstraints tighten_constraints(const NetworkModel& model,
                                         const StructuredTube& tube);

}  // namespace dmpsc
