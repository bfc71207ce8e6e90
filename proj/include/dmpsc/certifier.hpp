#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dmpsc/conic.hpp"
#include "dmpsc/netmodel.hpp"
#include "dmpsc/terminal.hpp"
#include "dmpsc/tube.hpp"

namespace dmpsc {

// Everything the online certifier needs from the offline synthesis stage.
struct Artifacts {
  StructuredTube tube;
  TightenedConstraints tightened;
  TerminalIngredients terminal;
  std::vector<Eigen::MatrixXd> nbh_shapes;  // P_{N_i}
};

// Runs the full offline pipeline: tube, tightening, terminal set.
Artifacts design_artifacts(const NetworkModel& model,
                           std::optional<double> tau = std::nullopt);

void save_artifacts(const Artifacts& artifacts, const std::string& path);
Artifacts load_artifacts(const NetworkModel& model, const std::string& path);

// Index layout of the certification program, grouped by subsystem so the
// distributed solver can partition on it.
struct CertLayout {
  int horizon = 0;
  int total = 0;
  std::vector<int> z_base, v_base, u_base, beta_idx, dbeta_idx;

  int z_index(int i, int k, int comp, const NetworkModel& m) const {
    return z_base[i] + k * m.subsystem(i).state_dim + comp;
  }
  int v_index(int i, int k, int comp, const NetworkModel& m) const {
    return v_base[i] + k * m.subsystem(i).input_dim + comp;
  }
};

CertLayout make_cert_layout(const NetworkModel& model, int horizon);

struct CertRequest {
  Eigen::VectorXd state;     // measured global x(t)
  Eigen::VectorXd proposed;  // stacked u_L
};

struct CertSession {
  int horizon = 0;
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  Eigen::MatrixXd candidate_z;  // n x (N+1), shifted backup trajectory
  Eigen::MatrixXd candidate_v;  // m x N
  std::vector<bool> fallback_history;
};

struct CertResult {
  SolveStatus status = SolveStatus::kError;
  bool fallback = false;
  Eigen::VectorXd certified;  // stacked certified inputs
  Eigen::MatrixXd z;          // n x (N+1)
  Eigen::MatrixXd v;          // m x N
  Eigen::VectorXd beta_tilde;
  Eigen::VectorXd delta_beta;
  double objective = 0.0;
  double solve_ms = 0.0;
};

// The online program: minimize sum_i |u_L_i - u_i|^2 over nominal
// trajectories confined to the tightened sets, a tube-membership constraint
// on the initial state, budget negotiation rows, and terminal level sets.
ConicProgram build_program(const NetworkModel& model,
                           const Artifacts& artifacts,
                           const CertSession& session,
                           const CertRequest& request,
                           const CertLayout& layout);

// Reads trajectories, certified inputs, and budgets out of a decision vector
// of the program.
CertResult unpack_result(const NetworkModel& model, const CertLayout& layout,
                         const Eigen::VectorXd& x);

// Solves the program; on infeasibility falls back to the stored candidate
// input and flags it.  Does not advance the session.
CertResult certify(const NetworkModel& model, const Artifacts& artifacts,
                   const CertSession& session, const CertRequest& request);

// Starts a session with uniform budget and level splits; throws if x0 lies
// outside the implicit safe set of the program.
CertSession init_session(const NetworkModel& model, const Artifacts& artifacts,
                         const Eigen::VectorXd& x0, int horizon);

// Budget and level recursion plus the shifted backup candidate.
void advance_session(const NetworkModel& model, const Artifacts& artifacts,
                     CertSession& session, const Eigen::VectorXd& x_next,
                     const CertResult& result);

}  // namespace dmpsc
