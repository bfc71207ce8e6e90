#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dmpsc/certifier.hpp"
#include "dmpsc/conic.hpp"
#include "dmpsc/netmodel.hpp"

namespace dmpsc {

// One agent's share of the certification program.  Local variable k maps to
// global index global_of_local[k]; constraints are re-indexed accordingly.
struct AgentProblem {
  int agent = -1;
  ConicProgram local;
  std::vector<int> global_of_local;
  std::map<int, int> local_of_global;
  std::vector<bool> owned;  // per local var: true unless a neighbor copy
};

// Variables two adjacent agents both reference, in global indices.
struct EdgeShare {
  int a = -1, b = -1;  // a < b
  std::vector<int> global_idx;
};

struct Partition {
  std::vector<AgentProblem> agents;
  std::vector<EdgeShare> edges;
};

// Splits the program by constraint owner; shared symbols are the variables
// appearing in two adjacent agents' subproblems.  Throws if a constraint
// reaches outside its owner's neighborhood.
Partition partition_program(const ConicProgram& prog,
                            const NetworkModel& model,
                            const CertLayout& layout);

// Rebuilds one program from the pieces, for reassembly checks.
ConicProgram reassemble(const Partition& part, const ConicProgram& reference);

struct Message {
  int iteration = 0;
  int from = -1, to = -1;
  std::string block;
  Eigen::VectorXd payload;
};

// Per-edge ordered reliable channels; delivery only along graph edges.
class MessageBus {
 public:
  explicit MessageBus(const NetworkModel& model);

  void send(Message msg);                       // throws off-edge sends
  std::vector<Message> receive(int to, int iteration);
  const std::vector<Message>& log() const { return log_; }
  long messages_between(int a, int b) const;

 private:
  std::vector<std::vector<int>> adjacency_;
  std::vector<Message> pending_;
  std::vector<Message> log_;
};

struct ConsensusParams {
  double rho = 1.0;
  int max_iter = 500;
  double tol = 1e-5;  // primal and dual residual threshold
};

struct ConsensusTelemetry {
  int iteration = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  long messages = 0;
};

struct DistResult {
  SolveStatus status = SolveStatus::kError;
  Eigen::VectorXd x;
  double objective = 0.0;
  int iterations = 0;
  std::vector<ConsensusTelemetry> telemetry;
  std::string message;
};

// Synchronous consensus rounds: exact local solves, edge-wise averaging with
// scaled duals.  Deterministic for fixed parameters.
DistResult run_consensus(const ConicProgram& prog, const Partition& part,
                         MessageBus& bus, const ConsensusParams& params = {});

// certify() over the message bus; falls back to the centralized path when
// consensus does not converge.
CertResult certify_distributed(const NetworkModel& model,
                               const Artifacts& artifacts,
                               const CertSession& session,
                               const CertRequest& request,
                               const ConsensusParams& params = {},
                               std::vector<ConsensusTelemetry>* telemetry =
                                   nullptr);

struct ConsensusReport {
  double input_gap = 0.0;      // relative |u_dist - u_cent|
  double objective_gap = 0.0;  // relative objective difference
  int iterations = 0;
  SolveStatus centralized_status = SolveStatus::kError;
  SolveStatus distributed_status = SolveStatus::kError;
};

ConsensusReport compare_with_centralized(const NetworkModel& model,
                                         const Artifacts& artifacts,
                                         const CertSession& session,
                                         const CertRequest& request,
                                         const ConsensusParams& params = {});

}  // namespace dmpsc
