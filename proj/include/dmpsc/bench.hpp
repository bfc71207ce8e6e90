#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dmpsc/certifier.hpp"

namespace dmpsc {

enum class PolicyKind { kZero, kLinearFeedback, kNominalDmpc };

struct PolicySpec {
  PolicyKind kind = PolicyKind::kZero;
  int horizon = 10;  // lookahead of the nominal MPC surrogate
};

// global state + step index -> stacked proposed inputs
using Policy = std::function<Eigen::VectorXd(const Eigen::VectorXd&, int)>;

Policy make_policy(const PolicySpec& spec, const NetworkModel& model,
                   const Artifacts& artifacts);

// Uniform sample from {w : w' shape w <= level}; boundary mode samples the
// surface instead.
Eigen::VectorXd sample_disturbance(const Ellipsoid& set, std::mt19937& rng,
                                   bool boundary = false);
Eigen::VectorXd sample_disturbance_global(const NetworkModel& model,
                                          std::mt19937& rng,
                                          bool boundary = false);

// l_i = 0.5 |x_{N_i}|^2 + |u_i|^2
double stage_cost(const Eigen::VectorXd& x_nbh, const Eigen::VectorXd& u);

enum class ControllerKind { kCertified, kRaw, kRdmpc };

struct SimStep {
  int t = 0;
  Eigen::VectorXd x, u_learn, u_applied, w;
  Eigen::VectorXd beta, alpha;         // empty for raw runs
  bool fallback = false;
  Eigen::VectorXd stage_costs;         // per subsystem
  double solve_ms = 0.0;
};

struct SimTrace {
  std::vector<SimStep> steps;
  double total_cost = 0.0;
  int state_violations = 0;
  int input_violations = 0;
  double median_solve_ms = 0.0;
};

SimTrace simulate(const NetworkModel& model, const Artifacts& artifacts,
                  const PolicySpec& policy, ControllerKind controller,
                  int steps, int horizon, unsigned seed,
                  const Eigen::VectorXd& x0);

void write_trace_csv(const SimTrace& trace, const NetworkModel& model,
                     const std::string& path);

struct CompareSummary {
  // one accumulated cost and one median per-step solver time per run
  std::vector<double> cost_dmpsc1, cost_dmpsc2, cost_rdmpc;
  std::vector<double> ms_dmpsc1, ms_dmpsc2, ms_rdmpc;
  int violations_dmpsc1 = 0, violations_dmpsc2 = 0, violations_rdmpc = 0;
};

CompareSummary compare_controllers(const NetworkModel& model,
                                   const Artifacts& artifacts, int steps,
                                   int runs, int horizon, unsigned seed);

void write_summary_json(const CompareSummary& summary,
                        const std::string& path);

// initial state with positions uniform in 60% of the position box and zero
// velocities, re-drawn until the certified session initializes
Eigen::VectorXd sample_initial_state(const NetworkModel& model,
                                     const Artifacts& artifacts, int horizon,
                                     std::mt19937& rng);

double median(std::vector<double> values);

}  // namespace dmpsc
