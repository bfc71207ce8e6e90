#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dmpsc {

// Absolute slack used by all set-membership tests.
inline constexpr double kMembershipSlack = 1e-9;

// {x : rows x <= offsets}, origin in the interior (offsets > 0).
struct Polytope {
  Eigen::MatrixXd rows;
  Eigen::VectorXd offsets;

  int dim() const { return static_cast<int>(rows.cols()); }
  int size() const { return static_cast<int>(rows.rows()); }
  bool contains(const Eigen::VectorXd& x,
                double slack = kMembershipSlack) const;
  // Scale every row to unit Euclidean norm, offsets rescaled to match.
  void normalize();
  static Polytope box(const Eigen::VectorXd& lo, const Eigen::VectorXd& hi);
};

// {v : v' shape v <= level}.
struct Ellipsoid {
  Eigen::MatrixXd shape;
  double level = 0.0;

  int dim() const { return static_cast<int>(shape.rows()); }
  bool contains(const Eigen::VectorXd& v,
                double slack = kMembershipSlack) const;
};

struct SubsystemSpec {
  int state_dim = 0;
  int input_dim = 0;
  int disturbance_dim = 0;
  std::map<int, Eigen::MatrixXd> coupling;  // A_ij keyed by neighbor j
  Eigen::MatrixXd input_matrix;             // B_i
  Eigen::MatrixXd disturbance_matrix;       // G_i
  Polytope state_constraints;               // over neighborhood coordinates
  Polytope input_constraints;
  Ellipsoid disturbance_set;
};

// Immutable after construction; derived index maps and global matrices are
// built once in the constructor.
class NetworkModel {
 public:
  explicit NetworkModel(std::vector<SubsystemSpec> subsystems);

  int size() const { return static_cast<int>(subs_.size()); }
  const SubsystemSpec& subsystem(int i) const { return subs_[i]; }
  const std::vector<int>& neighbors(int i) const { return neighborhoods_[i]; }

  int state_dim() const { return n_; }
  int input_dim() const { return m_; }
  int disturbance_dim() const { return p_; }
  int state_offset(int i) const { return state_off_[i]; }
  int input_offset(int i) const { return input_off_[i]; }
  int disturbance_offset(int i) const { return dist_off_[i]; }
  int neighborhood_dim(int i) const { return nbh_dim_[i]; }
  // Offset of subsystem j's states inside x_{N_i}; j must neighbor i.
  int neighborhood_offset(int i, int j) const;

  // Lifting maps: T_i x = x_i, W_i x = x_{N_i}.
  Eigen::MatrixXd state_selector(int i) const;
  Eigen::MatrixXd neighborhood_selector(int i) const;
  Eigen::VectorXd local_state(int i, const Eigen::VectorXd& x) const;
  Eigen::VectorXd neighborhood_state(int i, const Eigen::VectorXd& x) const;

  const Eigen::MatrixXd& global_a() const { return a_; }
  const Eigen::MatrixXd& global_b() const { return b_; }
  const Eigen::MatrixXd& global_g() const { return g_; }
  // Stacked lifted neighborhood rows: the global X of Eq-form Hx <= h.
  const Polytope& global_state_constraints() const { return global_x_; }
  const Polytope& global_input_constraints() const { return global_u_; }

 private:
  std::vector<SubsystemSpec> subs_;
  std::vector<std::vector<int>> neighborhoods_;
  std::vector<int> state_off_, input_off_, dist_off_, nbh_dim_;
  int n_ = 0, m_ = 0, p_ = 0;
  Eigen::MatrixXd a_, b_, g_;
  Polytope global_x_, global_u_;
};

// Every violated admissibility assumption, one message per violation.
std::vector<std::string> validate(const NetworkModel& model);

// One step of the disturbed ground-truth dynamics x+ = Ax + Bu + Gw,
// assembled blockwise.  Throws if dimensions mismatch or any w_i leaves W_i.
Eigen::VectorXd step_truth(const NetworkModel& model, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& u, const Eigen::VectorXd& w);

struct ChainParams {
  int masses = 9;
  double mass = 1.0;
  double spring = 0.1;
  double damper = 0.1;
  double dt = 0.2;
  double position_bound = 1.0;
  double velocity_bound = 1.0;
  double input_bound = 5.0;
  // -1 <= p_2 <= 0.1 override for the second mass
  bool tight_second_mass = true;
  double disturbance_level = 1.1e-3;
};

// Mass-spring-damper chain, forward-Euler discretized, free ends.
NetworkModel build_chain_benchmark(const ChainParams& params);

// JSON model files; the loader rejects files that fail validate().
NetworkModel load_model(const std::string& path);
void save_model(const NetworkModel& model, const std::string& path);

}  // namespace dmpsc
