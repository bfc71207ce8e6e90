#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dmpsc/bench.hpp"
#include "dmpsc/certifier.hpp"
#include "dmpsc/distsolve.hpp"
#include "dmpsc/netmodel.hpp"
#include "dmpsc/tube.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dmpsc;

namespace {

PolicyKind parse_policy(const std::string& name) {
  if (name == "linear-feedback") return PolicyKind::kLinearFeedback;
  if (name == "nominal-dmpc") return PolicyKind::kNominalDmpc;
  if (name == "zero") return PolicyKind::kZero;
  throw CLI::ValidationError("--policy", "unknown policy: " + name);
}

ControllerKind parse_controller(const std::string& name) {
  if (name == "certified") return ControllerKind::kCertified;
  if (name == "raw") return ControllerKind::kRaw;
  if (name == "rdmpc") return ControllerKind::kRdmpc;
  throw CLI::ValidationError("--controller", "unknown controller: " + name);
}

// Same stepping as simulate(), but each certification goes through the
// message bus; consensus telemetry is appended to a JSON-lines file.
SimTrace simulate_distributed(const NetworkModel& model,
                              const Artifacts& artifacts,
                              const PolicySpec& policy, int steps, int horizon,
                              unsigned seed, const Eigen::VectorXd& x0,
                              const ConsensusParams& params,
                              const std::string& telemetry_path) {
  Policy pol = make_policy(policy, model, artifacts);
  std::mt19937 rng(seed);
  std::ofstream tlm(telemetry_path);
  SimTrace trace;
  Eigen::VectorXd x = x0;
  CertSession session = init_session(model, artifacts, x0, horizon);
  std::vector<double> times;
  for (int t = 0; t < steps; ++t) {
    SimStep step;
    step.t = t;
    step.x = x;
    step.u_learn = pol(x, t);
    std::vector<ConsensusTelemetry> rounds;
    CertResult res = certify_distributed(model, artifacts, session,
                                         {x, step.u_learn}, params, &rounds);
    for (const auto& r : rounds)
      tlm << json{{"t", t},
                  {"iteration", r.iteration},
                  {"primal_residual", r.primal_residual},
                  {"dual_residual", r.dual_residual},
                  {"messages", r.messages}}
                 .dump()
          << "\n";
    step.u_applied = res.certified;
    step.beta = session.beta;
    step.alpha = session.alpha;
    step.fallback = res.fallback;
    step.solve_ms = res.solve_ms;
    times.push_back(res.solve_ms);
    step.w = sample_disturbance_global(model, rng);
    step.stage_costs = Eigen::VectorXd::Zero(model.size());
    for (int i = 0; i < model.size(); ++i) {
      Eigen::VectorXd ui = step.u_applied.segment(
          model.input_offset(i), model.subsystem(i).input_dim);
      step.stage_costs[i] = stage_cost(model.neighborhood_state(i, x), ui);
      if (!model.subsystem(i).state_constraints.contains(
              model.neighborhood_state(i, x), 1e-9))
        ++trace.state_violations;
      if (!model.subsystem(i).input_constraints.contains(ui, 1e-9))
        ++trace.input_violations;
    }
    trace.total_cost += step.stage_costs.sum();
    x = step_truth(model, x, step.u_applied, step.w);
    advance_session(model, artifacts, session, x, res);
    trace.steps.push_back(std::move(step));
  }
  trace.median_solve_ms = median(times);
  return trace;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"safety certification toolkit for coupled linear networks"};
  app.require_subcommand(1);

  std::string model_path, artifacts_path, out_path, tau_arg = "auto";
  std::string policy_name = "linear-feedback", controller_name = "certified";
  std::string solver_name = "centralized";
  int steps = 20, runs = 20, horizon = 10, samples = 10000;
  unsigned seed = 0;
  double rho = 1.0, consensus_tol = 1e-5;
  int max_iter = 500;

  auto* mk = app.add_subcommand("chain-model",
                                "write the mass chain benchmark model");
  mk->add_option("--out", out_path, "model JSON path")->required();
  mk->callback([&] {
    save_model(build_chain_benchmark({}), out_path);
    std::cout << "wrote " << out_path << "\n";
  });

  auto* synth = app.add_subcommand(
      "synth", "offline synthesis: tube, tightening, terminal set");
  synth->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  synth->add_option("--tau", tau_arg,
                    "coupling multiplier in (0,1), or 'auto' to search");
  synth->add_option("--out", out_path, "artifact JSON path")->required();
  synth->callback([&] {
    NetworkModel model = load_model(model_path);
    std::optional<double> tau;
    if (tau_arg != "auto") tau = std::stod(tau_arg);
    Artifacts art = design_artifacts(model, tau);
    save_artifacts(art, out_path);
    std::cout << "tube objective " << art.tube.objective
              << ", coupling multiplier " << art.tube.coupling_multiplier
              << ", terminal level " << art.terminal.level_budget
              << "\nwrote " << out_path << "\n";
  });

  auto* verify = app.add_subcommand(
      "verify-tube", "Monte Carlo invariance check of stored artifacts");
  verify->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  verify->add_option("--artifacts", artifacts_path)
      ->required()
      ->check(CLI::ExistingFile);
  verify->add_option("--samples", samples);
  verify->add_option("--seed", seed);
  verify->callback([&] {
    NetworkModel model = load_model(model_path);
    Artifacts art = load_artifacts(model, artifacts_path);
    int escapes = verify_rpi_monte_carlo(art.tube, model, samples, seed);
    std::cout << escapes << " of " << samples
              << " sampled errors left the tube after one step\n";
    if (escapes > 0) throw CLI::RuntimeError(1);
  });

  auto* run = app.add_subcommand("certify-run",
                                 "closed-loop run with per-step trace");
  run->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  run->add_option("--artifacts", artifacts_path)
      ->required()
      ->check(CLI::ExistingFile);
  run->add_option("--policy", policy_name,
                  "linear-feedback | nominal-dmpc | zero");
  run->add_option("--controller", controller_name,
                  "certified | raw | rdmpc");
  run->add_option("--steps", steps);
  run->add_option("--horizon", horizon);
  run->add_option("--seed", seed);
  run->add_option("--out", out_path, "output directory")->required();
  run->add_option("--solver", solver_name, "centralized | distributed");
  run->add_option("--rho", rho, "consensus penalty");
  run->add_option("--max-iter", max_iter, "consensus iteration cap");
  run->add_option("--consensus-tol", consensus_tol, "residual threshold");
  run->callback([&] {
    NetworkModel model = load_model(model_path);
    Artifacts art = load_artifacts(model, artifacts_path);
    PolicySpec policy{parse_policy(policy_name), horizon};
    ControllerKind controller = parse_controller(controller_name);
    fs::create_directories(out_path);

    std::mt19937 rng(seed);
    Eigen::VectorXd x0 = sample_initial_state(model, art, horizon, rng);
    SimTrace trace;
    if (solver_name == "distributed") {
      if (controller != ControllerKind::kCertified)
        throw CLI::ValidationError(
            "--solver", "distributed mode requires --controller certified");
      trace = simulate_distributed(model, art, policy, steps, horizon, seed,
                                   x0, {rho, max_iter, consensus_tol},
                                   out_path + "/consensus.jsonl");
    } else if (solver_name == "centralized") {
      trace = simulate(model, art, policy, controller, steps, horizon, seed,
                       x0);
    } else {
      throw CLI::ValidationError("--solver", "unknown solver: " + solver_name);
    }
    write_trace_csv(trace, model, out_path + "/trace.csv");

    json meta{{"policy", policy_name},
              {"controller", controller_name},
              {"solver", solver_name},
              {"steps", steps},
              {"horizon", horizon},
              {"seed", seed},
              {"total_cost", trace.total_cost},
              {"state_violations", trace.state_violations},
              {"input_violations", trace.input_violations},
              {"median_solve_ms", trace.median_solve_ms}};
    std::ofstream(out_path + "/run.json") << meta.dump(2) << "\n";
    std::cout << "cost " << trace.total_cost << ", violations "
              << trace.state_violations + trace.input_violations
              << ", median solve " << trace.median_solve_ms << " ms\nwrote "
              << out_path << "/trace.csv\n";
  });

  auto* cmp = app.add_subcommand(
      "compare", "certified policies vs the robust MPC baseline");
  cmp->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
  cmp->add_option("--artifacts", artifacts_path)
      ->required()
      ->check(CLI::ExistingFile);
  cmp->add_option("--runs", runs);
  cmp->add_option("--steps", steps);
  cmp->add_option("--horizon", horizon);
  cmp->add_option("--seed", seed);
  cmp->add_option("--out", out_path, "output directory")->required();
  cmp->callback([&] {
    NetworkModel model = load_model(model_path);
    Artifacts art = load_artifacts(model, artifacts_path);
    fs::create_directories(out_path);
    CompareSummary sum =
        compare_controllers(model, art, steps, runs, horizon, seed);
    write_summary_json(sum, out_path + "/summary.json");
    std::cout << "cost medians: linear-feedback+cert "
              << median(sum.cost_dmpsc1) << ", nominal-mpc+cert "
              << median(sum.cost_dmpsc2) << ", robust baseline "
              << median(sum.cost_rdmpc) << "\nwrote " << out_path
              << "/summary.json\n";
  });

  CLI11_PARSE(app, argc, argv);
  return 0;
}
