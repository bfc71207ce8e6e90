#include "dmpsc/distsolve.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>
#include <stdexcept>

namespace dmpsc {

using Eigen::VectorXd;

namespace {

// subsystem whose variable block contains global index g
int owner_of_var(const CertLayout& lay, int g) {
  for (int i = static_cast<int>(lay.z_base.size()) - 1; i >= 0; --i)
    if (g >= lay.z_base[i]) return i;
  throw std::out_of_range("variable index outside the layout");
}

template <typename C>
C remap(const C& src, const std::map<int, int>& local_of_global) {
  C dst = src;
  for (size_t k = 0; k < dst.idx.size(); ++k)
    dst.idx[k] = local_of_global.at(dst.idx[k]);
  return dst;
}

LinearConstraint remap_lin(const LinearConstraint& src,
                           const std::map<int, int>& m) {
  LinearConstraint dst = src;
  for (size_t k = 0; k < dst.a.idx.size(); ++k)
    dst.a.idx[k] = m.at(dst.a.idx[k]);
  return dst;
}

}  // namespace

Partition partition_program(const ConicProgram& prog,
                            const NetworkModel& model,
                            const CertLayout& lay) {
  const int M = model.size();
  std::vector<std::set<int>> used(M);
  auto note = [&](int owner, const std::vector<int>& idx) {
    if (owner < 0 || owner >= M)
      throw std::invalid_argument("constraint without a valid owner");
    for (int g : idx) {
      int holder = owner_of_var(lay, g);
      const auto& nb = model.neighbors(owner);
      if (!std::binary_search(nb.begin(), nb.end(), holder))
        throw std::invalid_argument(
            "constraint of agent " + std::to_string(owner) +
            " references non-neighbor " + std::to_string(holder));
      used[owner].insert(g);
    }
  };
  for (const auto& e : prog.eq) note(e.owner, e.a.idx);
  for (const auto& l : prog.ineq) note(l.owner, l.a.idx);
  for (const auto& qc : prog.qineq) note(qc.owner, qc.idx);
  for (int i = 0; i < M; ++i)
    for (int g = lay.z_base[i]; g <= lay.dbeta_idx[i]; ++g) used[i].insert(g);

  Partition part;
  part.agents.resize(M);
  for (int i = 0; i < M; ++i) {
    AgentProblem& ag = part.agents[i];
    ag.agent = i;
    ag.global_of_local.assign(used[i].begin(), used[i].end());
    for (size_t l = 0; l < ag.global_of_local.size(); ++l)
      ag.local_of_global[ag.global_of_local[l]] = static_cast<int>(l);
    ag.local.nvar = static_cast<int>(ag.global_of_local.size());
    ag.owned.resize(ag.global_of_local.size());
    for (size_t l = 0; l < ag.global_of_local.size(); ++l)
      ag.owned[l] = owner_of_var(lay, ag.global_of_local[l]) == i;
    ag.local.init_objective();
    for (size_t l = 0; l < ag.global_of_local.size(); ++l) {
      int g = ag.global_of_local[l];
      if (owner_of_var(lay, g) != i) continue;
      ag.local.c[l] = prog.c[g];
      for (size_t l2 = 0; l2 < ag.global_of_local.size(); ++l2) {
        int g2 = ag.global_of_local[l2];
        if (owner_of_var(lay, g2) == i) ag.local.q(l, l2) = prog.q(g, g2);
      }
    }
    if (i == 0) ag.local.c0 = prog.c0;
  }
  for (const auto& e : prog.eq)
    part.agents[e.owner].local.eq.push_back(
        remap_lin(e, part.agents[e.owner].local_of_global));
  for (const auto& l : prog.ineq)
    part.agents[l.owner].local.ineq.push_back(
        remap_lin(l, part.agents[l.owner].local_of_global));
  for (const auto& qc : prog.qineq)
    part.agents[qc.owner].local.qineq.push_back(
        remap(qc, part.agents[qc.owner].local_of_global));

  for (int i = 0; i < M; ++i)
    for (int j : model.neighbors(i)) {
      if (j <= i) continue;
      EdgeShare es;
      es.a = i;
      es.b = j;
      std::set_intersection(used[i].begin(), used[i].end(), used[j].begin(),
                            used[j].end(), std::back_inserter(es.global_idx));
      if (!es.global_idx.empty()) part.edges.push_back(std::move(es));
    }
  return part;
}

ConicProgram reassemble(const Partition& part, const ConicProgram& reference) {
  ConicProgram out;
  out.nvar = reference.nvar;
  out.init_objective();
  for (const auto& ag : part.agents) {
    out.c0 += ag.local.c0;
    for (int l = 0; l < ag.local.nvar; ++l) {
      int g = ag.global_of_local[l];
      out.c[g] += ag.local.c[l];
      for (int l2 = 0; l2 < ag.local.nvar; ++l2)
        out.q(g, ag.global_of_local[l2]) += ag.local.q(l, l2);
    }
    auto back = [&](std::vector<int>& idx) {
      for (int& k : idx) k = ag.global_of_local[k];
    };
    for (auto e : ag.local.eq) {
      back(e.a.idx);
      out.eq.push_back(std::move(e));
    }
    for (auto l : ag.local.ineq) {
      back(l.a.idx);
      out.ineq.push_back(std::move(l));
    }
    for (auto qc : ag.local.qineq) {
      back(qc.idx);
      out.qineq.push_back(std::move(qc));
    }
  }
  return out;
}

MessageBus::MessageBus(const NetworkModel& model) {
  adjacency_.resize(model.size());
  for (int i = 0; i < model.size(); ++i) adjacency_[i] = model.neighbors(i);
}

void MessageBus::send(Message msg) {
  if (msg.from < 0 || msg.to < 0 ||
      msg.from >= static_cast<int>(adjacency_.size()) ||
      msg.to >= static_cast<int>(adjacency_.size()) || msg.from == msg.to ||
      !std::binary_search(adjacency_[msg.from].begin(),
                          adjacency_[msg.from].end(), msg.to))
    throw std::invalid_argument("message outside the neighborhood graph");
  pending_.push_back(msg);
  log_.push_back(std::move(msg));
}

std::vector<Message> MessageBus::receive(int to, int iteration) {
  std::vector<Message> got;
  auto keep = pending_.begin();
  for (auto it = pending_.begin(); it != pending_.end(); ++it) {
    if (it->to == to && it->iteration == iteration)
      got.push_back(std::move(*it));
    else
      *keep++ = std::move(*it);
  }
  pending_.erase(keep, pending_.end());
  return got;
}

long MessageBus::messages_between(int a, int b) const {
  long n = 0;
  for (const auto& m : log_)
    if ((m.from == a && m.to == b) || (m.from == b && m.to == a)) ++n;
  return n;
}

DistResult run_consensus(const ConicProgram& prog, const Partition& part,
                         MessageBus& bus, const ConsensusParams& params) {
  const int M = static_cast<int>(part.agents.size());
  const double rho = params.rho;
  DistResult res;

  // local programs with the proximal diagonal folded in once
  std::vector<ConicProgram> local(M);
  for (int i = 0; i < M; ++i) local[i] = part.agents[i].local;
  for (const auto& e : part.edges)
    for (int g : e.global_idx) {
      local[e.a].q(part.agents[e.a].local_of_global.at(g),
                   part.agents[e.a].local_of_global.at(g)) += rho;
      local[e.b].q(part.agents[e.b].local_of_global.at(g),
                   part.agents[e.b].local_of_global.at(g)) += rho;
    }

  std::vector<VectorXd> xloc(M);
  for (int i = 0; i < M; ++i) xloc[i] = VectorXd::Zero(local[i].nvar);
  const int ne = static_cast<int>(part.edges.size());
  std::vector<VectorXd> zc(ne), dual_a(ne), dual_b(ne);
  for (int e = 0; e < ne; ++e) {
    zc[e] = VectorXd::Zero(part.edges[e].global_idx.size());
    dual_a[e] = zc[e];
    dual_b[e] = zc[e];
  }

  bool converged = false;
  for (int iter = 1; iter <= params.max_iter && !converged; ++iter) {
    for (int i = 0; i < M; ++i) {
      VectorXd c = part.agents[i].local.c;
      for (int e = 0; e < ne; ++e) {
        const EdgeShare& es = part.edges[e];
        if (es.a != i && es.b != i) continue;
        const VectorXd& u = es.a == i ? dual_a[e] : dual_b[e];
        for (size_t k = 0; k < es.global_idx.size(); ++k)
          c[part.agents[i].local_of_global.at(es.global_idx[k])] -=
              rho * (zc[e][k] - u[k]);
      }
      local[i].c = c;
      ConicResult lr = solve_conic(local[i]);
      if (lr.status != SolveStatus::kOptimal) {
        res.status = lr.status;
        res.message = "agent " + std::to_string(i) + ": " + lr.message;
        res.iterations = iter;
        return res;
      }
      xloc[i] = lr.x;
    }

    double primal2 = 0.0, dual2 = 0.0;
    for (int e = 0; e < ne; ++e) {
      const EdgeShare& es = part.edges[e];
      const int ns = static_cast<int>(es.global_idx.size());
      VectorXd xa(ns), xb(ns);
      for (int k = 0; k < ns; ++k) {
        xa[k] = xloc[es.a][part.agents[es.a].local_of_global.at(
            es.global_idx[k])];
        xb[k] = xloc[es.b][part.agents[es.b].local_of_global.at(
            es.global_idx[k])];
      }
      bus.send({iter, es.a, es.b, "consensus", xa + dual_a[e]});
      bus.send({iter, es.b, es.a, "consensus", xb + dual_b[e]});
      VectorXd from_a = bus.receive(es.b, iter)[0].payload;
      VectorXd from_b = bus.receive(es.a, iter)[0].payload;
      VectorXd znew = 0.5 * (from_a + from_b);
      dual2 += 2.0 * rho * rho * (znew - zc[e]).squaredNorm();
      zc[e] = znew;
      dual_a[e] += xa - znew;
      dual_b[e] += xb - znew;
      primal2 += (xa - znew).squaredNorm() + (xb - znew).squaredNorm();
    }
    double primal = std::sqrt(primal2);
    double dual = std::sqrt(dual2);
    res.telemetry.push_back(
        {iter, primal, dual, static_cast<long>(bus.log().size())});
    res.iterations = iter;
    converged = primal <= params.tol && dual <= params.tol;
  }

  // owner copies assemble the global point; neighbor copies agree with them
  // up to the consensus tolerance
  res.x = VectorXd::Zero(prog.nvar);
  for (int i = 0; i < M; ++i)
    for (int l = 0; l < local[i].nvar; ++l)
      if (part.agents[i].owned[l])
        res.x[part.agents[i].global_of_local[l]] = xloc[i][l];
  res.objective = prog.objective(res.x);
  if (converged) {
    res.status = SolveStatus::kOptimal;
  } else {
    res.status = SolveStatus::kError;
    res.message = "consensus not converged (primal " +
                  std::to_string(res.telemetry.empty()
                                     ? -1.0
                                     : res.telemetry.back().primal_residual) +
                  ")";
  }
  return res;
}

CertResult certify_distributed(const NetworkModel& model,
                               const Artifacts& artifacts,
                               const CertSession& session,
                               const CertRequest& request,
                               const ConsensusParams& params,
                               std::vector<ConsensusTelemetry>* telemetry) {
  const auto t0 = std::chrono::steady_clock::now();
  CertLayout lay = make_cert_layout(model, session.horizon);
  ConicProgram prog = build_program(model, artifacts, session, request, lay);
  Partition part = partition_program(prog, model, lay);
  MessageBus bus(model);
  DistResult dr = run_consensus(prog, part, bus, params);
  if (telemetry) *telemetry = dr.telemetry;
  if (dr.status == SolveStatus::kOptimal) {
    CertResult out = unpack_result(model, lay, dr.x);
    out.status = SolveStatus::kOptimal;
    out.objective = std::max(0.0, dr.objective);
    out.solve_ms = std::chrono::duration<double, std::milli>(
                       std::chrono::steady_clock::now() - t0)
                       .count();
    return out;
  }
  // infeasible, or consensus stalled: the centralized path settles it
  return certify(model, artifacts, session, request);
}

ConsensusReport compare_with_centralized(const NetworkModel& model,
                                         const Artifacts& artifacts,
                                         const CertSession& session,
                                         const CertRequest& request,
                                         const ConsensusParams& params) {
  ConsensusReport rep;
  CertResult cent = certify(model, artifacts, session, request);
  std::vector<ConsensusTelemetry> tel;
  CertResult dist =
      certify_distributed(model, artifacts, session, request, params, &tel);
  rep.centralized_status = cent.status;
  rep.distributed_status = dist.status;
  rep.iterations = tel.empty() ? 0 : tel.back().iteration;
  if (cent.status == SolveStatus::kOptimal &&
      dist.status == SolveStatus::kOptimal) {
    rep.input_gap = (dist.certified - cent.certified).norm() /
                    std::max(1.0, cent.certified.norm());
    rep.objective_gap = std::abs(dist.objective - cent.objective) /
                        std::max(1.0, std::abs(cent.objective));
  }
  return rep;
}

}  // namespace dmpsc
