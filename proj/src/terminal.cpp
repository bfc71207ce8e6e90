#include "dmpsc/terminal.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "dmpsc/sdp.hpp"

namespace dmpsc {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kDecrease = 1e-4;   // contraction margin of the terminal law
constexpr double kLevelSlack = 1e-9;

int vech_count(int n) { return n * (n + 1) / 2; }

int vech_index(int n, int r, int c) {
  if (r < c) std::swap(r, c);
  return c * n - c * (c - 1) / 2 + (r - c);
}

MatrixXd sym_basis(int n, int r, int c) {
  MatrixXd s = MatrixXd::Zero(n, n);
  s(r, c) = 1.0;
  s(c, r) = 1.0;
  return s;
}

struct BlockBuilder {
  int dim;
  MatrixXd f0;
  std::map<int, MatrixXd> terms;

  explicit BlockBuilder(int d) : dim(d), f0(MatrixXd::Zero(d, d)) {}
  MatrixXd& at(int v) {
    auto it = terms.find(v);
    if (it == terms.end())
      it = terms.emplace(v, MatrixXd::Zero(dim, dim)).first;
    return it->second;
  }
  void flush(SdpProblem& p, std::string tag) {
    SdpBlock& b = p.add_block(dim, std::move(tag));
    b.f0 = f0;
    for (auto& [v, m] : terms) {
      b.var.push_back(v);
      b.coeff.push_back(std::move(m));
    }
  }
};

}  // namespace

TerminalIngredients synthesize_terminal(
    const NetworkModel& model, const TightenedConstraints& tightened) {
  const int M = model.size();
  const int n = model.state_dim();

  std::vector<int> e_base(M), y_base(M);
  int idx = 0;
  for (int i = 0; i < M; ++i) {
    e_base[i] = idx;
    idx += vech_count(model.subsystem(i).state_dim);
    y_base[i] = idx;
    idx += model.subsystem(i).input_dim * model.neighborhood_dim(i);
  }
  const int s_idx = idx++;

  SdpProblem prob;
  prob.nvar = idx;
  prob.cost = VectorXd::Zero(idx);
  prob.cost[s_idx] = 1.0;

  // Normalization trace(E) = n pins the scale the Lyapunov LMI leaves free.
  prob.eq_a = MatrixXd::Zero(1, idx);
  prob.eq_b = VectorXd::Constant(1, static_cast<double>(n));
  for (int i = 0; i < M; ++i) {
    const int ni = model.subsystem(i).state_dim;
    for (int r = 0; r < ni; ++r)
      prob.eq_a(0, e_base[i] + vech_index(ni, r, r)) = 1.0;
  }

  // Contraction: [[(1-eps)E, (AE+BY)'], [AE+BY, E]] >= 0 with block
  // diagonal E and neighborhood-structured Y.
  {
    BlockBuilder lmi(2 * n);
    for (int i = 0; i < M; ++i) {
      const int ni = model.subsystem(i).state_dim;
      const int xo = model.state_offset(i);
      for (int r = 0; r < ni; ++r)
        for (int c = 0; c <= r; ++c) {
          MatrixXd s = sym_basis(ni, r, c);
          MatrixXd& cm = lmi.at(e_base[i] + vech_index(ni, r, c));
          cm.block(xo, xo, ni, ni) += (1.0 - kDecrease) * s;
          cm.block(n + xo, n + xo, ni, ni) += s;
          // column block of A E touching E_i: rows j with i in N_j
          for (int j = 0; j < M; ++j) {
            const auto& cj = model.subsystem(j).coupling;
            auto it = cj.find(i);
            if (it == cj.end()) continue;
            MatrixXd as = it->second * s;
            cm.block(n + model.state_offset(j), xo,
                     model.subsystem(j).state_dim, ni) += as;
            cm.block(xo, n + model.state_offset(j), ni,
                     model.subsystem(j).state_dim) += as.transpose();
          }
        }
      const int mi = model.subsystem(i).input_dim;
      const int nbh = model.neighborhood_dim(i);
      for (int t = 0; t < mi; ++t) {
        int col = 0;
        for (int j : model.neighbors(i)) {
          const int nj = model.subsystem(j).state_dim;
          for (int c = 0; c < nj; ++c) {
            MatrixXd& cm = lmi.at(y_base[i] + t * nbh + col + c);
            VectorXd b = model.subsystem(i).input_matrix.col(t);
            cm.block(n + model.state_offset(i), model.state_offset(j) + c,
                     b.size(), 1) += b;
            cm.block(model.state_offset(j) + c, n + model.state_offset(i), 1,
                     b.size()) += b.transpose();
          }
          col += nj;
        }
      }
    }
    lmi.f0.diagonal().array() -= 1e-9;
    lmi.flush(prob, "contraction");
  }

  // State rows: c E_{N_i} c' <= s * offset^2.
  for (int i = 0; i < M; ++i) {
    const auto& poly = tightened.state[i];
    for (int r = 0; r < poly.size(); ++r) {
      BlockBuilder blk(1);
      blk.at(s_idx)(0, 0) = poly.offsets[r] * poly.offsets[r];
      int off = 0;
      for (int j : model.neighbors(i)) {
        const int nj = model.subsystem(j).state_dim;
        VectorXd seg = poly.rows.row(r).segment(off, nj).transpose();
        for (int rr = 0; rr < nj; ++rr)
          for (int cc = 0; cc <= rr; ++cc)
            blk.at(e_base[j] + vech_index(nj, rr, cc))(0, 0) -=
                seg.transpose() * sym_basis(nj, rr, cc) * seg;
        off += nj;
      }
      blk.flush(prob, "xrow_" + std::to_string(i) + "_" + std::to_string(r));
    }
  }

  // Input rows: Schur form of o Y E_{N_i}^-1 Y' o' <= s * offset^2.
  for (int i = 0; i < M; ++i) {
    const auto& poly = tightened.input[i];
    const int nbh = model.neighborhood_dim(i);
    const int mi = model.subsystem(i).input_dim;
    for (int r = 0; r < poly.size(); ++r) {
      BlockBuilder blk(1 + nbh);
      blk.at(s_idx)(0, 0) = poly.offsets[r] * poly.offsets[r];
      for (int t = 0; t < mi; ++t) {
        double ot = poly.rows(r, t);
        if (ot == 0.0) continue;
        for (int c = 0; c < nbh; ++c) {
          MatrixXd& cm = blk.at(y_base[i] + t * nbh + c);
          cm(0, 1 + c) += ot;
          cm(1 + c, 0) += ot;
        }
      }
      int off = 0;
      for (int j : model.neighbors(i)) {
        const int nj = model.subsystem(j).state_dim;
        for (int rr = 0; rr < nj; ++rr)
          for (int cc = 0; cc <= rr; ++cc)
            blk.at(e_base[j] + vech_index(nj, rr, cc))
                .block(1 + off, 1 + off, nj, nj) += sym_basis(nj, rr, cc);
        off += nj;
      }
      blk.flush(prob, "urow_" + std::to_string(i) + "_" + std::to_string(r));
    }
  }

  SdpOptions opts;
  opts.gap_tol = 1e-9;
  SdpResult res = solve_sdp(prob, opts);
  if (!res.feasible)
    throw std::runtime_error("terminal synthesis infeasible (" + res.message +
                             ")");

  TerminalIngredients out;
  out.shape_blocks.resize(M);
  out.gains.resize(M);
  out.relaxation.resize(M);
  out.global_shape = MatrixXd::Zero(n, n);
  out.global_gain = MatrixXd::Zero(model.input_dim(), n);
  std::vector<MatrixXd> e_blocks(M);
  for (int i = 0; i < M; ++i) {
    const int ni = model.subsystem(i).state_dim;
    MatrixXd e(ni, ni);
    for (int r = 0; r < ni; ++r)
      for (int c = 0; c <= r; ++c)
        e(r, c) = e(c, r) = res.x[e_base[i] + vech_index(ni, r, c)];
    e_blocks[i] = e;
    out.shape_blocks[i] = e.llt().solve(MatrixXd::Identity(ni, ni));
    out.global_shape.block(model.state_offset(i), model.state_offset(i), ni,
                           ni) = out.shape_blocks[i];
  }
  for (int i = 0; i < M; ++i) {
    const int mi = model.subsystem(i).input_dim;
    const int nbh = model.neighborhood_dim(i);
    MatrixXd y(mi, nbh);
    for (int t = 0; t < mi; ++t)
      for (int c = 0; c < nbh; ++c) y(t, c) = res.x[y_base[i] + t * nbh + c];
    // K_{f,i} = Y_i E_{N_i}^-1 blockwise
    int off = 0;
    for (int j : model.neighbors(i)) {
      const int nj = model.subsystem(j).state_dim;
      y.middleCols(off, nj) =
          y.middleCols(off, nj) *
          e_blocks[j].llt().solve(MatrixXd::Identity(nj, nj));
      off += nj;
    }
    out.gains[i] = y;
    out.global_gain.middleRows(model.input_offset(i), mi) =
        y * model.neighborhood_selector(i);
  }

  // Largest level budget keeping the set inside the tightened constraints.
  double alpha = 1e300;
  for (int i = 0; i < M; ++i) {
    const auto& poly = tightened.state[i];
    const int nbh = model.neighborhood_dim(i);
    MatrixXd e_nbh = MatrixXd::Zero(nbh, nbh);
    int off = 0;
    for (int j : model.neighbors(i)) {
      const int nj = model.subsystem(j).state_dim;
      e_nbh.block(off, off, nj, nj) = e_blocks[j];
      off += nj;
    }
    for (int r = 0; r < poly.size(); ++r) {
      VectorXd c = poly.rows.row(r).transpose();
      double sup2 = c.dot(e_nbh * c);
      if (sup2 > 0.0)
        alpha = std::min(alpha, poly.offsets[r] * poly.offsets[r] / sup2);
    }
    const auto& upoly = tightened.input[i];
    MatrixXd kw = out.gains[i];
    for (int r = 0; r < upoly.size(); ++r) {
      VectorXd o = (upoly.rows.row(r) * kw).transpose();
      double sup2 = o.dot(e_nbh * o);
      if (sup2 > 0.0)
        alpha = std::min(alpha, upoly.offsets[r] * upoly.offsets[r] / sup2);
    }
  }
  out.level_budget = alpha * (1.0 - kLevelSlack);
  out.initial_levels = VectorXd::Constant(M, out.level_budget / M);

  // Per-neighborhood decrease residuals: the lifted sum equals
  // Acl' P_f Acl - P_f by construction.
  for (int i = 0; i < M; ++i) {
    const int ni = model.subsystem(i).state_dim;
    const int nbh = model.neighborhood_dim(i);
    MatrixXd a_nbh = MatrixXd::Zero(ni, nbh);
    int off = 0;
    for (int j : model.neighbors(i)) {
      const int nj = model.subsystem(j).state_dim;
      a_nbh.middleCols(off, nj) = model.subsystem(i).coupling.at(j);
      off += nj;
    }
    MatrixXd acl = a_nbh + model.subsystem(i).input_matrix * out.gains[i];
    MatrixXd own = MatrixXd::Zero(ni, nbh);
    own.middleCols(model.neighborhood_offset(i, i), ni).setIdentity();
    out.relaxation[i] = acl.transpose() * out.shape_blocks[i] * acl -
                        own.transpose() * out.shape_blocks[i] * own;
  }
  return out;
}

VectorXd update_alpha(const TerminalIngredients& ingredients,
                      const NetworkModel& model, const VectorXd& alpha,
                      const VectorXd& z) {
  if (alpha.minCoeff() < 0.0)
    throw std::invalid_argument("negative terminal levels");
  VectorXd next(alpha.size());
  for (int i = 0; i < model.size(); ++i) {
    VectorXd zn = model.neighborhood_state(i, z);
    next[i] = std::max(0.0, alpha[i] + zn.dot(ingredients.relaxation[i] * zn));
  }
  return next;
}

bool check_terminal_membership(const VectorXd& z_i, const MatrixXd& shape,
                               double alpha_i) {
  return z_i.dot(shape * z_i) <= alpha_i + kMembershipSlack;
}

}  // namespace dmpsc
