#pragma once

// nlls.hpp - Robustified nonlinear least squares on manifold blocks.
//
// A Problem owns parameter blocks (6-dof twists updated by left
// multiplication, 3-dof points updated additively) and residual terms.
// A term stacks one or more residual rows against a list of blocks;
// a diagonal information weight and an optional Huber loss apply per
// `loss_group` consecutive rows, so a stacked image term can robustify
// each correspondence on its own.
//
// solve_lm runs Levenberg-Marquardt on the robustified cost
//   E = sum_g rho(||r_g||^2_W),  rho(s) = s for s <= delta^2,
//                                rho(s) = 2 delta sqrt(s) - delta^2 above,
// via IRLS row scaling. Jacobians come from per-term callbacks or central
// finite differences in the block tangent space. Point blocks are
// eliminated with a dense Schur complement when there are enough of them.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "ctslam/errors.hpp"
#include "ctslam/lie.hpp"

namespace ctslam {

struct RobustLoss {
  bool enabled = false;
  double delta = 1.0;

  static RobustLoss None() { return RobustLoss{false, 0.0}; }
  static RobustLoss Huber(double delta = 1.0) { return RobustLoss{true, delta}; }

  /// rho(s) for squared weighted norm s.
  double rho(double s) const {
    if (!enabled || s <= delta * delta) return s;
    return 2.0 * delta * std::sqrt(s) - delta * delta;
  }

  /// rho'(s); the IRLS weight applied to the group.
  double weight(double s) const {
    if (!enabled || s <= delta * delta) return 1.0;
    return delta / std::sqrt(s);
  }
};

enum class BlockType { kTwist, kPoint };

class Problem {
 public:
  using Evaluator =
      std::function<Eigen::VectorXd(const std::vector<Eigen::VectorXd>&)>;
  // d(residual) / d(tangent of blocks[local]); twists perturb by left
  // multiplication xi <- Log(Exp(delta) Exp(xi)).
  using JacobianFn = std::function<Eigen::MatrixXd(
      const std::vector<Eigen::VectorXd>&, int local)>;

  struct Term {
    std::vector<int> blocks;
    int dim = 0;
    int loss_group = 0;  // rows per robustified group
    Evaluator evaluator;
    JacobianFn jacobian;       // optional; numeric fallback otherwise
    Eigen::VectorXd weights;   // Sigma^-1 diagonal, one entry per row
    RobustLoss loss;
  };

  int add_twist_block(const Twist& value) {
    values_.push_back(value);
    types_.push_back(BlockType::kTwist);
    frozen_.push_back(false);
    return static_cast<int>(values_.size()) - 1;
  }

  int add_point_block(const Vec3& value) {
    values_.push_back(value);
    types_.push_back(BlockType::kPoint);
    frozen_.push_back(false);
    return static_cast<int>(values_.size()) - 1;
  }

  int num_blocks() const { return static_cast<int>(values_.size()); }
  BlockType block_type(int b) const { return types_.at(b); }
  void set_frozen(int b, bool frozen) { frozen_.at(b) = frozen; }
  bool is_frozen(int b) const { return frozen_.at(b); }

  Twist twist_value(int b) const { return Twist(values_.at(b)); }
  Vec3 point_value(int b) const { return Vec3(values_.at(b)); }
  void set_twist_value(int b, const Twist& v) { values_.at(b) = v; }
  void set_point_value(int b, const Vec3& v) { values_.at(b) = v; }
  const Eigen::VectorXd& raw_value(int b) const { return values_.at(b); }

  void add_residual(std::vector<int> blocks, int dim, Evaluator evaluator,
                    Eigen::VectorXd weights, RobustLoss loss,
                    int loss_group = -1, JacobianFn jacobian = nullptr) {
    Term term;
    term.blocks = std::move(blocks);
    term.dim = dim;
    term.loss_group = loss_group > 0 ? loss_group : dim;
    if (dim % term.loss_group != 0) {
      throw Error("add_residual: loss_group must divide the residual dim");
    }
    term.evaluator = std::move(evaluator);
    term.jacobian = std::move(jacobian);
    if (weights.size() == 0) weights = Eigen::VectorXd::Ones(dim);
    if (weights.size() != dim) {
      throw Error("add_residual: weight diagonal size mismatch");
    }
    term.weights = std::move(weights);
    term.loss = loss;
    terms_.push_back(std::move(term));
  }

  const std::vector<Term>& terms() const { return terms_; }

  std::vector<Eigen::VectorXd> block_values(const Term& term) const {
    std::vector<Eigen::VectorXd> vals;
    vals.reserve(term.blocks.size());
    for (int b : term.blocks) vals.push_back(values_.at(b));
    return vals;
  }

  /// Robustified total cost at the current parameter values.
  double cost() const {
    double total = 0.0;
    for (const auto& term : terms_) {
      const Eigen::VectorXd r = term.evaluator(block_values(term));
      if (r.size() != term.dim) {
        throw Error("cost: evaluator returned wrong residual size");
      }
      total += term_cost(term, r);
    }
    return total;
  }

  double term_cost(const Term& term, const Eigen::VectorXd& r) const {
    double total = 0.0;
    for (int g = 0; g < term.dim; g += term.loss_group) {
      double s = 0.0;
      for (int i = g; i < g + term.loss_group; ++i) {
        s += term.weights[i] * r[i] * r[i];
      }
      total += term.loss.rho(s);
    }
    return total;
  }

  /// Jacobian of a term w.r.t. one of its blocks, via the term's callback or
  /// central differences in the tangent space.
  Eigen::MatrixXd term_jacobian(const Term& term, int local) const {
    const auto vals = block_values(term);
    if (term.jacobian) return term.jacobian(vals, local);
    return numeric_term_jacobian(term, vals, local, numeric_diff_step);
  }

  Eigen::MatrixXd numeric_term_jacobian(const Term& term,
                                        const std::vector<Eigen::VectorXd>& vals,
                                        int local, double h) const {
    const int block = term.blocks[local];
    const int tangent_dim = types_.at(block) == BlockType::kTwist ? 6 : 3;
    Eigen::MatrixXd J(term.dim, tangent_dim);
    std::vector<Eigen::VectorXd> scratch = vals;
    for (int m = 0; m < tangent_dim; ++m) {
      scratch[local] = perturb(types_.at(block), vals[local], m, h);
      const Eigen::VectorXd hi = term.evaluator(scratch);
      scratch[local] = perturb(types_.at(block), vals[local], m, -h);
      const Eigen::VectorXd lo = term.evaluator(scratch);
      scratch[local] = vals[local];
      J.col(m) = (hi - lo) / (2.0 * h);
    }
    return J;
  }

  static Eigen::VectorXd perturb(BlockType type, const Eigen::VectorXd& value,
                                 int coord, double h) {
    if (type == BlockType::kTwist) {
      Twist delta = Twist::Zero();
      delta[coord] = h;
      return log_map(exp_map(delta) * exp_map(Twist(value)));
    }
    Eigen::VectorXd out = value;
    out[coord] += h;
    return out;
  }

  double numeric_diff_step = 1e-6;

 private:
  std::vector<Eigen::VectorXd> values_;
  std::vector<BlockType> types_;
  std::vector<bool> frozen_;
  std::vector<Term> terms_;
};

/// @brief Plain central-difference Jacobian of a vector function.
inline Eigen::MatrixXd numeric_jacobian(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& fn,
    const Eigen::VectorXd& x0, double h = 1e-6) {
  const Eigen::VectorXd f0 = fn(x0);
  Eigen::MatrixXd J(f0.size(), x0.size());
  for (int m = 0; m < x0.size(); ++m) {
    Eigen::VectorXd xp = x0, xm = x0;
    xp[m] += h;
    xm[m] -= h;
    J.col(m) = (fn(xp) - fn(xm)) / (2.0 * h);
  }
  return J;
}

struct SolveOptions {
  int max_iterations = 50;
  double function_tolerance = 1e-12;  // relative cost decrease
  double gradient_tolerance = 1e-14;  // max-norm of J^T r
  double initial_lambda = 1e-6;
  double lambda_increase = 4.0;
  double lambda_decrease = 1.0 / 3.0;
  double min_lambda = 1e-14;
  double max_lambda = 1e10;
  int min_points_for_schur = 16;
};

struct SolveSummary {
  bool converged = false;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::string message;
};

namespace detail {

struct BlockLayout {
  std::vector<int> col_of_block;   // -1 for frozen blocks
  std::vector<int> free_blocks;
  std::vector<int> pose_cols;      // column ranges for Schur partitioning
  std::vector<int> point_cols;
  int total_cols = 0;
  int pose_dim = 0;
  int point_dim = 0;
};

inline BlockLayout layout_blocks(const Problem& problem) {
  BlockLayout lay;
  const int nb = problem.num_blocks();
  lay.col_of_block.assign(nb, -1);
  // Twist blocks first, then point blocks, so the point part forms the
  // trailing block-diagonal section eliminated by the Schur complement.
  for (int b = 0; b < nb; ++b) {
    if (problem.is_frozen(b) || problem.block_type(b) != BlockType::kTwist)
      continue;
    lay.col_of_block[b] = lay.total_cols;
    lay.free_blocks.push_back(b);
    lay.total_cols += 6;
  }
  lay.pose_dim = lay.total_cols;
  for (int b = 0; b < nb; ++b) {
    if (problem.is_frozen(b) || problem.block_type(b) != BlockType::kPoint)
      continue;
    lay.col_of_block[b] = lay.total_cols;
    lay.free_blocks.push_back(b);
    lay.total_cols += 3;
  }
  lay.point_dim = lay.total_cols - lay.pose_dim;
  return lay;
}

}  // namespace detail

/// @brief Levenberg-Marquardt with freezable manifold blocks.
///
/// Accepted steps strictly decrease the robustified cost; rejected steps
/// restore parameters exactly. Throws NumericalFailure if the initial cost
/// is not finite.
inline SolveSummary solve_lm(Problem& problem,
                             const SolveOptions& opts = SolveOptions{}) {
  SolveSummary summary;
  const detail::BlockLayout lay = detail::layout_blocks(problem);

  double cost = problem.cost();
  if (!std::isfinite(cost)) {
    throw NumericalFailure("solve_lm: initial cost is not finite");
  }
  summary.initial_cost = cost;
  summary.final_cost = cost;
  if (lay.total_cols == 0 || problem.terms().empty()) {
    summary.converged = true;
    summary.message = "nothing to optimize";
    return summary;
  }

  double lambda = opts.initial_lambda;
  Eigen::MatrixXd H(lay.total_cols, lay.total_cols);
  Eigen::VectorXd g(lay.total_cols);

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    H.setZero();
    g.setZero();

    bool assembling_ok = true;
    for (const auto& term : problem.terms()) {
      const auto vals = problem.block_values(term);
      const Eigen::VectorXd r = term.evaluator(vals);
      if (!r.allFinite()) {
        assembling_ok = false;
        break;
      }

      // IRLS row scale: sqrt(weight * rho'(s)) per row.
      Eigen::VectorXd scale(term.dim);
      for (int gstart = 0; gstart < term.dim; gstart += term.loss_group) {
        double s = 0.0;
        for (int i = gstart; i < gstart + term.loss_group; ++i) {
          s += term.weights[i] * r[i] * r[i];
        }
        const double w = term.loss.weight(s);
        for (int i = gstart; i < gstart + term.loss_group; ++i) {
          scale[i] = std::sqrt(term.weights[i] * w);
        }
      }
      const Eigen::VectorXd rs = scale.asDiagonal() * r;

      std::vector<Eigen::MatrixXd> jacobians(term.blocks.size());
      std::vector<int> live;
      for (std::size_t k = 0; k < term.blocks.size(); ++k) {
        if (lay.col_of_block[term.blocks[k]] < 0) continue;
        Eigen::MatrixXd J = problem.term_jacobian(term, static_cast<int>(k));
        if (J.rows() != term.dim || !J.allFinite()) {
          assembling_ok = false;
          break;
        }
        jacobians[k] = scale.asDiagonal() * J;
        live.push_back(static_cast<int>(k));
      }
      if (!assembling_ok) break;

      for (int ki : live) {
        const int bi = term.blocks[ki];
        const int ci = lay.col_of_block[bi];
        const int di = static_cast<int>(jacobians[ki].cols());
        g.segment(ci, di).noalias() += jacobians[ki].transpose() * rs;
        for (int kj : live) {
          const int bj = term.blocks[kj];
          // Distinct point blocks never share residual rows, so their
          // cross-terms vanish; skip the dead products.
          if (problem.block_type(bi) == BlockType::kPoint &&
              problem.block_type(bj) == BlockType::kPoint && bi != bj)
            continue;
          const int cj = lay.col_of_block[bj];
          const int dj = static_cast<int>(jacobians[kj].cols());
          H.block(ci, cj, di, dj).noalias() +=
              jacobians[ki].transpose() * jacobians[kj];
        }
      }
    }

    if (!assembling_ok) {
      throw NumericalFailure("solve_lm: non-finite residual or jacobian");
    }
    if (g.lpNorm<Eigen::Infinity>() < opts.gradient_tolerance) {
      summary.converged = true;
      summary.message = "gradient tolerance reached";
      break;
    }

    // Try steps with increasing damping until the cost decreases.
    bool accepted = false;
    while (lambda <= opts.max_lambda) {
      Eigen::VectorXd damped_diag = H.diagonal();
      for (int i = 0; i < damped_diag.size(); ++i) {
        damped_diag[i] = std::max(damped_diag[i], 1e-12);
      }

      Eigen::VectorXd step(lay.total_cols);
      const bool use_schur = lay.point_dim >= 3 * opts.min_points_for_schur &&
                             lay.pose_dim > 0;
      if (use_schur) {
        const int np = lay.pose_dim, nl = lay.point_dim;
        const auto A = H.topLeftCorner(np, np);
        const auto B = H.topRightCorner(np, nl);
        Eigen::MatrixXd BCinv(np, nl);
        Eigen::VectorXd Cinv_gc(nl);
        for (int p = 0; p < nl; p += 3) {
          Eigen::Matrix3d C = H.block(np + p, np + p, 3, 3);
          C.diagonal() += lambda * damped_diag.segment(np + p, 3);
          const Eigen::Matrix3d Cinv = C.inverse();
          BCinv.middleCols(p, 3).noalias() = B.middleCols(p, 3) * Cinv;
          Cinv_gc.segment(p, 3).noalias() = Cinv * g.segment(np + p, 3);
        }
        Eigen::MatrixXd S = A - BCinv * B.transpose();
        S.diagonal() += lambda * damped_diag.head(np);
        const Eigen::VectorXd rhs = -(g.head(np) - BCinv * g.tail(nl));
        step.head(np) = S.ldlt().solve(rhs);
        for (int p = 0; p < nl; p += 3) {
          Eigen::Matrix3d C = H.block(np + p, np + p, 3, 3);
          C.diagonal() += lambda * damped_diag.segment(np + p, 3);
          step.segment(np + p, 3) =
              C.inverse() * (-g.segment(np + p, 3) -
                             B.middleCols(p, 3).transpose() * step.head(np));
        }
      } else {
        Eigen::MatrixXd Hd = H;
        Hd.diagonal() += lambda * damped_diag;
        step = Hd.ldlt().solve(-g);
      }

      if (!step.allFinite()) {
        lambda *= opts.lambda_increase;
        continue;
      }

      // Apply the candidate update on a copy of the block values.
      std::vector<std::pair<int, Eigen::VectorXd>> backup;
      backup.reserve(lay.free_blocks.size());
      bool applied = true;
      try {
        for (int b : lay.free_blocks) {
          backup.emplace_back(b, problem.raw_value(b));
          const int c = lay.col_of_block[b];
          if (problem.block_type(b) == BlockType::kTwist) {
            const Twist delta = step.segment<6>(c);
            problem.set_twist_value(
                b, log_map(exp_map(delta) * exp_map(problem.twist_value(b))));
          } else {
            problem.set_point_value(
                b, Vec3(problem.point_value(b) + Vec3(step.segment<3>(c))));
          }
        }
      } catch (const Error&) {
        applied = false;
      }

      double new_cost = std::numeric_limits<double>::infinity();
      if (applied) {
        try {
          new_cost = problem.cost();
        } catch (const Error&) {
          new_cost = std::numeric_limits<double>::infinity();
        }
      }

      if (std::isfinite(new_cost) && new_cost < cost) {
        const double decrease = cost - new_cost;
        cost = new_cost;
        lambda = std::max(lambda * opts.lambda_decrease, opts.min_lambda);
        accepted = true;
        summary.iterations = iter + 1;
        if (decrease <= opts.function_tolerance * std::max(cost, 1e-300)) {
          summary.converged = true;
          summary.message = "function tolerance reached";
        }
        break;
      }

      // Reject: restore values exactly and raise damping.
      for (const auto& [b, v] : backup) {
        if (problem.block_type(b) == BlockType::kTwist) {
          problem.set_twist_value(b, Twist(v));
        } else {
          problem.set_point_value(b, Vec3(v));
        }
      }
      lambda *= opts.lambda_increase;
    }

    if (!accepted) {
      summary.converged = true;
      summary.message = "no decreasing step found";
      break;
    }
    if (summary.converged) break;
  }

  if (summary.message.empty()) summary.message = "max iterations reached";
  summary.final_cost = cost;
  return summary;
}

}  // namespace ctslam
