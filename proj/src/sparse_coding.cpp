#include "headsvd/sparse_coding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/QR>
#include <spdlog/spdlog.h>

namespace headsvd {

namespace {

constexpr double kEarlyStopResidual = 1e-6;

// Least-squares solve restricted to the columns in `passive`.
Vector solve_passive(const Matrix& a, const Vector& b, const std::vector<Eigen::Index>& passive) {
  Matrix sub(a.rows(), static_cast<Eigen::Index>(passive.size()));
  for (std::size_t i = 0; i < passive.size(); ++i) sub.col(static_cast<Eigen::Index>(i)) = a.col(passive[i]);
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(sub);
  return cod.solve(b);
}

struct Pursuit {
  std::vector<int> support;
  std::vector<double> coefficients;
  std::vector<double> trace;
  double residual_norm = 0.0;
};

bool selectable(std::span<const std::uint8_t> excluded, const std::vector<int>& support, Eigen::Index j) {
  if (!excluded.empty() && excluded[static_cast<std::size_t>(j)]) return false;
  return std::find(support.begin(), support.end(), static_cast<int>(j)) == support.end();
}

Matrix gather_rows(const Matrix& dict, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), dict.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = dict.row(rows[i]);
  return out;
}

void refit(Pursuit& p, const Matrix& dict, const Vector& target) {
  const Matrix basis = gather_rows(dict, p.support);
  const Vector z = nnls(basis, target);
  p.coefficients.assign(z.data(), z.data() + z.size());
  p.residual_norm = (target - basis.transpose() * z).norm();
  p.trace.push_back(p.residual_norm);
}

Pursuit greedy_pursuit(const Vector& target, const Matrix& dict, bool coherent, int k, double lambda,
                       std::span<const std::uint8_t> excluded) {
  Pursuit p;
  p.residual_norm = target.norm();
  Vector residual = target;
  Vector selected_sum = Vector::Zero(dict.cols());

  for (int step = 0; step < k; ++step) {
    if (p.residual_norm < kEarlyStopResidual) break;
    Vector scores = dict * residual;
    if (coherent && !p.support.empty()) {
      const Vector coherence = dict * (selected_sum / static_cast<double>(p.support.size()));
      scores += lambda * coherence;
    }
    Eigen::Index best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < scores.size(); ++j) {
      if (!std::isfinite(scores(j))) throw NumericalError("non-finite score for concept " + std::to_string(j));
      if (!selectable(excluded, p.support, j)) continue;
      if (best < 0 || scores(j) > best_score) {
        best = j;
        best_score = scores(j);
      }
    }
    if (best < 0) break;
    p.support.push_back(static_cast<int>(best));
    selected_sum += dict.row(best).transpose();
    refit(p, dict, target);
    residual = target - gather_rows(dict, p.support).transpose() *
                            Eigen::Map<const Vector>(p.coefficients.data(),
                                                     static_cast<Eigen::Index>(p.coefficients.size()));
  }
  return p;
}

Pursuit top_k(const Vector& target, const Matrix& dict, int k, std::span<const std::uint8_t> excluded) {
  const Vector scores = dict * target;
  std::vector<int> candidates;
  for (Eigen::Index j = 0; j < scores.size(); ++j) {
    if (!std::isfinite(scores(j))) throw NumericalError("non-finite score for concept " + std::to_string(j));
    if (excluded.empty() || !excluded[static_cast<std::size_t>(j)]) candidates.push_back(static_cast<int>(j));
  }
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(k), candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n), candidates.end(),
                    [&](int a, int b) { return scores(a) > scores(b) || (scores(a) == scores(b) && a < b); });
  Pursuit p;
  p.support.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n));
  if (p.support.empty()) {
    p.residual_norm = target.norm();
    return p;
  }
  refit(p, dict, target);
  return p;
}

Pursuit run(const Vector& target, const Matrix& dict, Method method, int k, double lambda,
            std::span<const std::uint8_t> excluded) {
  switch (method) {
    case Method::topk:
      return top_k(target, dict, k, excluded);
    case Method::nnomp:
      return greedy_pursuit(target, dict, false, k, 0.0, excluded);
    case Method::comp:
      return greedy_pursuit(target, dict, true, k, lambda, excluded);
  }
  throw ValidationError("unknown method");
}

}  // namespace

const char* to_string(Method m) {
  switch (m) {
    case Method::topk:
      return "topk";
    case Method::nnomp:
      return "nnomp";
    case Method::comp:
      return "comp";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "topk") return Method::topk;
  if (s == "nnomp") return Method::nnomp;
  if (s == "comp") return Method::comp;
  throw ValidationError("method must be one of topk, nnomp, comp; got '" + s + "'");
}

Vector nnls(const Matrix& basis, const Vector& target) {
  const Eigen::Index k = basis.rows();
  if (k < 1) throw ValidationError("nnls needs at least one basis row");
  if (basis.cols() != target.size()) throw ValidationError("nnls basis and target dimensions differ");
  if (!basis.allFinite() || !target.allFinite()) throw ValidationError("nnls inputs must be finite");

  const Matrix a = basis.transpose();  // d x k
  const double tol = 10.0 * std::numeric_limits<double>::epsilon() * a.cwiseAbs().colwise().sum().maxCoeff() *
                     static_cast<double>(std::max(a.rows(), a.cols()));
  const int max_pivots = 3 * static_cast<int>(k);

  Vector z = Vector::Zero(k);
  std::vector<bool> in_passive(static_cast<std::size_t>(k), false);
  std::vector<bool> blocked(static_cast<std::size_t>(k), false);
  int pivots = 0;

  auto passive_list = [&] {
    std::vector<Eigen::Index> p;
    for (Eigen::Index i = 0; i < k; ++i)
      if (in_passive[static_cast<std::size_t>(i)]) p.push_back(i);
    return p;
  };

  while (true) {
    const Vector w = a.transpose() * (target - a * z);
    Eigen::Index j = -1;
    double wmax = tol;
    for (Eigen::Index i = 0; i < k; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      if (!in_passive[ui] && !blocked[ui] && w(i) > wmax) {
        wmax = w(i);
        j = i;
      }
    }
    if (j < 0) break;
    if (++pivots > max_pivots) throw NumericalError("nnls exceeded " + std::to_string(max_pivots) + " active-set pivots");
    in_passive[static_cast<std::size_t>(j)] = true;

    bool first = true;
    while (true) {
      const auto passive = passive_list();
      const Vector s = solve_passive(a, target, passive);
      bool feasible = true;
      for (Eigen::Index i = 0; i < s.size(); ++i)
        if (s(i) <= 0) feasible = false;
      if (feasible) {
        z.setZero();
        for (std::size_t i = 0; i < passive.size(); ++i) z(passive[i]) = s(static_cast<Eigen::Index>(i));
        std::fill(blocked.begin(), blocked.end(), false);
        break;
      }
      if (first) {
        // The entering column cannot take a positive weight (numerical
        // degeneracy); undo and keep it out until the passive set changes.
        const auto pos = static_cast<std::size_t>(std::find(passive.begin(), passive.end(), j) - passive.begin());
        if (s(static_cast<Eigen::Index>(pos)) <= 0) {
          in_passive[static_cast<std::size_t>(j)] = false;
          blocked[static_cast<std::size_t>(j)] = true;
          break;
        }
      }
      first = false;
      if (++pivots > max_pivots)
        throw NumericalError("nnls exceeded " + std::to_string(max_pivots) + " active-set pivots");
      double alpha = 1.0;
      for (std::size_t i = 0; i < passive.size(); ++i) {
        const double si = s(static_cast<Eigen::Index>(i));
        const double zi = z(passive[i]);
        if (si <= 0) alpha = std::min(alpha, zi / (zi - si));
      }
      for (std::size_t i = 0; i < passive.size(); ++i) {
        const Eigen::Index p = passive[i];
        z(p) += alpha * (s(static_cast<Eigen::Index>(i)) - z(p));
        if (z(p) <= tol) {
          z(p) = 0.0;
          in_passive[static_cast<std::size_t>(p)] = false;
        }
      }
      if (passive_list().empty()) break;
    }
  }
  return z.cwiseMax(0.0);
}

Decomposition decompose(const Vector& target, const Matrix& centered_dict, Method method, int k, double lambda,
                        std::span<const std::uint8_t> excluded) {
  const auto c = centered_dict.rows();
  if (k < 1) throw ValidationError("K must be at least 1");
  if (k > c) throw ValidationError("K = " + std::to_string(k) + " exceeds dictionary size " + std::to_string(c));
  if (!(lambda >= 0)) throw ValidationError("lambda must be nonnegative");
  if (target.size() != centered_dict.cols()) throw ValidationError("target and dictionary dimensions differ");
  if (!target.allFinite()) throw ValidationError("non-finite target");
  if (!excluded.empty() && static_cast<Eigen::Index>(excluded.size()) != c)
    throw ValidationError("exclusion mask length does not match dictionary size");

  const Pursuit pos = run(target, centered_dict, method, k, lambda, excluded);
  const Pursuit neg = run(-target, centered_dict, method, k, lambda, excluded);
  const bool use_neg = neg.residual_norm < pos.residual_norm;
  const Pursuit& best = use_neg ? neg : pos;

  Decomposition d;
  d.method = method;
  d.lambda = method == Method::comp ? lambda : 0.0;
  d.support = best.support;
  d.coefficients = best.coefficients;
  d.residual_norm = best.residual_norm;
  d.residual_trace = best.trace;
  d.orientation = use_neg ? -1 : 1;
  return d;
}

Vector reconstruct(const Decomposition& d, const Matrix& centered_dict) {
  Vector r = Vector::Zero(centered_dict.cols());
  for (std::size_t i = 0; i < d.support.size(); ++i)
    r += d.coefficients[i] * centered_dict.row(d.support[i]).transpose();
  return r;
}

double recompute_residual(const Decomposition& d, const Matrix& centered_dict, const Vector& target) {
  return (static_cast<double>(d.orientation) * target - reconstruct(d, centered_dict)).norm();
}

double fidelity_multimodal(const Decomposition& d, const Matrix& centered_dict, const Vector& target) {
  const Vector rec = reconstruct(d, centered_dict);
  const double rn = rec.norm();
  if (d.support.empty() || rn == 0.0) {
    spdlog::warn("empty reconstruction; fidelity set to 0");
    return 0.0;
  }
  const double tn = target.norm();
  if (tn == 0.0) return 0.0;
  return static_cast<double>(d.orientation) * target.dot(rec) / (tn * rn);
}

Fidelity fidelity(const Decomposition& d, const Matrix& centered_dict, const ProjectionContext& ctx,
                  const Vector& original_residual_vec) {
  const Vector rec = reconstruct(d, centered_dict);
  const double rn = rec.norm();
  if (d.support.empty() || rn == 0.0) {
    spdlog::warn("empty reconstruction; fidelity set to 0");
    return {};
  }
  Fidelity f;
  f.multimodal = fidelity_multimodal(d, centered_dict, to_multimodal(original_residual_vec, ctx));
  const Vector back = back_project(rec / rn, ctx);
  const Vector oriented = static_cast<double>(d.orientation) * original_residual_vec;
  f.residual = oriented.dot(back) / oriented.norm();
  return f;
}

Decomposition explain_vector(const Vector& residual_vec, const TargetId& id, const ProjectionContext& ctx,
                             const Matrix& centered_dict, Method method, int k, double lambda) {
  const Vector target = to_multimodal(residual_vec, ctx);
  Decomposition d = decompose(target, centered_dict, method, k, lambda);
  d.target = id;
  const Fidelity f = fidelity(d, centered_dict, ctx, residual_vec);
  d.fidelity_multimodal = f.multimodal;
  d.fidelity_residual = f.residual;
  return d;
}

double mean_pairwise_cosine(std::span<const int> support, const Matrix& centered_dict) {
  if (support.size() < 2) return 0.0;
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < support.size(); ++i)
    for (std::size_t j = i + 1; j < support.size(); ++j) {
      sum += centered_dict.row(support[i]).dot(centered_dict.row(support[j]));
      ++pairs;
    }
  return sum / static_cast<double>(pairs);
}

}  // namespace headsvd
