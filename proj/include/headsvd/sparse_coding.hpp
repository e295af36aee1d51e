#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "headsvd/projection.hpp"
#include "headsvd/types.hpp"

namespace headsvd {

enum class Method { topk, nnomp, comp };

const char* to_string(Method m);
Method method_from_string(const std::string& s);

inline constexpr int kDefaultSparsity = 5;
inline constexpr double kDefaultLambda = 0.3;

/// Sparse nonnegative explanation of one target vector over a centered
/// concept dictionary.
struct Decomposition {
  TargetId target;
  Method method = Method::comp;
  double lambda = 0.0;
  std::vector<int> support;          // selection order
  std::vector<double> coefficients;  // aligned with support, >= 0
  double residual_norm = 0.0;
  int orientation = 1;  // sign of the target that was explained
  double fidelity_multimodal = 0.0;
  double fidelity_residual = 0.0;
  std::vector<double> residual_trace;  // residual norm after every selection
};

/// Nonnegative least squares: argmin_{z >= 0} |target - basis^T z|_2 for a
/// k x d basis (Lawson-Hanson active set). Throws NumericalError when more
/// than 3k active-set pivots are needed.
Vector nnls(const Matrix& basis, const Vector& target);

/// Decompose `target` (unit, length d) over the rows of `centered_dict`.
///
/// nnomp and comp run K greedy selections, each followed by an NNLS refit on
/// the support. comp adds lambda times the mean cosine between a candidate
/// and the already selected atoms to the residual correlation. Selection
/// stops early once the residual norm falls below 1e-6. Ties go to the lowest
/// concept index. Both +target and -target are decomposed and the one with the
/// smaller residual is kept (ties keep +target).
///
/// `excluded` is either empty or a C-length mask of concepts that may never
/// be selected.
Decomposition decompose(const Vector& target, const Matrix& centered_dict, Method method, int k,
                        double lambda, std::span<const std::uint8_t> excluded = {});

/// Gamma_S^T c, the unnormalized reconstruction in the centered space.
Vector reconstruct(const Decomposition& d, const Matrix& centered_dict);

/// |orientation * target - Gamma_S^T c|
double recompute_residual(const Decomposition& d, const Matrix& centered_dict, const Vector& target);

struct Fidelity {
  double multimodal = 0.0;
  double residual = 0.0;
};

/// Cosine between the explained (oriented) target and the normalized
/// reconstruction, in the centered multimodal space.
double fidelity_multimodal(const Decomposition& d, const Matrix& centered_dict, const Vector& target);

/// Both fidelity scores. The residual-stream score compares the original
/// D-dimensional vector against the back-projected reconstruction and is the
/// headline metric.
Fidelity fidelity(const Decomposition& d, const Matrix& centered_dict, const ProjectionContext& ctx,
                  const Vector& original_residual_vec);

/// Project a residual-stream vector, decompose it and attach fidelity scores.
Decomposition explain_vector(const Vector& residual_vec, const TargetId& id, const ProjectionContext& ctx,
                             const Matrix& centered_dict, Method method, int k, double lambda);

/// Mean cosine over unordered pairs of distinct support entries (rows are unit).
double mean_pairwise_cosine(std::span<const int> support, const Matrix& centered_dict);

}  // namespace headsvd
