#include "headsvd/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <spdlog/spdlog.h>

#include "headsvd/head_algebra.hpp"

namespace headsvd {

namespace {

// Vectors shorter than this are treated as zero before normalization.
constexpr double kDegenerateNorm = 1e-12;

}  // namespace

Matrix pseudo_inverse(const Matrix& m) {
  if (m.size() == 0) return Matrix(m.cols(), m.rows());
  const ThinSVD svd = thin_svd(m);
  const double cutoff = svd.sigma.maxCoeff() * static_cast<double>(std::max(m.rows(), m.cols())) *
                        std::numeric_limits<double>::epsilon();
  Vector inv = Vector::Zero(svd.sigma.size());
  for (Eigen::Index i = 0; i < svd.sigma.size(); ++i)
    if (svd.sigma(i) > cutoff) inv(i) = 1.0 / svd.sigma(i);
  return svd.v * inv.asDiagonal() * svd.u.transpose();
}

ProjectionContext make_projection_context(const WeightBundle& bundle, const ConceptDictionary& dict,
                                          double ln_eps) {
  if (bundle.meta.shared_dim != dict.dim())
    throw ValidationError("bundle shared dim " + std::to_string(bundle.meta.shared_dim) +
                          " does not match dictionary dim " + std::to_string(dict.dim()));
  if (!(ln_eps > 0)) throw ValidationError("ln_eps must be positive");
  ProjectionContext ctx;
  ctx.final_ln_weight = bundle.final_ln_weight;
  ctx.final_ln_bias = bundle.final_ln_bias;
  ctx.proj = bundle.proj;
  ctx.proj_pinv = pseudo_inverse(bundle.proj);
  ctx.image_mean = dict.image_mean;
  ctx.text_mean = dict.text_mean;
  ctx.ln_eps = ln_eps;
  if (ctx.image_mean.isZero(0.0))
    spdlog::warn("image mean is the zero vector; modality gap correction is disabled");
  return ctx;
}

Vector final_layer_norm(const Vector& vec, const ProjectionContext& ctx) {
  const Vector centered = vec.array() - vec.mean();
  const double var = centered.squaredNorm() / static_cast<double>(vec.size());
  return (centered / std::sqrt(var + ctx.ln_eps)).cwiseProduct(ctx.final_ln_weight) + ctx.final_ln_bias;
}

Vector to_multimodal(const Vector& vec, const ProjectionContext& ctx) {
  if (vec.size() != ctx.proj.rows())
    throw ValidationError("vector length " + std::to_string(vec.size()) + " does not match embed dim " +
                          std::to_string(ctx.proj.rows()));
  if (!vec.allFinite()) throw ValidationError("non-finite input vector");
  const Vector centered = vec.array() - vec.mean();
  if (centered.norm() < kDegenerateNorm)
    throw NumericalError("degenerate input: vector is constant and vanishes under LayerNorm centering");

  const Vector projected = ctx.proj.transpose() * final_layer_norm(vec, ctx);
  const double pn = projected.norm();
  if (pn < kDegenerateNorm) throw NumericalError("degenerate input: projection is the zero vector");
  const Vector shifted = projected / pn - ctx.image_mean;
  const double sn = shifted.norm();
  if (sn < kDegenerateNorm) throw NumericalError("degenerate input: projection coincides with the image mean");
  return shifted / sn;
}

Matrix center_text_embeddings(const Matrix& embeddings, const Vector& text_mean) {
  if (text_mean.size() != embeddings.cols()) throw ValidationError("text mean length does not match embedding dim");
  Matrix out(embeddings.rows(), embeddings.cols());
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    const double n = embeddings.row(i).norm();
    if (n < kDegenerateNorm) throw NumericalError("concept " + std::to_string(i) + " has a zero embedding");
    const Eigen::RowVectorXd c = embeddings.row(i) / n - text_mean.transpose();
    const double cn = c.norm();
    if (cn < kDegenerateNorm)
      throw NumericalError("concept " + std::to_string(i) + " collapses to zero after text-mean centering");
    out.row(i) = c / cn;
  }
  return out;
}

Matrix center_text_embeddings(const ConceptDictionary& dict) {
  return center_text_embeddings(dict.embeddings, dict.text_mean);
}

Vector back_project(const Vector& vec_centered, const ProjectionContext& ctx) {
  if (vec_centered.size() != ctx.proj.cols())
    throw ValidationError("vector length " + std::to_string(vec_centered.size()) + " does not match shared dim " +
                          std::to_string(ctx.proj.cols()));
  const Vector shifted = vec_centered + ctx.image_mean;
  const double sn = shifted.norm();
  if (sn < kDegenerateNorm) throw NumericalError("back-projection input cancels the image mean");
  const Vector out = ctx.proj_pinv.transpose() * (shifted / sn);
  const double on = out.norm();
  if (on < kDegenerateNorm) throw NumericalError("back-projection annihilated the vector");
  return out / on;
}

}  // namespace headsvd
