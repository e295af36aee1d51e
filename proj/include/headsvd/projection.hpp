#pragma once

#include "headsvd/asset_io.hpp"

namespace headsvd {

/// Everything needed to move vectors between the residual stream (R^D) and
/// the gap-corrected multimodal space (R^d).
struct ProjectionContext {
  Vector final_ln_weight;
  Vector final_ln_bias;
  Matrix proj;       // D x d
  Matrix proj_pinv;  // d x D
  Vector image_mean;
  Vector text_mean;
  double ln_eps = 1e-5;
};

/// Moore-Penrose pseudo-inverse via SVD; singular values below
/// max(sigma) * max(rows, cols) * machine epsilon are treated as zero.
Matrix pseudo_inverse(const Matrix& m);

ProjectionContext make_projection_context(const WeightBundle& bundle, const ConceptDictionary& dict,
                                          double ln_eps = 1e-5);

/// Full LayerNorm with the final LN parameters (population variance).
Vector final_layer_norm(const Vector& vec, const ProjectionContext& ctx);

/// norm(norm(proj^T LN(vec)) - image_mean)
Vector to_multimodal(const Vector& vec, const ProjectionContext& ctx);

/// Row i becomes norm(norm(row_i) - text_mean).
Matrix center_text_embeddings(const ConceptDictionary& dict);
Matrix center_text_embeddings(const Matrix& embeddings, const Vector& text_mean);

/// norm(pinv^T norm(vec_centered + image_mean)). The LayerNorm is not inverted.
Vector back_project(const Vector& vec_centered, const ProjectionContext& ctx);

}  // namespace headsvd
