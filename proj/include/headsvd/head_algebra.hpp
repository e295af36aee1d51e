#pragma once

#include <vector>

#include "headsvd/asset_io.hpp"

namespace headsvd {

/// Attention weights of one layer with the pre-attention LayerNorm absorbed.
///
/// The affine part of LN is folded into the query, key and value projections
/// (W' = diag(w) W, b' = b + W^T b_ln). Input-reading weights then have each
/// column centered and the output weight has each row centered, so the layer
/// neither reads from nor writes to the all-ones direction of the residual
/// stream. Missing biases are treated as zero; folded biases are always dense.
struct FoldedLayer {
  int layer_index = 0;
  int heads = 1;
  Matrix q_weight, k_weight, v_weight, o_weight;
  Vector q_bias, k_bias, v_bias, o_bias;
};

FoldedLayer fold_layer(const WeightBundle& bundle, int layer);

/// Value-output matrix of one head: columns [h*dh, (h+1)*dh) of the folded
/// value weight times rows [h*dh, (h+1)*dh) of the folded output weight.
Matrix build_head_vo(const FoldedLayer& folded, int head);

/// Per-head slices of the folded value (D x dh) and output (dh x D) weights.
Matrix head_value_weight(const FoldedLayer& folded, int head);
Matrix head_output_weight(const FoldedLayer& folded, int head);

/// Truncated SVD of a head's value-output matrix, W_VO = U diag(sigma) V^T.
/// Exactly r = head_dim triplets are kept. Each pair (u_i, v_i) is flipped so
/// that the largest-magnitude entry of v_i is positive.
struct HeadSVD {
  int layer = 0;
  int head = 0;
  Matrix w_vo;              // D x D
  Matrix u;                 // D x r
  Vector sigma;             // r, descending, >= 0
  Matrix v_t;               // r x D
  std::vector<bool> sign_flips;

  int rank() const { return static_cast<int>(sigma.size()); }
  /// Right singular vector i (row i of v_t) as a column vector.
  Vector right(int i) const { return v_t.row(i).transpose(); }
  Vector left(int i) const { return u.col(i); }
  Vector vector(Side side, int i) const { return side == Side::left ? left(i) : right(i); }
  Matrix reconstruct() const { return u * sigma.asDiagonal() * v_t; }
};

HeadSVD svd_head(const Matrix& w_vo, int layer, int head, int rank);

/// Same result as svd_head(w_v * w_o, ...) computed from the thin factors via
/// two QR decompositions and an r x r SVD. Used for full-size checkpoints
/// where a dense D x D SVD per head is wasteful.
HeadSVD svd_head_factored(const Matrix& w_v, const Matrix& w_o, int layer, int head);

/// Convenience: fold, build every head's value-output matrix and factor it.
std::vector<HeadSVD> analyze_layer(const WeightBundle& bundle, int layer);

/// Thin SVD of an arbitrary matrix with descending singular values.
struct ThinSVD {
  Matrix u;
  Vector sigma;
  Matrix v;
};

ThinSVD thin_svd(const Matrix& m);

}  // namespace headsvd
