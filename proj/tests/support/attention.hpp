#pragma once

// Reference multi-head attention for the forward-equivalence checks.

#include <cmath>
#include <vector>

#include "headsvd/asset_io.hpp"
#include "headsvd/head_algebra.hpp"
#include "oracles.hpp"

namespace headsvd::testing {

struct AttentionWeights {
  Matrix q, k, v, o;
  Vector qb, kb, vb, ob;
};

inline AttentionWeights original_weights(const LayerWeights& lw, Eigen::Index D) {
  const auto or_zero = [&](const std::optional<Vector>& b) { return b ? *b : Vector::Zero(D); };
  return {lw.q_weight, lw.k_weight, lw.v_weight, lw.o_weight,
          or_zero(lw.q_bias), or_zero(lw.k_bias), or_zero(lw.v_bias), or_zero(lw.o_bias)};
}

inline AttentionWeights folded_weights(const FoldedLayer& f) {
  return {f.q_weight, f.k_weight, f.v_weight, f.o_weight, f.q_bias, f.k_bias, f.v_bias, f.o_bias};
}

/// Per-head outputs (one n x D matrix per head, before summing and before
/// the output bias) for already-normalized token rows.
inline std::vector<Matrix> head_outputs(const Matrix& tokens, const AttentionWeights& w, int heads) {
  const Eigen::Index D = w.q.rows();
  const Eigen::Index dh = D / heads;
  const Matrix q = (tokens * w.q).rowwise() + w.qb.transpose();
  const Matrix k = (tokens * w.k).rowwise() + w.kb.transpose();
  const Matrix v = (tokens * w.v).rowwise() + w.vb.transpose();
  std::vector<Matrix> out;
  for (int h = 0; h < heads; ++h) {
    Matrix logits = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() / std::sqrt(double(dh));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      const double m = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - m).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    out.push_back(logits * v.middleCols(h * dh, dh) * w.o.middleRows(h * dh, dh));
  }
  return out;
}

}  // namespace headsvd::testing
