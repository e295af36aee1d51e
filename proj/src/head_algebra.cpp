#include "headsvd/head_algebra.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include <Eigen/SVD>

namespace headsvd {

namespace {

Vector bias_or_zero(const std::optional<Vector>& b, Eigen::Index n) {
  return b ? *b : Vector::Zero(n);
}

void fold_reading(const Matrix& w, const Vector& b, const Vector& ln_w, const Vector& ln_b,
                  Matrix& w_out, Vector& b_out) {
  b_out = b + w.transpose() * ln_b;
  w_out = ln_w.asDiagonal() * w;
  w_out.rowwise() -= w_out.colwise().mean();
}

void check_head(int head, int heads) {
  if (head < 0 || head >= heads)
    throw ValidationError("head index " + std::to_string(head) + " out of range [0, " +
                          std::to_string(heads) + ")");
}

HeadSVD make_head_svd(const Matrix& w_vo, int layer, int head, const Matrix& u, const Vector& sigma,
                      const Matrix& v) {
  HeadSVD out;
  out.layer = layer;
  out.head = head;
  out.w_vo = w_vo;
  out.u = u;
  out.sigma = sigma;
  out.v_t = v.transpose();
  const int rank = static_cast<int>(sigma.size());
  out.sign_flips.assign(static_cast<std::size_t>(rank), false);
  for (int i = 0; i < rank; ++i) {
    Eigen::Index arg = 0;
    out.v_t.row(i).cwiseAbs().maxCoeff(&arg);
    if (out.v_t(i, arg) < 0) {
      out.v_t.row(i) *= -1.0;
      out.u.col(i) *= -1.0;
      out.sign_flips[static_cast<std::size_t>(i)] = true;
    }
  }
  return out;
}

}  // namespace

FoldedLayer fold_layer(const WeightBundle& bundle, int layer) {
  if (layer < 0 || layer >= bundle.meta.layers)
    throw ValidationError("layer index " + std::to_string(layer) + " out of range [0, " +
                          std::to_string(bundle.meta.layers) + ")");
  const auto& lw = bundle.layers[static_cast<std::size_t>(layer)];
  const Eigen::Index D = bundle.meta.embed_dim;

  FoldedLayer f;
  f.layer_index = layer;
  f.heads = bundle.meta.heads;
  fold_reading(lw.q_weight, bias_or_zero(lw.q_bias, D), lw.ln1_weight, lw.ln1_bias, f.q_weight, f.q_bias);
  fold_reading(lw.k_weight, bias_or_zero(lw.k_bias, D), lw.ln1_weight, lw.ln1_bias, f.k_weight, f.k_bias);
  fold_reading(lw.v_weight, bias_or_zero(lw.v_bias, D), lw.ln1_weight, lw.ln1_bias, f.v_weight, f.v_bias);
  f.o_weight = lw.o_weight;
  f.o_weight.colwise() -= f.o_weight.rowwise().mean();
  f.o_bias = bias_or_zero(lw.o_bias, D);
  return f;
}

Matrix head_value_weight(const FoldedLayer& folded, int head) {
  check_head(head, folded.heads);
  const Eigen::Index dh = folded.v_weight.rows() / folded.heads;
  return folded.v_weight.middleCols(head * dh, dh);
}

Matrix head_output_weight(const FoldedLayer& folded, int head) {
  check_head(head, folded.heads);
  const Eigen::Index dh = folded.o_weight.rows() / folded.heads;
  return folded.o_weight.middleRows(head * dh, dh);
}

Matrix build_head_vo(const FoldedLayer& folded, int head) {
  return head_value_weight(folded, head) * head_output_weight(folded, head);
}

ThinSVD thin_svd(const Matrix& m) {
  Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw NumericalError("SVD did not converge");
  ThinSVD out{svd.matrixU(), svd.singularValues(), svd.matrixV()};

  // Eigen returns descending values; re-sort stably so equal values keep
  // their original order.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(out.sigma.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return out.sigma(a) > out.sigma(b); });
  ThinSVD sorted{Matrix(out.u.rows(), out.u.cols()), Vector(out.sigma.size()), Matrix(out.v.rows(), out.v.cols())};
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    sorted.u.col(i) = out.u.col(order[k]);
    sorted.sigma(i) = out.sigma(order[k]);
    sorted.v.col(i) = out.v.col(order[k]);
  }
  return sorted;
}

HeadSVD svd_head(const Matrix& w_vo, int layer, int head, int rank) {
  const auto where = " (layer " + std::to_string(layer) + ", head " + std::to_string(head) + ")";
  if (w_vo.rows() != w_vo.cols()) throw ValidationError("value-output matrix must be square" + where);
  if (!w_vo.allFinite()) throw ValidationError("non-finite value-output matrix" + where);
  if (rank <= 0 || rank > w_vo.rows()) throw ValidationError("invalid rank " + std::to_string(rank) + where);

  ThinSVD full;
  try {
    full = thin_svd(w_vo);
  } catch (const NumericalError& e) {
    throw NumericalError(e.what() + where);
  }

  return make_head_svd(w_vo, layer, head, full.u.leftCols(rank), full.sigma.head(rank),
                       full.v.leftCols(rank));
}

HeadSVD svd_head_factored(const Matrix& w_v, const Matrix& w_o, int layer, int head) {
  const auto where = " (layer " + std::to_string(layer) + ", head " + std::to_string(head) + ")";
  if (w_v.cols() != w_o.rows() || w_v.rows() != w_o.cols())
    throw ValidationError("value/output factor shapes do not match" + where);
  if (!w_v.allFinite() || !w_o.allFinite()) throw ValidationError("non-finite value-output factors" + where);
  const Eigen::Index r = w_v.cols();

  Eigen::HouseholderQR<Matrix> qr_v(w_v);
  Eigen::HouseholderQR<Matrix> qr_o(w_o.transpose());
  const Matrix q_v = qr_v.householderQ() * Matrix::Identity(w_v.rows(), r);
  const Matrix q_o = qr_o.householderQ() * Matrix::Identity(w_o.cols(), r);
  const Matrix r_v = qr_v.matrixQR().topRows(r).triangularView<Eigen::Upper>();
  const Matrix r_o = qr_o.matrixQR().topRows(r).triangularView<Eigen::Upper>();

  ThinSVD core;
  try {
    core = thin_svd(r_v * r_o.transpose());
  } catch (const NumericalError& e) {
    throw NumericalError(e.what() + where);
  }
  return make_head_svd(w_v * w_o, layer, head, q_v * core.u, core.sigma, q_o * core.v);
}

std::vector<HeadSVD> analyze_layer(const WeightBundle& bundle, int layer) {
  const FoldedLayer folded = fold_layer(bundle, layer);
  std::vector<HeadSVD> out;
  out.reserve(static_cast<std::size_t>(bundle.meta.heads));
  for (int h = 0; h < bundle.meta.heads; ++h)
    out.push_back(svd_head_factored(head_value_weight(folded, h), head_output_weight(folded, h), layer, h));
  return out;
}

}  // namespace headsvd
