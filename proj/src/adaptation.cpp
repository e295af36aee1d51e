#include "headsvd/adaptation.hpp"

#include <cmath>
#include <string>

namespace headsvd {

SpectralEntry greedy_spectral_match(const HeadSVD& pre, const HeadSVD& ft) {
  if (pre.rank() != ft.rank())
    throw ValidationError("rank mismatch: " + std::to_string(pre.rank()) + " vs " + std::to_string(ft.rank()));
  if (pre.v_t.cols() != ft.v_t.cols()) throw ValidationError("embedding dimension mismatch");
  const int r = pre.rank();

  const Matrix abs_cos = (pre.v_t * ft.v_t.transpose()).cwiseAbs();
  const Matrix weighted = pre.sigma.asDiagonal() * abs_cos * ft.sigma.asDiagonal();

  std::vector<bool> used_pre(static_cast<std::size_t>(r), false), used_ft(static_cast<std::size_t>(r), false);
  SpectralEntry out;
  out.layer = pre.layer;
  out.head = pre.head;
  double numerator = 0.0;
  for (int n = 0; n < r; ++n) {
    int bi = -1, bj = -1;
    double best = -1.0;
    for (int i = 0; i < r; ++i) {
      if (used_pre[static_cast<std::size_t>(i)]) continue;
      for (int j = 0; j < r; ++j) {
        if (used_ft[static_cast<std::size_t>(j)]) continue;
        if (weighted(i, j) > best) {
          best = weighted(i, j);
          bi = i;
          bj = j;
        }
      }
    }
    used_pre[static_cast<std::size_t>(bi)] = true;
    used_ft[static_cast<std::size_t>(bj)] = true;
    out.pairs.push_back({bi, bj, abs_cos(bi, bj), best});
    numerator += best * best;
  }

  const double denominator = pre.sigma.cwiseProduct(ft.sigma).squaredNorm();
  if (denominator == 0.0) {
    out.similarity = (pre.sigma.isZero(0.0) && ft.sigma.isZero(0.0)) ? 1.0 : 0.0;
  } else {
    out.similarity = std::sqrt(numerator / denominator);
  }
  return out;
}

std::vector<TaskSingularVector> task_singular_vectors(const Matrix& w_pre, const Matrix& w_ft, int top_k) {
  if (w_pre.rows() != w_ft.rows() || w_pre.cols() != w_ft.cols())
    throw ValidationError("pre-trained and fine-tuned matrices differ in shape");
  if (top_k < 0 || top_k > std::min(w_pre.rows(), w_pre.cols()))
    throw ValidationError("top_k = " + std::to_string(top_k) + " exceeds matrix dimension");
  const ThinSVD svd = thin_svd(w_ft - w_pre);
  std::vector<TaskSingularVector> out;
  for (int i = 0; i < top_k; ++i) {
    TaskSingularVector t{svd.sigma(i), svd.u.col(i), svd.v.col(i)};
    Eigen::Index arg = 0;
    t.v.cwiseAbs().maxCoeff(&arg);
    if (t.v(arg) < 0) {
      t.u = -t.u;
      t.v = -t.v;
    }
    out.push_back(std::move(t));
  }
  return out;
}

nlohmann::json to_json(const SpectralReport& report) {
  nlohmann::json j;
  j["dataset_label"] = report.dataset_label;
  j["method_label"] = report.method_label;
  j["layers"] = report.layers;
  j["grid"] = nlohmann::json::array();
  for (const auto& row : report.grid) {
    nlohmann::json jr = nlohmann::json::array();
    for (const auto& e : row) jr.push_back(e.similarity);
    j["grid"].push_back(jr);
  }
  return j;
}

}  // namespace headsvd
