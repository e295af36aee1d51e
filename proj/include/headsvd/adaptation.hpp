#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headsvd/head_algebra.hpp"

namespace headsvd {

struct MatchedPair {
  int pre_index = 0;
  int ft_index = 0;
  double abs_cosine = 0.0;
  double score = 0.0;  // |cos| * sigma_pre * sigma_ft
};

/// Normalized spectral cosine similarity of one head.
struct SpectralEntry {
  int layer = 0;
  int head = 0;
  double similarity = 0.0;  // in [0, 1]
  std::vector<MatchedPair> pairs;
};

/// Greedily pairs right singular vectors of two heads: each step takes the
/// unmatched (i, j) with the largest |<v_i, v_j>| sigma_i sigma_j (ties to the
/// lowest i, then j). Sim = sqrt(sum s_n^2 / sum (sigma_n^pre sigma_n^ft)^2)
/// with the denominator pairing singular values rank by rank. Two all-zero
/// spectra compare as 1; a zero spectrum against a nonzero one as 0.
SpectralEntry greedy_spectral_match(const HeadSVD& pre, const HeadSVD& ft);

struct TaskSingularVector {
  double sigma = 0.0;
  Vector u;
  Vector v;
};

/// Top-k singular triplets of w_ft - w_pre, descending.
std::vector<TaskSingularVector> task_singular_vectors(const Matrix& w_pre, const Matrix& w_ft, int top_k);

struct SpectralReport {
  std::string dataset_label;
  std::string method_label;
  std::vector<int> layers;
  std::vector<std::vector<SpectralEntry>> grid;  // [layer][head]
};

nlohmann::json to_json(const SpectralReport& report);

}  // namespace headsvd
