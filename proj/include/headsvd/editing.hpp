#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "headsvd/asset_io.hpp"
#include "headsvd/head_algebra.hpp"
#include "headsvd/sparse_coding.hpp"

namespace headsvd {

/// One singular-value edit. Exactly one of `multiplier` (sigma' = m * sigma)
/// and `set_value` (sigma' = value) is present.
struct EditEntry {
  int layer = 0;
  int head = 0;
  int index = 0;
  std::optional<double> multiplier;
  std::optional<double> set_value;
};

struct EditManifest {
  std::string model_id;
  std::optional<double> tau;
  std::vector<EditEntry> entries;
};

/// Rejects duplicate (layer, head, index) triplets, non-finite values and
/// entries with zero or two operations. When `meta` is given, indices are
/// bounds-checked against it.
void validate(const EditManifest& manifest, const ModelMeta* meta = nullptr);

nlohmann::json to_json(const EditManifest& manifest);
EditManifest manifest_from_json(const nlohmann::json& j);
EditManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const EditManifest& manifest, const std::filesystem::path& path);

/// Sorted, deduplicated list of layers touched by a manifest.
std::vector<int> edited_layers(const EditManifest& manifest);

inline constexpr double kMinRelevanceScale = 0.8;

struct RelevanceScore {
  TargetId target;
  double relevance = 0.0;  // R
  double alpha = 1.0;      // max(0.8, R + tau)
};

/// Concepts relevant to a classification task. Dictionary concepts whose
/// text equals a class name (ASCII case-insensitive) are excluded; every
/// class embedding is text-mean centered and decomposed with comp; the pool is
/// the sorted union of the supports (atoms with a zero coefficient dropped).
std::vector<int> build_task_pool(const std::vector<std::string>& class_names, const Matrix& class_embeddings,
                                 const ConceptDictionary& dict, const Matrix& centered_dict,
                                 int k = kDefaultSparsity, double lambda = kDefaultLambda);

/// R = sum_k w_k * max_{j in pool} <c_k, c_j> over centered embeddings.
std::vector<RelevanceScore> relevance_scale_factors(const std::vector<Decomposition>& decomps,
                                                    const std::vector<int>& pool, const Matrix& centered_dict,
                                                    double tau);

enum class JudgmentMode { spurious, nsfw };

JudgmentMode judgment_mode_from_string(const std::string& s);

struct Judgment {
  TargetId target;
  int score = 1;  // 1..5
};

/// spurious: score >= 3 -> multiplier 0.
/// nsfw: score >= 4 -> multiplier 0, score == 3 -> set_value -1.
EditManifest manifest_from_judgments(const std::vector<Judgment>& judgments, JudgmentMode mode);

/// Manifest scaling every scored vector's singular value by its alpha.
EditManifest manifest_from_relevance(const std::vector<RelevanceScore>& scores);

/// Edited singular values of one head.
Vector edited_sigma(const HeadSVD& svd, const EditManifest& manifest);

/// Factored edit of one head: W_V' = U diag(sigma'), W_O' = V^T.
std::pair<Matrix, Matrix> apply_edit(const HeadSVD& svd, const EditManifest& manifest);

/// Rewrite every layer touched by the manifest in folded, factored form and
/// return the edited bundle (flagged folded). Per head, the value/output
/// columns/rows hold U diag(sigma') and V^T. The value-bias contribution of
/// the folded layer is moved into the output bias and the value bias zeroed,
/// so the constant term of the attention output is unchanged. The ln_1
/// affine of edited layers becomes (1, 0).
WeightBundle apply_manifest(const WeightBundle& bundle, const EditManifest& manifest);

}  // namespace headsvd
