#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headsvd/adaptation.hpp"
#include "headsvd/asset_io.hpp"
#include "headsvd/editing.hpp"
#include "headsvd/judge_client.hpp"
#include "headsvd/sparse_coding.hpp"

namespace headsvd {

/// Command-line misuse (bad flag combinations, empty ranges).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// A failure inside one stage of the analysis pipeline, with its location.
class StageError : public Error {
 public:
  StageError(std::string stage, TargetId where, std::string message, int exit_code)
      : Error(stage + ": " + message), stage_(std::move(stage)), where_(where), message_(std::move(message)),
        exit_code_(exit_code) {}

  const std::string& stage() const { return stage_; }
  const TargetId& where() const { return where_; }
  const std::string& message() const { return message_; }
  int exit_code() const { return exit_code_; }

 private:
  std::string stage_;
  TargetId where_;
  std::string message_;
  int exit_code_;
};

struct LayerRange {
  int first = 0;
  int last = 0;  // inclusive
};

/// Parses "a..b" (inclusive). An empty or reversed range is a UsageError.
LayerRange parse_layer_range(const std::string& text);

/// The last `count` layers of a model with `layers` blocks.
LayerRange default_layer_range(int layers, int count = 4);

struct RunConfig {
  std::filesystem::path bundle_path;
  std::filesystem::path bundle_ft_path;
  std::filesystem::path dict_emb_path;
  std::filesystem::path dict_vocab_path;
  std::optional<LayerRange> layers;
  Side side = Side::right;
  int k = kDefaultSparsity;
  double lambda = kDefaultLambda;
  Method method = Method::comp;
  double tau = 0.0;
  std::filesystem::path out_dir;
  std::filesystem::path manifest_path;
  int threads = 1;
  std::optional<JudgeConfig> judge;
  bool offline_judge = false;
};

/// Checks the layer range against the model and K against the dictionary.
void validate(const RunConfig& cfg, const ModelMeta& meta, std::size_t dict_size);

/// Loaded dictionary with its centered embedding matrix.
struct PreparedDictionary {
  ConceptDictionary dict;
  Matrix centered;
};

PreparedDictionary prepare_dictionary(ConceptDictionary dict);

/// Explanations of every singular vector of every head in the layer range,
/// ordered by (layer, head, index).
struct ExplainResult {
  std::string model_id;
  LayerRange layers;
  std::vector<HeadSVD> heads;
  std::vector<Decomposition> entries;
};

ExplainResult explain_heads(const WeightBundle& bundle, const PreparedDictionary& dict, const LayerRange& layers,
                            Side side, Method method, int k, double lambda, int threads);

/// JSON report: {model_id, method, K, lambda, side, layers, entries:[...]}.
/// Coefficients are rounded to 4 decimals.
nlohmann::json explain_report(const ExplainResult& result, const ConceptDictionary& dict, Side side, Method method,
                              int k, double lambda);

/// Per-layer means of both fidelity scores and the proxy coherence.
nlohmann::json fidelity_summary(const ExplainResult& result, const Matrix& centered_dict, Method method, int k,
                                double lambda);

/// Bundle summary: meta, model id, folded flag and per-head leading sigma.
nlohmann::json inspect_bundle(const WeightBundle& bundle);

struct CompareOptions {
  LayerRange layers;
  int top_k = 5;
  Method method = Method::comp;
  int k = kDefaultSparsity;
  double lambda = kDefaultLambda;
  std::string dataset_label;
  std::string method_label;
  int threads = 1;
};

/// Spectral similarity grid plus the top task singular vectors of every
/// head's value-output delta. Task vectors are explained when a dictionary
/// is given and their sigma is above 1e-9.
nlohmann::json compare_bundles(const WeightBundle& pre, const WeightBundle& ft, const PreparedDictionary* dict,
                               const CompareOptions& options);

}  // namespace headsvd
