#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headsvd/types.hpp"

namespace headsvd {

enum class PromptKind { coherence, spurious, nsfw, domain_relevance };

const char* to_string(PromptKind k);
PromptKind prompt_kind_from_string(const std::string& s);

/// Connection settings for an OpenAI-compatible chat-completions endpoint.
struct JudgeConfig {
  std::string endpoint;  // e.g. https://api.example.com/v1
  std::string model;
  std::string api_key;
  int max_concurrency = 4;
  int retry_budget = 3;
  double timeout_seconds = 60.0;
  double backoff_base_seconds = 0.5;
};

void validate(const JudgeConfig& cfg);

inline constexpr const char* kJudgeApiKeyEnv = "JUDGE_API_KEY";

/// Builds a config with the API key taken from JUDGE_API_KEY (empty if unset).
JudgeConfig judge_config_from_env(const std::string& endpoint, const std::string& model);

/// Template text shipped with the library for a prompt kind.
const std::string& prompt_template(PromptKind kind);

/// Fills {{concepts}} (one "- concept" line each) and {{domain}}.
std::string render_prompt(const std::vector<std::string>& concepts, PromptKind kind,
                          const std::optional<std::string>& domain_label = std::nullopt);

/// First standalone integer in 1..5 (likert kinds) or yes/no -> 1/0
/// (domain_relevance; a standalone 0/1 is also accepted).
std::optional<int> parse_score(const std::string& reply, PromptKind kind);

/// One chat request; retries transport errors, 429 and 5xx with exponential
/// backoff inside the retry budget. Throws JudgeError on failure or when the
/// reply cannot be parsed (the raw text is included in the message).
int judge_concepts(const std::vector<std::string>& concepts, PromptKind kind,
                   const std::optional<std::string>& domain_label, const JudgeConfig& cfg);

/// Judges many concept sets with at most cfg.max_concurrency requests in
/// flight. Results are returned in input order.
std::vector<int> judge_many(const std::vector<std::vector<std::string>>& concept_sets, PromptKind kind,
                            const std::optional<std::string>& domain_label, const JudgeConfig& cfg);

/// Offline stand-in for the coherence judge. The mean pairwise cosine m of
/// the concepts is mapped by heuristic thresholds:
/// m < 0.1 -> 1, < 0.25 -> 2, < 0.45 -> 3, < 0.65 -> 4, else 5.
int proxy_coherence(std::span<const int> concepts, const Matrix& centered_dict);

/// Maps a similarity value through the proxy thresholds above.
int proxy_score_from_similarity(double m);

/// Offline stand-in for the spurious/nsfw judges: the mean over the concepts
/// of their best cosine to any anchor concept, mapped by the proxy thresholds.
int proxy_anchor_score(std::span<const int> concepts, std::span<const int> anchors, const Matrix& centered_dict);

}  // namespace headsvd
