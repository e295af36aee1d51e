#include "headsvd/judge_client.hpp"

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <regex>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "headsvd/prompts.hpp"

namespace headsvd {

using json = nlohmann::json;

namespace {

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
    s.replace(pos, from.size(), to);
}

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string path;    // base path, no trailing slash
};

Endpoint split_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw JudgeError("invalid judge endpoint URL: " + url);
  Endpoint e{m[1].str(), m[2].matched ? m[2].str() : ""};
  while (!e.path.empty() && e.path.back() == '/') e.path.pop_back();
  return e;
}

bool retryable(int status) { return status == 429 || status >= 500; }

}  // namespace

const char* to_string(PromptKind k) {
  switch (k) {
    case PromptKind::coherence:
      return "coherence";
    case PromptKind::spurious:
      return "spurious";
    case PromptKind::nsfw:
      return "nsfw";
    case PromptKind::domain_relevance:
      return "domain_relevance";
  }
  return "?";
}

PromptKind prompt_kind_from_string(const std::string& s) {
  for (auto k : {PromptKind::coherence, PromptKind::spurious, PromptKind::nsfw, PromptKind::domain_relevance})
    if (s == to_string(k)) return k;
  throw ValidationError("unknown prompt kind '" + s + "'");
}

void validate(const JudgeConfig& cfg) {
  if (cfg.endpoint.empty()) throw ValidationError("judge endpoint is empty");
  if (cfg.model.empty()) throw ValidationError("judge model is empty");
  if (cfg.max_concurrency < 1) throw ValidationError("judge concurrency must be at least 1");
  if (cfg.retry_budget < 0) throw ValidationError("judge retry budget must be nonnegative");
  if (!(cfg.timeout_seconds > 0)) throw ValidationError("judge timeout must be positive");
}

JudgeConfig judge_config_from_env(const std::string& endpoint, const std::string& model) {
  JudgeConfig cfg;
  cfg.endpoint = endpoint;
  cfg.model = model;
  if (const char* key = std::getenv(kJudgeApiKeyEnv)) cfg.api_key = key;
  return cfg;
}

const std::string& prompt_template(PromptKind kind) {
  static const std::string coherence(prompts::coherence);
  static const std::string spurious(prompts::spurious);
  static const std::string nsfw(prompts::nsfw);
  static const std::string domain(prompts::domain_relevance);
  switch (kind) {
    case PromptKind::coherence:
      return coherence;
    case PromptKind::spurious:
      return spurious;
    case PromptKind::nsfw:
      return nsfw;
    case PromptKind::domain_relevance:
      return domain;
  }
  throw ValidationError("unknown prompt kind");
}

std::string render_prompt(const std::vector<std::string>& concepts, PromptKind kind,
                          const std::optional<std::string>& domain_label) {
  if (concepts.empty() || concepts.size() > 50)
    throw ValidationError("judge needs between 1 and 50 concepts, got " + std::to_string(concepts.size()));
  if (kind == PromptKind::domain_relevance && !domain_label)
    throw ValidationError("domain_relevance prompts need a domain label");
  std::string list;
  for (const auto& c : concepts) list += "- " + c + "\n";
  if (!list.empty()) list.pop_back();
  std::string out = prompt_template(kind);
  replace_all(out, "{{concepts}}", list);
  replace_all(out, "{{domain}}", domain_label.value_or(""));
  return out;
}

std::optional<int> parse_score(const std::string& reply, PromptKind kind) {
  static const std::regex integer(R"(\b(\d+)\b)");
  if (kind == PromptKind::domain_relevance) {
    static const std::regex yes_no(R"(\b(yes|no)\b)", std::regex::icase);
    std::smatch m;
    if (std::regex_search(reply, m, yes_no)) {
      const char c = m[1].str()[0];
      return (c == 'y' || c == 'Y') ? 1 : 0;
    }
    for (auto it = std::sregex_iterator(reply.begin(), reply.end(), integer); it != std::sregex_iterator(); ++it) {
      const auto s = (*it)[1].str();
      if (s == "0" || s == "1") return s == "1" ? 1 : 0;
    }
    return std::nullopt;
  }
  for (auto it = std::sregex_iterator(reply.begin(), reply.end(), integer); it != std::sregex_iterator(); ++it) {
    const auto s = (*it)[1].str();
    if (s.size() == 1 && s[0] >= '1' && s[0] <= '5') return s[0] - '0';
  }
  return std::nullopt;
}

int judge_concepts(const std::vector<std::string>& concepts, PromptKind kind,
                   const std::optional<std::string>& domain_label, const JudgeConfig& cfg) {
  validate(cfg);
  const std::string prompt = render_prompt(concepts, kind, domain_label);
  const Endpoint ep = split_endpoint(cfg.endpoint);

  json body{{"model", cfg.model}, {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
  const std::string payload = body.dump();

  httplib::Client client(ep.origin);
  const auto secs = static_cast<time_t>(cfg.timeout_seconds);
  const auto usecs = static_cast<time_t>((cfg.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);

  std::string last_error;
  for (int attempt = 0; attempt <= cfg.retry_budget; ++attempt) {
    if (attempt > 0) {
      const double delay = cfg.backoff_base_seconds * static_cast<double>(1 << (attempt - 1));
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    auto res = client.Post(ep.path + "/chat/completions", headers, payload, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (retryable(res->status)) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw JudgeError("judge returned HTTP " + std::to_string(res->status) + ": " + res->body);

    std::string content;
    try {
      content = json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const std::exception& e) {
      throw JudgeError(std::string("malformed judge response: ") + e.what() + "; body: " + res->body);
    }
    if (auto score = parse_score(content, kind)) return *score;
    throw JudgeError("unparseable judge reply: " + content);
  }
  throw JudgeError("judge request failed after " + std::to_string(cfg.retry_budget + 1) + " attempts: " + last_error);
}

std::vector<int> judge_many(const std::vector<std::vector<std::string>>& concept_sets, PromptKind kind,
                            const std::optional<std::string>& domain_label, const JudgeConfig& cfg) {
  validate(cfg);
  std::vector<int> out(concept_sets.size(), 0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < concept_sets.size(); i = next++) {
      {
        std::lock_guard lock(failure_mutex);
        if (failure) return;
      }
      try {
        out[i] = judge_concepts(concept_sets[i], kind, domain_label, cfg);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const auto n = std::min<std::size_t>(static_cast<std::size_t>(cfg.max_concurrency), concept_sets.size());
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < n; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

int proxy_score_from_similarity(double m) {
  if (m < 0.1) return 1;
  if (m < 0.25) return 2;
  if (m < 0.45) return 3;
  if (m < 0.65) return 4;
  return 5;
}

int proxy_coherence(std::span<const int> concepts, const Matrix& centered_dict) {
  if (concepts.size() < 2) throw ValidationError("proxy coherence needs at least 2 concepts");
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < concepts.size(); ++i)
    for (std::size_t j = i + 1; j < concepts.size(); ++j) {
      sum += centered_dict.row(concepts[i]).dot(centered_dict.row(concepts[j]));
      ++pairs;
    }
  return proxy_score_from_similarity(sum / static_cast<double>(pairs));
}

int proxy_anchor_score(std::span<const int> concepts, std::span<const int> anchors, const Matrix& centered_dict) {
  if (concepts.empty()) throw ValidationError("proxy anchor score needs at least 1 concept");
  if (anchors.empty()) throw ValidationError("proxy anchor score needs at least 1 anchor concept");
  double sum = 0.0;
  for (int c : concepts) {
    double best = -1.0;
    for (int a : anchors) best = std::max(best, centered_dict.row(c).dot(centered_dict.row(a)));
    sum += best;
  }
  return proxy_score_from_similarity(sum / static_cast<double>(concepts.size()));
}

}  // namespace headsvd
