#include <doctest.h>

#include <atomic>
#include <chrono>
#include <functional>
#include <mutex>
#include <thread>

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen.
#include "fixtures.hpp"
#include "headsvd/judge_client.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <nlohmann/json.hpp>

using namespace headsvd;

namespace {

// Local chat-completions stub. `reply` decides status and content per call.
class StubJudge {
 public:
  using Reply = std::function<std::pair<int, std::string>(int call)>;

  explicit StubJudge(Reply reply, int delay_ms = 0) : reply_(std::move(reply)) {
    server_.Post("/v1/chat/completions", [this, delay_ms](const httplib::Request& req, httplib::Response& res) {
      const int now = ++active_;
      int seen = max_active_.load();
      while (now > seen && !max_active_.compare_exchange_weak(seen, now)) {
      }
      {
        std::lock_guard lock(mutex_);
        last_body_ = req.body;
        last_auth_ = req.get_header_value("Authorization");
      }
      if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      const auto [status, content] = reply_(calls_++);
      res.status = status;
      nlohmann::json body{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}};
      res.set_content(body.dump(), "application/json");
      --active_;
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~StubJudge() {
    server_.stop();
    thread_.join();
  }

  JudgeConfig config() const {
    JudgeConfig cfg;
    cfg.endpoint = "http://127.0.0.1:" + std::to_string(port_) + "/v1";
    cfg.model = "stub-model";
    cfg.api_key = "secret";
    cfg.timeout_seconds = 5;
    cfg.backoff_base_seconds = 0.01;
    return cfg;
  }

  int calls() const { return calls_; }
  int max_active() const { return max_active_; }
  std::string last_body() const {
    std::lock_guard lock(mutex_);
    return last_body_;
  }
  std::string last_auth() const {
    std::lock_guard lock(mutex_);
    return last_auth_;
  }

 private:
  Reply reply_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> calls_{0}, active_{0}, max_active_{0};
  mutable std::mutex mutex_;
  std::string last_body_, last_auth_;
};

StubJudge::Reply constant(int status, std::string content) {
  return [=](int) { return std::pair{status, content}; };
}

}  // namespace

TEST_CASE("score parser") {
  CHECK(parse_score("5", PromptKind::coherence) == 5);
  CHECK(parse_score("I think 3 maybe", PromptKind::coherence) == 3);
  CHECK(parse_score("Rating: 10 out of 10, so 4", PromptKind::spurious) == 4);
  CHECK(parse_score("score 2.", PromptKind::nsfw) == 2);
  CHECK_FALSE(parse_score("no idea", PromptKind::coherence).has_value());
  CHECK_FALSE(parse_score("7", PromptKind::coherence).has_value());
  CHECK(parse_score("Yes.", PromptKind::domain_relevance) == 1);
  CHECK(parse_score("no", PromptKind::domain_relevance) == 0);
  CHECK(parse_score("answer: 1", PromptKind::domain_relevance) == 1);
  CHECK_FALSE(parse_score("maybe", PromptKind::domain_relevance).has_value());
}

TEST_CASE("prompt rendering") {
  const std::string p = render_prompt({"cat", "feline fur"}, PromptKind::coherence);
  CHECK(p.find("- cat\n- feline fur") != std::string::npos);
  CHECK(p.find("{{concepts}}") == std::string::npos);
  CHECK(render_prompt({"wheel"}, PromptKind::domain_relevance, "cars").find("cars") != std::string::npos);
  CHECK_THROWS_AS(render_prompt({"wheel"}, PromptKind::domain_relevance), ValidationError);
  CHECK_THROWS_AS(render_prompt({}, PromptKind::coherence), ValidationError);
  CHECK_THROWS_AS(render_prompt(std::vector<std::string>(51, "x"), PromptKind::coherence), ValidationError);
  for (auto k : {PromptKind::coherence, PromptKind::spurious, PromptKind::nsfw, PromptKind::domain_relevance})
    CHECK(prompt_kind_from_string(to_string(k)) == k);
}

TEST_CASE("config validation") {
  JudgeConfig cfg{"http://x", "m", "", 0};
  CHECK_THROWS_AS(validate(cfg), ValidationError);
  cfg.max_concurrency = 1;
  cfg.timeout_seconds = 0;
  CHECK_THROWS_AS(validate(cfg), ValidationError);
}

TEST_CASE("stub judge returns a score and receives the request") {
  StubJudge stub(constant(200, "5"));
  CHECK(judge_concepts({"cat", "feline fur"}, PromptKind::coherence, std::nullopt, stub.config()) == 5);
  const auto body = nlohmann::json::parse(stub.last_body());
  CHECK(body["model"] == "stub-model");
  CHECK(body["messages"][0]["role"] == "user");
  CHECK(body["messages"][0]["content"].get<std::string>().find("feline fur") != std::string::npos);
  CHECK(stub.last_auth() == "Bearer secret");
}

TEST_CASE("rate limits are retried within the budget") {
  StubJudge stub([](int call) { return call < 2 ? std::pair{429, std::string("slow down")} : std::pair{200, std::string("2")}; });
  CHECK(judge_concepts({"a"}, PromptKind::spurious, std::nullopt, stub.config()) == 2);
  CHECK(stub.calls() == 3);

  StubJudge always(constant(503, "down"));
  JudgeConfig cfg = always.config();
  cfg.retry_budget = 1;
  CHECK_THROWS_AS(judge_concepts({"a"}, PromptKind::spurious, std::nullopt, cfg), JudgeError);
  CHECK(always.calls() == 2);
}

TEST_CASE("client errors and unparseable replies are judge errors") {
  StubJudge bad(constant(400, "x"));
  CHECK_THROWS_AS(judge_concepts({"a"}, PromptKind::nsfw, std::nullopt, bad.config()), JudgeError);
  CHECK(bad.calls() == 1);

  StubJudge vague(constant(200, "hard to say"));
  try {
    judge_concepts({"a"}, PromptKind::coherence, std::nullopt, vague.config());
    FAIL("expected an error");
  } catch (const JudgeError& e) {
    CHECK(std::string(e.what()).find("hard to say") != std::string::npos);
  }
}

TEST_CASE("transport failure is reported after retries") {
  JudgeConfig cfg{"http://127.0.0.1:1/v1", "m", "", 1, 1, 1.0, 0.01};
  CHECK_THROWS_AS(judge_concepts({"a"}, PromptKind::coherence, std::nullopt, cfg), JudgeError);
}

TEST_CASE("concurrency never exceeds the configured bound and order is kept") {
  StubJudge stub(constant(200, "3"), 40);
  JudgeConfig cfg = stub.config();
  cfg.max_concurrency = 2;
  std::vector<std::vector<std::string>> sets(8, {"a", "b"});
  const auto scores = judge_many(sets, PromptKind::coherence, std::nullopt, cfg);
  CHECK(scores == std::vector<int>(8, 3));
  CHECK(stub.max_active() <= 2);
  CHECK(stub.max_active() >= 1);
}

TEST_CASE("judge_many keeps input order") {
  // Answers with the digit of the first concept so order is observable.
  httplib::Server echo;
  echo.Post("/chat/completions", [](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    const auto text = body["messages"][0]["content"].get<std::string>();
    const auto pos = text.find("- c");
    const std::string digit = text.substr(pos + 3, 1);
    nlohmann::json out{{"choices", {{{"message", {{"content", digit}}}}}}};
    res.set_content(out.dump(), "application/json");
  });
  const int port = echo.bind_to_any_port("127.0.0.1");
  std::thread t([&] { echo.listen_after_bind(); });
  echo.wait_until_ready();
  JudgeConfig cfg{"http://127.0.0.1:" + std::to_string(port), "m", "", 3, 0, 5.0, 0.01};
  const auto scores = judge_many({{"c4"}, {"c1"}, {"c5"}, {"c2"}, {"c3"}}, PromptKind::coherence, std::nullopt, cfg);
  echo.stop();
  t.join();
  CHECK(scores == std::vector<int>{4, 1, 5, 2, 3});
}

TEST_CASE("proxy coherence thresholds") {
  Matrix same(3, 2);
  same << 1, 0, 1, 0, 1, 0;
  const std::vector<int> all{0, 1, 2};
  CHECK(proxy_coherence(all, same) == 5);
  CHECK(proxy_coherence(all, Matrix::Identity(3, 3)) == 1);
  const std::vector<int> one{0};
  CHECK_THROWS_AS(proxy_coherence(one, same), ValidationError);

  headsvd::testing::Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const Matrix d = rng.unit_rows(3, 4);
    const double m = (d.row(0).dot(d.row(1)) + d.row(0).dot(d.row(2)) + d.row(1).dot(d.row(2))) / 3.0;
    const int expect = m < 0.1 ? 1 : m < 0.25 ? 2 : m < 0.45 ? 3 : m < 0.65 ? 4 : 5;
    CHECK(proxy_coherence(all, d) == expect);
    const std::vector<int> reversed{2, 0, 1};
    CHECK(proxy_coherence(reversed, d) == expect);
  }
}

TEST_CASE("proxy anchor score") {
  Matrix d(3, 2);
  d << 1, 0, 0, 1, 1, 0;
  const std::vector<int> concepts{0}, anchors{2}, other{1};
  CHECK(proxy_anchor_score(concepts, anchors, d) == 5);
  CHECK(proxy_anchor_score(concepts, other, d) == 1);
  CHECK_THROWS_AS(proxy_anchor_score(concepts, {}, d), ValidationError);
}
