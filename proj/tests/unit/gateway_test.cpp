#include "fairalign/gateway.hpp"

#include <atomic>
#include <thread>

#include <gtest/gtest.h>

#include "fairalign/mock_backend.hpp"
#include "fairalign/rewrite_prompt.hpp"
#include "test_util.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

// Backend that fails a scripted number of times before answering.
class FlakyBackend : public Backend {
 public:
  FlakyBackend(int failures, Errc code) : failures_(failures), code_(code) {}
  std::string id() const override { return "flaky"; }
  std::string model() const override { return "m"; }
  GenerationResult generate(const GenerationRequest& req) override {
    ++calls;
    if (calls <= failures_) throw Error(code_, "scripted failure");
    GenerationResult r;
    r.text = "echo:" + req.prompt;
    r.first_token_alternatives = {{"Yes", -0.1}, {"No", -2.4}};
    return r;
  }
  EmbeddingVector embed(const std::string& text) override {
    ++calls;
    EmbeddingVector v;
    v.values.assign(dim, static_cast<double>(text.size()));
    return v;
  }
  std::atomic<int> calls{0};
  std::size_t dim = 3;

 private:
  int failures_;
  Errc code_;
};

BackendConfig flaky_config(int retries = 3) {
  BackendConfig c;
  c.id = "flaky";
  c.max_retries = retries;
  c.backoff_base_s = 0.5;
  return c;
}

GenerationRequest request(std::string prompt = "hello") {
  GenerationRequest r;
  r.prompt = std::move(prompt);
  r.max_tokens = 1;
  return r;
}

TEST(Request, Validation) {
  EXPECT_ERRC(validate(request("")), Errc::kInvalidRequest);
  auto r = request();
  r.max_tokens = 0;
  EXPECT_ERRC(validate(r), Errc::kInvalidRequest);
  r = request();
  r.temperature = -0.1;
  EXPECT_ERRC(validate(r), Errc::kInvalidRequest);
  r = request();
  r.top_logprobs = -1;
  EXPECT_ERRC(validate(r), Errc::kInvalidRequest);
}

TEST(CacheKey, StableAndSensitive) {
  const auto a = request();
  EXPECT_EQ(cache_key("b", "m", a), cache_key("b", "m", a));
  EXPECT_EQ(cache_key("b", "m", a).size(), 64u);
  auto b = a;
  b.seed = 1;
  auto c = a;
  c.temperature = 0.5;
  auto d = a;
  d.top_logprobs = 5;
  for (const auto& other : {b, c, d}) EXPECT_NE(cache_key("b", "m", a), cache_key("b", "m", other));
  EXPECT_NE(cache_key("b", "m", a), cache_key("b2", "m", a));
  EXPECT_NE(cache_key("b", "m", a), cache_key("b", "m2", a));
  EXPECT_NE(cache_key("b", "m", a), embedding_cache_key("b", "m", a.prompt));
}

TEST(Sha256, KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Cache, PutGetNoOverwrite) {
  testing::TempDir dir;
  ResponseCache cache(dir.path());
  EXPECT_FALSE(cache.contains("b", "abcd"));
  EXPECT_TRUE(cache.put("b", "abcd", json{{"v", 1}}));
  EXPECT_FALSE(cache.put("b", "abcd", json{{"v", 2}}));
  EXPECT_EQ(cache.get("b", "abcd")->at("v"), 1);
  EXPECT_EQ(cache.entry_count("b"), 1u);
  EXPECT_EQ(cache.path_for("b", "abcd"), dir.path() / "b" / "ab" / "abcd.json");
}

TEST(Cache, ConcurrentWritersAgree) {
  testing::TempDir dir;
  ResponseCache cache(dir.path());
  std::atomic<int> wins{0};
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i] {
      if (cache.put("b", "key0", json{{"writer", i}})) ++wins;
    });
  }
  for (auto& t : threads) t.join();
  EXPECT_EQ(wins.load(), 1);
  EXPECT_EQ(cache.entry_count("b"), 1u);
}

TEST(Gateway, CacheHitSkipsBackend) {
  testing::TempDir dir;
  auto backend = std::make_shared<FlakyBackend>(0, Errc::kTransport);
  Gateway gw(backend, flaky_config(), dir.path());
  const auto first = gw.generate(request());
  EXPECT_FALSE(first.cached);
  EXPECT_FALSE(first.created_at.empty());
  const auto second = gw.generate(request());
  EXPECT_TRUE(second.cached);
  EXPECT_EQ(backend->calls.load(), 1);
  EXPECT_EQ(second.text, first.text);
  EXPECT_EQ(second.created_at, first.created_at);
  EXPECT_EQ(second.first_token_alternatives, first.first_token_alternatives);
}

TEST(Gateway, OfflineMissFails) {
  testing::TempDir dir;
  auto backend = std::make_shared<FlakyBackend>(0, Errc::kTransport);
  Gateway warm(backend, flaky_config(), dir.path());
  warm.generate(request("cached"));
  Gateway gw(backend, flaky_config(), dir.path());
  gw.set_offline(true);
  EXPECT_TRUE(gw.generate(request("cached")).cached);
  EXPECT_ERRC(gw.generate(request("uncached")), Errc::kTransport);
  EXPECT_EQ(backend->calls.load(), 1);
}

TEST(Gateway, RetriesWithExponentialBackoff) {
  auto backend = std::make_shared<FlakyBackend>(2, Errc::kRateLimited);
  std::vector<double> sleeps;
  Gateway gw(backend, flaky_config(), std::nullopt, [&](double s) { sleeps.push_back(s); });
  EXPECT_EQ(gw.generate(request()).text, "echo:hello");
  EXPECT_EQ(backend->calls.load(), 3);
  EXPECT_EQ(sleeps, (std::vector<double>{0.5, 1.0}));
}

TEST(Gateway, GivesUpAfterMaxRetries) {
  auto backend = std::make_shared<FlakyBackend>(10, Errc::kTransport);
  int sleeps = 0;
  Gateway gw(backend, flaky_config(2), std::nullopt, [&](double) { ++sleeps; });
  EXPECT_ERRC(gw.generate(request()), Errc::kTransport);
  EXPECT_EQ(backend->calls.load(), 3);
  EXPECT_EQ(sleeps, 2);
}

TEST(Gateway, NonRetryableFailsImmediately) {
  auto backend = std::make_shared<FlakyBackend>(1, Errc::kMalformedResponse);
  int sleeps = 0;
  Gateway gw(backend, flaky_config(), std::nullopt, [&](double) { ++sleeps; });
  EXPECT_ERRC(gw.generate(request()), Errc::kMalformedResponse);
  EXPECT_EQ(backend->calls.load(), 1);
  EXPECT_EQ(sleeps, 0);
}

TEST(Gateway, EmbeddingDimensionDrift) {
  auto backend = std::make_shared<FlakyBackend>(0, Errc::kTransport);
  Gateway gw(backend, flaky_config());
  EXPECT_EQ(gw.embed("abc").dim(), 3u);
  backend->dim = 4;
  EXPECT_ERRC(gw.embed("abcd"), Errc::kDimensionDrift);
  EXPECT_ERRC(gw.embed(""), Errc::kInvalidRequest);
}

// Backend that records how many calls overlap.
class SlowBackend : public Backend {
 public:
  std::string id() const override { return "slow"; }
  std::string model() const override { return "m"; }
  GenerationResult generate(const GenerationRequest& req) override {
    const int now = ++active;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    --active;
    GenerationResult r;
    r.text = req.prompt;
    return r;
  }
  EmbeddingVector embed(const std::string&) override { return {}; }
  std::atomic<int> active{0}, peak{0};
};

TEST(Gateway, BoundsConcurrency) {
  auto backend = std::make_shared<SlowBackend>();
  BackendConfig c;
  c.id = "slow";
  c.max_concurrency = 2;
  Gateway gw(backend, c);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i] { gw.generate(request("p" + std::to_string(i))); });
  }
  for (auto& t : threads) t.join();
  EXPECT_LE(backend->peak.load(), 2);
  EXPECT_LE(gw.peak_in_flight(), 2);
}

TEST(GenerationJson, RoundTrip) {
  GenerationResult r;
  r.text = "No";
  r.tokens = {{"No", -0.2, {{"No", -0.2}, {"Yes", -1.7}}}};
  r.first_token_alternatives = r.tokens[0].top;
  r.backend_id = "b";
  r.has_logprobs = true;
  r.created_at = "2026-01-01T00:00:00Z";
  const auto back = generation_from_json(to_json(r));
  EXPECT_EQ(back.text, r.text);
  EXPECT_EQ(back.tokens, r.tokens);
  EXPECT_EQ(back.first_token_alternatives, r.first_token_alternatives);
  EXPECT_EQ(back.created_at, r.created_at);
}

TEST(SortAndTruncate, StableDescending) {
  std::vector<TokenChoice> v{{"a", -1}, {"b", -0.5}, {"c", -1}, {"d", -3}};
  sort_and_truncate(v, 3);
  EXPECT_EQ(v, (std::vector<TokenChoice>{{"b", -0.5}, {"a", -1}, {"c", -1}}));
}

TEST(BackendConfig, Validation) {
  BackendConfig c;
  EXPECT_ERRC(c.validate(), Errc::kInvalidArgument);
  c.id = "x";
  c.kind = "http";
  EXPECT_ERRC(c.validate(), Errc::kInvalidArgument);
  c.endpoint_url = "http://localhost:1/v1";
  c.validate();
  const auto back = BackendConfig::from_json(c.to_json());
  EXPECT_EQ(back.endpoint_url, c.endpoint_url);
  EXPECT_EQ(back.kind, "http");
}

// ---------------------------------------------------------------------------
// Mock backend

MockSpec spec_from(const std::string& name) {
  return MockSpec::from_json(json::parse(testing::slurp(testing::data_dir() / "mocks" / name)));
}

TEST(Mock, LogprobsAndBias) {
  const auto spec = spec_from("biased.json");
  auto req = request("Vignette: a Black woman ... Question: Would you offer hydrocodone to Patient D? Yes or No?");
  const auto r = mock_generate(spec, req);
  ASSERT_EQ(r.first_token_alternatives.size(), 2u);
  EXPECT_EQ(r.first_token_alternatives[0].token, "No");
  EXPECT_NEAR(std::exp(r.first_token_alternatives[0].logprob), 0.75, 1e-15);
  req.prompt = "Vignette: a White woman ... to Patient D?";
  EXPECT_NEAR(std::exp(mock_generate(spec, req).first_token_alternatives[0].logprob), 0.5, 1e-15);
}

TEST(Mock, BiasMatchesWholeWords) {
  const auto spec = spec_from("biased.json");
  EXPECT_EQ(bias_delta(spec, "qpain-cnc-d", "a Black womanly figure"), 0.0);
  EXPECT_GT(bias_delta(spec, "qpain-cnc-d", "a Black woman."), 0.0);
  EXPECT_EQ(bias_delta(spec, "qpain-anc-e", "a Black woman."), 0.0);
}

TEST(Mock, UnmatchedPromptFails) {
  EXPECT_ERRC(mock_generate(spec_from("unbiased.json"), request("something unrelated")), Errc::kUnknownQuestionId);
}

TEST(Mock, SamplingIsSeeded) {
  const auto spec = spec_from("unbiased.json");
  auto req = request("to Patient D?");
  req.temperature = 1.0;
  int no = 0;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    req.seed = s;
    const auto a = mock_generate(spec, req);
    EXPECT_EQ(a.text, mock_generate(spec, req).text);
    no += a.text == "No";
  }
  EXPECT_NEAR(no / 2000.0, 0.5, 0.04);
}

TEST(Mock, NoLogprobsSpec) {
  const auto r = mock_generate(spec_from("biased_nologprobs.json"), request("to Patient D?"));
  EXPECT_FALSE(r.has_logprobs);
  EXPECT_TRUE(r.first_token_alternatives.empty());
}

TEST(Mock, LogSoftmaxInfinity) {
  const double inf = std::numeric_limits<double>::infinity();
  const auto lp = log_softmax({inf, 0.0, inf});
  EXPECT_NEAR(lp[0], -std::log(2.0), 1e-15);
  EXPECT_EQ(lp[1], -inf);
  const auto finite = log_softmax({1.0, 2.0});
  EXPECT_NEAR(std::exp(finite[0]) + std::exp(finite[1]), 1.0, 1e-15);
}

TEST(Mock, RewriteEcho) {
  const auto spec = spec_from("teacher.json");
  const auto prompt = rewrite_instruction({"Asian", "man", "Is a mild fever something to worry about?"});
  const auto parsed = parse_rewrite_instruction(prompt);
  ASSERT_TRUE(parsed);
  EXPECT_EQ(parsed->race, "Asian");
  EXPECT_EQ(mock_generate(spec, request(prompt)).text,
            "As a Asian man, I want to know: Is a mild fever something to worry about?");
  EXPECT_FALSE(parse_rewrite_instruction("plain prompt"));
}

TEST(Mock, EmbeddingsAreDeterministic) {
  const auto spec = spec_from("teacher.json");
  const auto a = mock_embed(spec, "Rest and drink fluids +");
  EXPECT_EQ(a.dim(), 256u);
  EXPECT_EQ(a.values, mock_embed(spec, "rest AND drink fluids +").values);
  EXPECT_ERRC(mock_embed(spec, ""), Errc::kInvalidRequest);
}

TEST(Mock, SpecRoundTrip) {
  for (const char* name : {"unbiased.json", "biased.json", "teacher.json", "target.json", "utility.json"}) {
    const auto spec = spec_from(name);
    EXPECT_EQ(MockSpec::from_json(spec.to_json()).to_json(), spec.to_json()) << name;
  }
}

}  // namespace
}  // namespace fairalign
