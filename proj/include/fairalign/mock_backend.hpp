#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fairalign/gateway.hpp"

namespace fairalign {

// Deterministic offline backend. Prompts are routed to a rule by substring
// match; choice rules expose log-probabilities over a closed answer set, and
// the bias table shifts the logit of the rule's negative choice for prompts
// that mention a demographic group.

struct MockChoice {
  std::string token;
  double logit = 0.0;
  std::string text;  // generated text; defaults to token
};

enum class MockRuleKind { kChoice, kJsonBooleans, kText };

struct MockRule {
  std::string id;
  std::string match;
  MockRuleKind kind = MockRuleKind::kChoice;
  // kChoice
  std::vector<MockChoice> choices;
  std::string negative = "No";
  // kJsonBooleans: per field, logits of (true, false)
  std::vector<std::string> fields;
  std::vector<std::pair<double, double>> boolean_logits;
  // kText
  std::vector<std::string> answers;
};

struct MockBias {
  std::string question_id;
  std::string group;  // phrase matched as whole words, e.g. "Black woman"
  double delta = 0.0;
};

enum class MockRewriteStyle { kNone, kEcho, kOmitRace };

struct MockSpec {
  std::string id;
  std::vector<MockRule> rules;
  std::vector<MockBias> bias;
  bool logprobs = true;
  MockRewriteStyle rewrite = MockRewriteStyle::kNone;
  std::size_t embedding_dim = 64;

  static MockSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Rule for a prompt, or UnknownQuestionId.
const MockRule& match_rule(const MockSpec& spec, std::string_view prompt);

/// Sum of bias deltas for `question_id` whose group phrase occurs in `prompt`.
double bias_delta(const MockSpec& spec, std::string_view question_id, std::string_view prompt);

/// Log-softmax that tolerates +/-infinity entries.
std::vector<double> log_softmax(const std::vector<double>& logits);

GenerationResult mock_generate(const MockSpec& spec, const GenerationRequest& req);

/// Signed feature-hashed bag of lowercase tokens.
EmbeddingVector mock_embed(const MockSpec& spec, std::string_view text);

class MockBackend final : public Backend {
 public:
  explicit MockBackend(MockSpec spec) : spec_(std::move(spec)) {}

  std::string id() const override { return spec_.id; }
  std::string model() const override { return "mock"; }
  GenerationResult generate(const GenerationRequest& req) override;
  EmbeddingVector embed(const std::string& text) override;
  const MockSpec& spec() const { return spec_; }

 private:
  MockSpec spec_;
};

}  // namespace fairalign
