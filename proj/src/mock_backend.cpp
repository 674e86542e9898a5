#include "fairalign/mock_backend.hpp"

#include <cctype>
#include <cmath>
#include <limits>

#include "fairalign/error.hpp"
#include "fairalign/rewrite_prompt.hpp"
#include "fairalign/seed.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

constexpr double kInf = std::numeric_limits<double>::infinity();

double number_or_infinity(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return kInf;
    if (s == "-inf") return -kInf;
    throw Error(Errc::kParseError, "expected a number or \"inf\", got '" + s + "'");
  }
  return j.get<double>();
}

json infinity_or_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

bool word_char(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

bool contains_phrase(std::string_view text, std::string_view phrase) {
  if (phrase.empty()) return false;
  for (std::size_t pos = text.find(phrase); pos != std::string_view::npos; pos = text.find(phrase, pos + 1)) {
    const bool left_ok = pos == 0 || !word_char(static_cast<unsigned char>(text[pos - 1]));
    const std::size_t end = pos + phrase.size();
    const bool right_ok = end == text.size() || !word_char(static_cast<unsigned char>(text[end]));
    if (left_ok && right_ok) return true;
  }
  return false;
}

// Index drawn by inverse CDF from the tempered distribution.
std::size_t sample_index(const std::vector<double>& logits, double temperature, double u) {
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / temperature;
  const auto lp = log_softmax(scaled);
  double cumulative = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    const double p = std::exp(lp[i]);
    if (p > 0.0) last_positive = i;
    cumulative += p;
    if (u < cumulative) return i;
  }
  return last_positive;
}

std::size_t argmax_first(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

GenerationResult generate_choice(const MockSpec& spec, const MockRule& rule, const GenerationRequest& req,
                                 std::string_view prompt) {
  const double delta = bias_delta(spec, rule.id, prompt);
  std::vector<double> logits;
  logits.reserve(rule.choices.size());
  for (const auto& c : rule.choices) logits.push_back(c.token == rule.negative ? c.logit + delta : c.logit);
  const auto lp = log_softmax(logits);

  std::size_t chosen;
  if (req.temperature == 0.0) {
    chosen = argmax_first(logits);
  } else {
    chosen = sample_index(logits, req.temperature, unit_interval(mix_seed(req.seed.value_or(0), "mock-sample")));
  }

  GenerationResult r;
  r.backend_id = spec.id;
  const MockChoice& c = rule.choices[chosen];
  r.text = c.text.empty() ? c.token : c.text;
  if (!spec.logprobs) {
    r.has_logprobs = false;
    return r;
  }
  GeneratedToken tok{c.token, lp[chosen], {}};
  for (std::size_t i = 0; i < rule.choices.size(); ++i) tok.top.push_back({rule.choices[i].token, lp[i]});
  sort_and_truncate(tok.top, req.top_logprobs);
  r.first_token_alternatives = tok.top;
  r.tokens.push_back(std::move(tok));
  return r;
}

GenerationResult generate_json(const MockSpec& spec, const MockRule& rule, const GenerationRequest& req,
                               std::string_view prompt) {
  const double delta = bias_delta(spec, rule.id, prompt);
  GenerationResult r;
  r.backend_id = spec.id;
  r.has_logprobs = spec.logprobs;

  // Text is {"f1": b1, "f2": b2}; tokens alternate literal runs and booleans.
  for (std::size_t f = 0; f < rule.fields.size(); ++f) {
    const std::string literal = (f == 0 ? "{\"" : ", \"") + rule.fields[f] + "\": ";
    const std::vector<double> logits{rule.boolean_logits[f].first, rule.boolean_logits[f].second + delta};
    const auto lp = log_softmax(logits);
    std::size_t chosen;
    if (req.temperature == 0.0) {
      chosen = argmax_first(logits);
    } else {
      chosen = sample_index(logits, req.temperature, unit_interval(mix_seed(req.seed.value_or(0), f + 1)));
    }
    const std::string value = chosen == 0 ? "true" : "false";
    r.text += literal + value;
    if (spec.logprobs) {
      r.tokens.push_back({literal, 0.0, {}});
      GeneratedToken tok{value, lp[chosen], {{"true", lp[0]}, {"false", lp[1]}}};
      sort_and_truncate(tok.top, req.top_logprobs);
      r.tokens.push_back(std::move(tok));
    }
  }
  r.text += "}";
  if (spec.logprobs) {
    r.tokens.push_back({"}", 0.0, {}});
    r.first_token_alternatives = r.tokens.front().top;
  }
  return r;
}

GenerationResult generate_text(const MockSpec& spec, const MockRule& rule, const GenerationRequest& req) {
  GenerationResult r;
  r.backend_id = spec.id;
  const std::size_t n = rule.answers.size();
  const std::size_t index = req.temperature == 0.0 ? 0 : static_cast<std::size_t>(req.seed.value_or(0) % n);
  r.text = rule.answers[index];
  if (!spec.logprobs) {
    r.has_logprobs = false;
    return r;
  }
  const double lp = req.temperature == 0.0 ? 0.0 : -std::log(static_cast<double>(n));
  r.tokens.push_back({r.text, lp, {}});
  return r;
}

GenerationResult generate_rewrite(const MockSpec& spec, const RewriteInstruction& ins) {
  GenerationResult r;
  r.backend_id = spec.id;
  r.has_logprobs = false;
  if (spec.rewrite == MockRewriteStyle::kOmitRace) {
    r.text = "As a " + ins.gender + ", I want to know: " + ins.question;
  } else {
    r.text = "As a " + ins.race + " " + ins.gender + ", I want to know: " + ins.question;
  }
  return r;
}

}  // namespace

MockSpec MockSpec::from_json(const json& j) {
  MockSpec spec;
  spec.id = j.value("id", "");
  spec.logprobs = j.value("logprobs", true);
  spec.embedding_dim = j.value("embedding_dim", std::size_t{64});
  if (spec.embedding_dim == 0) throw Error(Errc::kParseError, "mock embedding_dim must be positive");
  const std::string rewrite = j.value("rewrite", "none");
  if (rewrite == "none") {
    spec.rewrite = MockRewriteStyle::kNone;
  } else if (rewrite == "echo") {
    spec.rewrite = MockRewriteStyle::kEcho;
  } else if (rewrite == "omit-race") {
    spec.rewrite = MockRewriteStyle::kOmitRace;
  } else {
    throw Error(Errc::kParseError, "unknown mock rewrite style '" + rewrite + "'");
  }

  for (const auto& rj : j.value("rules", json::array())) {
    MockRule rule;
    rule.id = rj.at("id").get<std::string>();
    rule.match = rj.at("match").get<std::string>();
    const std::string kind = rj.value("kind", "choice");
    if (kind == "choice") {
      rule.kind = MockRuleKind::kChoice;
      for (const auto& cj : rj.at("choices")) {
        rule.choices.push_back({cj.at("token").get<std::string>(), number_or_infinity(cj.value("logit", json(0.0))),
                                cj.value("text", "")});
      }
      rule.negative = rj.value("negative", "No");
      if (rule.choices.empty()) throw Error(Errc::kParseError, "mock rule '" + rule.id + "' has no choices");
    } else if (kind == "json-booleans") {
      rule.kind = MockRuleKind::kJsonBooleans;
      rule.fields = rj.at("fields").get<std::vector<std::string>>();
      for (const auto& pair : rj.at("logits")) {
        rule.boolean_logits.emplace_back(number_or_infinity(pair.at(0)), number_or_infinity(pair.at(1)));
      }
      if (rule.fields.size() != rule.boolean_logits.size() || rule.fields.empty()) {
        throw Error(Errc::kParseError, "mock rule '" + rule.id + "' needs one logit pair per field");
      }
    } else if (kind == "text") {
      rule.kind = MockRuleKind::kText;
      rule.answers = rj.at("answers").get<std::vector<std::string>>();
      if (rule.answers.empty()) throw Error(Errc::kParseError, "mock rule '" + rule.id + "' has no answers");
    } else {
      throw Error(Errc::kParseError, "unknown mock rule kind '" + kind + "'");
    }
    spec.rules.push_back(std::move(rule));
  }
  for (const auto& bj : j.value("bias", json::array())) {
    spec.bias.push_back({bj.at("question_id").get<std::string>(), bj.at("group").get<std::string>(),
                         number_or_infinity(bj.at("delta"))});
  }
  return spec;
}

json MockSpec::to_json() const {
  json rules_json = json::array();
  for (const auto& rule : rules) {
    json rj{{"id", rule.id}, {"match", rule.match}};
    switch (rule.kind) {
      case MockRuleKind::kChoice: {
        rj["kind"] = "choice";
        json cs = json::array();
        for (const auto& c : rule.choices) {
          json cj{{"token", c.token}, {"logit", infinity_or_number(c.logit)}};
          if (!c.text.empty()) cj["text"] = c.text;
          cs.push_back(cj);
        }
        rj["choices"] = cs;
        rj["negative"] = rule.negative;
        break;
      }
      case MockRuleKind::kJsonBooleans: {
        rj["kind"] = "json-booleans";
        rj["fields"] = rule.fields;
        json ls = json::array();
        for (const auto& [t, f] : rule.boolean_logits) ls.push_back({infinity_or_number(t), infinity_or_number(f)});
        rj["logits"] = ls;
        break;
      }
      case MockRuleKind::kText:
        rj["kind"] = "text";
        rj["answers"] = rule.answers;
        break;
    }
    rules_json.push_back(rj);
  }
  json bias_json = json::array();
  for (const auto& b : bias) {
    bias_json.push_back({{"question_id", b.question_id}, {"group", b.group}, {"delta", infinity_or_number(b.delta)}});
  }
  const char* rewrite_name = rewrite == MockRewriteStyle::kEcho       ? "echo"
                             : rewrite == MockRewriteStyle::kOmitRace ? "omit-race"
                                                                      : "none";
  return {{"id", id},         {"rules", rules_json},           {"bias", bias_json},
          {"logprobs", logprobs}, {"rewrite", rewrite_name}, {"embedding_dim", embedding_dim}};
}

const MockRule& match_rule(const MockSpec& spec, std::string_view prompt) {
  for (const auto& rule : spec.rules) {
    if (prompt.find(rule.match) != std::string_view::npos) return rule;
  }
  const std::string head(prompt.substr(0, 60));
  throw Error(Errc::kUnknownQuestionId, "no mock rule matches prompt starting '" + head + "'");
}

double bias_delta(const MockSpec& spec, std::string_view question_id, std::string_view prompt) {
  double delta = 0.0;
  for (const auto& b : spec.bias) {
    if (b.question_id == question_id && contains_phrase(prompt, b.group)) delta += b.delta;
  }
  return delta;
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
  std::vector<double> out(logits.size(), -kInf);
  if (logits.empty()) return out;
  double m = -kInf;
  for (double z : logits) m = std::max(m, z);
  if (std::isinf(m) && m > 0) {
    double count = 0;
    for (double z : logits) count += (z == kInf) ? 1.0 : 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] == kInf ? -std::log(count) : -kInf;
    return out;
  }
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - m);
  const double lse = m + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

GenerationResult mock_generate(const MockSpec& spec, const GenerationRequest& req) {
  validate(req);
  if (spec.rewrite != MockRewriteStyle::kNone) {
    if (auto ins = parse_rewrite_instruction(req.prompt)) return generate_rewrite(spec, *ins);
  }
  const MockRule& rule = match_rule(spec, req.prompt);
  switch (rule.kind) {
    case MockRuleKind::kChoice: return generate_choice(spec, rule, req, req.prompt);
    case MockRuleKind::kJsonBooleans: return generate_json(spec, rule, req, req.prompt);
    case MockRuleKind::kText: return generate_text(spec, rule, req);
  }
  throw Error(Errc::kUnknownQuestionId, "unhandled mock rule kind");
}

EmbeddingVector mock_embed(const MockSpec& spec, std::string_view text) {
  if (text.empty()) throw Error(Errc::kInvalidRequest, "cannot embed an empty string");
  EmbeddingVector v;
  v.values.assign(spec.embedding_dim, 0.0);
  auto add_token = [&](std::string_view token) {
    std::string lower(token);
    for (auto& ch : lower) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    const std::uint64_t h = splitmix64(fnv1a64(lower));
    const std::size_t index = static_cast<std::size_t>(bounded(h, spec.embedding_dim));
    v.values[index] += (h & 1) ? 1.0 : -1.0;
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
    } else if (word_char(c)) {
      std::size_t j = i;
      while (j < text.size() && word_char(static_cast<unsigned char>(text[j]))) ++j;
      add_token(text.substr(i, j - i));
      i = j;
    } else {
      add_token(text.substr(i, 1));
      ++i;
    }
  }
  return v;
}

GenerationResult MockBackend::generate(const GenerationRequest& req) { return mock_generate(spec_, req); }

EmbeddingVector MockBackend::embed(const std::string& text) { return mock_embed(spec_, text); }

}  // namespace fairalign
