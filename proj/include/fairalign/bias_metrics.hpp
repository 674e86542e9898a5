#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fairalign/gateway.hpp"
#include "fairalign/stats.hpp"
#include "fairalign/vignette.hpp"

namespace fairalign {

// ---------------------------------------------------------------------------
// Outcome extraction

using TokenSet = std::set<std::string>;

/// Lowercases and strips one leading whitespace character.
std::string normalize_choice_token(std::string_view token);

/// P(negative) renormalized over the alternatives that match either set.
/// Throws NoChoiceTokenFound when none match or the matched mass is zero.
double closed_answer_probability(const std::vector<TokenChoice>& alternatives, const TokenSet& positive,
                                 const TokenSet& negative);
double closed_answer_probability(const GenerationResult& result, const TokenSet& positive,
                                 const TokenSet& negative);

/// Label whose token set carries the most probability mass; ties go to the
/// earlier label. Throws NoChoiceTokenFound when no set matches.
std::string closed_answer_label(const std::vector<TokenChoice>& alternatives,
                                const std::vector<std::pair<std::string, TokenSet>>& labels);

inline const TokenSet kYesTokens{"yes"};
inline const TokenSet kNoTokens{"no"};

/// First digit 1..5 in the text.
std::optional<int> parse_likert_rating(std::string_view text);

/// First "yes"/"no" word (case-insensitive) in the text.
std::optional<bool> parse_yes_no(std::string_view text);

/// Reads the two boolean fields from the first JSON object in the text.
std::optional<std::pair<bool, bool>> parse_two_booleans(std::string_view text,
                                                        const std::vector<std::string>& fields);

/// P(false) for each boolean position, from the per-token alternatives of the
/// first two tokens that read "true"/"false".
std::optional<std::pair<double, double>> boolean_position_probabilities(const GenerationResult& result);

// ---------------------------------------------------------------------------
// Samples

struct BinaryOutcomeSample {
  std::string question_id;
  DemographicProfile profile;
  double p_negative = 0.0;
  PromptStrategy strategy = PromptStrategy::kZeroShot;

  BinaryOutcomeSample(std::string question, DemographicProfile who, double p, PromptStrategy s);
};

struct LikertSample {
  std::string question_id;
  DemographicProfile profile;
  int rating = 3;

  /// Throws DomainError unless rating is in 1..5.
  LikertSample(std::string question, DemographicProfile who, int value);
};

// ---------------------------------------------------------------------------
// Metrics

struct MaxDifference {
  double value = 0.0;
  std::string group_hi;
  std::string group_lo;
};

/// max - min with (argmax, argmin); ties go to the lexicographically first
/// group, and argmin never equals argmax.
MaxDifference max_pairwise_difference(const std::map<std::string, double>& values);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

MeanStd average_max_difference(const std::vector<double>& per_question);

using LikertDistribution = std::map<std::string, std::array<double, 5>>;

LikertDistribution likert_distribution(const std::vector<LikertSample>& samples);

double accuracy(const std::vector<std::string>& predictions, const std::vector<std::string>& gold);

// ---------------------------------------------------------------------------
// Report

struct ReportKey {
  std::string model;
  std::string task;
  std::string strategy;

  auto operator<=>(const ReportKey&) const = default;
};

struct QuestionDifference {
  std::string question_id;
  MaxDifference max_diff;
  std::map<std::string, double> group_values;
  std::optional<stats::TestResult> test;  // Welch over repeated observations
  std::vector<std::string> epsilon_groups;
};

struct BinaryTaskSummary {
  ReportKey key;
  std::vector<QuestionDifference> questions;
  MeanStd average;
  std::optional<stats::TestResult> welch;  // groups x per-question values
  std::vector<std::string> epsilon_groups;
  std::string note;
};

struct PairwiseTest {
  std::string group_a;
  std::string group_b;
  std::optional<stats::TestResult> test;
};

struct LikertQuestionTest {
  std::string question_id;
  std::optional<stats::TestResult> test;
};

struct LikertTaskSummary {
  ReportKey key;
  LikertDistribution distribution;
  std::map<std::string, std::int64_t> counts;
  std::int64_t excluded = 0;
  std::optional<stats::TestResult> chi_squared;
  std::vector<LikertQuestionTest> per_question;
  std::vector<PairwiseTest> pairwise;
  std::string note;
};

struct BiasReport {
  double alpha = stats::kDefaultAlpha;
  std::vector<BinaryTaskSummary> binary;
  std::vector<LikertTaskSummary> likert;

  nlohmann::json to_json() const;
  /// Columns: model, task, strategy, question_id, max_diff, group_hi,
  /// group_lo, test, statistic, df1, df2, p, significant.
  std::string to_csv() const;
};

/// Per-question max differences plus task-level Welch's ANOVA. Several
/// samples for one (question, group) are averaged, and a per-question Welch
/// test is emitted when every group has at least two.
BinaryTaskSummary summarize_binary(const ReportKey& key, const std::vector<BinaryOutcomeSample>& samples,
                                   double alpha = stats::kDefaultAlpha);

LikertTaskSummary summarize_likert(const ReportKey& key, const std::vector<LikertSample>& samples,
                                   std::int64_t excluded, double alpha = stats::kDefaultAlpha);

nlohmann::json test_to_json(const std::optional<stats::TestResult>& t);

}  // namespace fairalign
