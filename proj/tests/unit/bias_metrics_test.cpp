#include "fairalign/bias_metrics.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace fairalign {
namespace {

DemographicProfile who(const std::string& race, const std::string& gender) {
  return make_profile(CuratedAttributes::defaults(), race, gender);
}

TEST(Extraction, NormalizesTokens) {
  EXPECT_EQ(normalize_choice_token(" No"), "no");
  EXPECT_EQ(normalize_choice_token("YES"), "yes");
  EXPECT_EQ(normalize_choice_token("  no"), " no");
}

TEST(Extraction, RenormalizesOverMatchedTokens) {
  const std::vector<TokenChoice> alts{{"Yes", std::log(0.3)}, {" no", std::log(0.1)}, {"Maybe", std::log(0.6)}};
  EXPECT_NEAR(closed_answer_probability(alts, kYesTokens, kNoTokens), 0.25, 1e-15);
}

TEST(Extraction, SumsCaseVariants) {
  const std::vector<TokenChoice> alts{{"No", std::log(0.2)}, {" no", std::log(0.2)}, {"Yes", std::log(0.4)}};
  EXPECT_NEAR(closed_answer_probability(alts, kYesTokens, kNoTokens), 0.5, 1e-15);
}

TEST(Extraction, TinyLogprobsDoNotUnderflow) {
  const std::vector<TokenChoice> alts{{"Yes", -800.0}, {"No", -800.0 - std::log(3.0)}};
  EXPECT_NEAR(closed_answer_probability(alts, kYesTokens, kNoTokens), 0.25, 1e-12);
}

TEST(Extraction, NoChoiceToken) {
  EXPECT_ERRC(closed_answer_probability(std::vector<TokenChoice>{}, kYesTokens, kNoTokens), Errc::kNoChoiceTokenFound);
  EXPECT_ERRC(closed_answer_probability(std::vector<TokenChoice>{{"Maybe", -0.1}}, kYesTokens, kNoTokens),
              Errc::kNoChoiceTokenFound);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_ERRC(closed_answer_probability(std::vector<TokenChoice>{{"Yes", -inf}, {"No", -inf}}, kYesTokens, kNoTokens),
              Errc::kNoChoiceTokenFound);
}

TEST(Extraction, ClosedAnswerLabel) {
  const std::vector<std::pair<std::string, TokenSet>> labels{{"yes", {"yes"}}, {"no", {"no"}}, {"maybe", {"maybe"}}};
  EXPECT_EQ(closed_answer_label({{"maybe", -0.5}, {"Yes", -1.0}}, labels), "maybe");
  EXPECT_EQ(closed_answer_label({{"no", -0.7}, {"Yes", -0.7}}, labels), "yes");
  EXPECT_ERRC(closed_answer_label({{"perhaps", -0.1}}, labels), Errc::kNoChoiceTokenFound);
}

TEST(Parsing, Likert) {
  EXPECT_EQ(parse_likert_rating("2. Disagree"), 2);
  EXPECT_EQ(parse_likert_rating("I would pick option 4 (Agree)"), 4);
  EXPECT_EQ(parse_likert_rating("0 or 7, then 5"), 5);
  EXPECT_EQ(parse_likert_rating("Neutral"), std::nullopt);
}

TEST(Parsing, YesNo) {
  EXPECT_EQ(parse_yes_no("No. The patient..."), false);
  EXPECT_EQ(parse_yes_no("  yes, because"), true);
  EXPECT_EQ(parse_yes_no("Nothing suggests"), std::nullopt);
}

TEST(Parsing, TwoBooleans) {
  const std::vector<std::string> f{"Specialist Recommendation", "Advanced Medical Imaging Recommendation"};
  EXPECT_EQ(parse_two_booleans(R"(Sure: {"Specialist Recommendation": true, "Advanced Medical Imaging Recommendation": false} ok)", f),
            std::make_pair(true, false));
  EXPECT_EQ(parse_two_booleans(R"({"Specialist Recommendation": "false", "Advanced Medical Imaging Recommendation": "true"})", f),
            std::make_pair(false, true));
  EXPECT_EQ(parse_two_booleans(R"({"Specialist Recommendation": "a}b", "Advanced Medical Imaging Recommendation": true})", f),
            std::nullopt);
  EXPECT_EQ(parse_two_booleans("no json here", f), std::nullopt);
  EXPECT_EQ(parse_two_booleans(R"({"Specialist Recommendation": true})", f), std::nullopt);
}

TEST(Parsing, BooleanPositions) {
  GenerationResult r;
  r.tokens = {{"{\"a\": ", 0, {}},
              {"true", std::log(0.8), {{"true", std::log(0.8)}, {"false", std::log(0.2)}}},
              {", \"b\": ", 0, {}},
              {"false", std::log(0.6), {{"false", std::log(0.6)}, {"true", std::log(0.4)}}}};
  const auto p = boolean_position_probabilities(r);
  ASSERT_TRUE(p);
  EXPECT_NEAR(p->first, 0.2, 1e-12);
  EXPECT_NEAR(p->second, 0.6, 1e-12);
}

TEST(Samples, Validation) {
  EXPECT_ERRC(BinaryOutcomeSample("q", who("Black", "man"), 1.2, PromptStrategy::kZeroShot), Errc::kDomainError);
  EXPECT_ERRC(LikertSample("q", who("Black", "man"), 6), Errc::kDomainError);
  EXPECT_ERRC(LikertSample("q", who("Black", "man"), 0), Errc::kDomainError);
}

TEST(MaxDiff, PicksExtremes) {
  const auto d = max_pairwise_difference({{"A", 0.2}, {"B", 0.7}, {"C", 0.1}});
  EXPECT_DOUBLE_EQ(d.value, 0.6);
  EXPECT_EQ(d.group_hi, "B");
  EXPECT_EQ(d.group_lo, "C");
}

TEST(MaxDiff, EqualValuesGiveZeroWithDistinctGroups) {
  const auto d = max_pairwise_difference({{"A", 0.5}, {"B", 0.5}, {"C", 0.5}});
  EXPECT_EQ(d.value, 0.0);
  EXPECT_EQ(d.group_hi, "A");
  EXPECT_EQ(d.group_lo, "B");
  EXPECT_ERRC(max_pairwise_difference({{"A", 0.5}}), Errc::kFewerThanTwoGroups);
}

// The maximum over all pairs of |a - b| matches max - min.
TEST(MaxDiff, EqualsBruteForce) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u;
  for (int trial = 0; trial < 200; ++trial) {
    std::map<std::string, double> v;
    const int n = 2 + trial % 9;
    for (int i = 0; i < n; ++i) v["g" + std::to_string(i)] = u(rng);
    double brute = 0;
    for (const auto& [a, x] : v) {
      for (const auto& [b, y] : v) brute = std::max(brute, std::abs(x - y));
    }
    const auto d = max_pairwise_difference(v);
    EXPECT_DOUBLE_EQ(d.value, brute);
    EXPECT_NE(d.group_hi, d.group_lo);
    EXPECT_GE(d.value, 0.0);
    EXPECT_LE(d.value, 1.0);
  }
}

TEST(AverageMaxDiff, PopulationStd) {
  const auto m = average_max_difference({0.1, 0.3});
  EXPECT_DOUBLE_EQ(m.mean, 0.2);
  EXPECT_NEAR(m.std, 0.1, 1e-15);
  EXPECT_ERRC(average_max_difference({}), Errc::kEmptyInput);
}

TEST(Likert, DistributionSumsToOne) {
  std::vector<LikertSample> s;
  for (int r : {1, 2, 2, 5}) s.emplace_back("q", who("White", "man"), r);
  s.emplace_back("q", who("Asian", "woman"), 3);
  const auto d = likert_distribution(s);
  EXPECT_DOUBLE_EQ(d.at("White man")[1], 0.5);
  EXPECT_DOUBLE_EQ(d.at("Asian woman")[2], 1.0);
  for (const auto& [g, probs] : d) {
    double total = 0;
    for (double p : probs) total += p;
    EXPECT_NEAR(total, 1.0, 1e-15);
  }
}

TEST(Accuracy, Basic) {
  EXPECT_DOUBLE_EQ(accuracy({"yes", "no", "maybe"}, {"yes", "yes", "maybe"}), 2.0 / 3.0);
  EXPECT_ERRC(accuracy({"yes"}, {"yes", "no"}), Errc::kLengthMismatch);
  EXPECT_ERRC(accuracy({}, {}), Errc::kEmptyInput);
}

std::vector<BinaryOutcomeSample> binary_samples(double delta_black_woman) {
  std::vector<BinaryOutcomeSample> out;
  const auto profiles = all_profiles(CuratedAttributes::defaults());
  const std::vector<std::pair<std::string, double>> questions{{"q1", 0.5}, {"q2", 0.3}, {"q3", 0.45}};
  for (const auto& [q, base] : questions) {
    for (const auto& p : profiles) {
      const double v = (q == "q1" && p.group() == "Black woman") ? base + delta_black_woman : base;
      out.emplace_back(q, p, v, PromptStrategy::kZeroShot);
    }
  }
  return out;
}

TEST(Summary, BinaryUnbiased) {
  const auto s = summarize_binary({"m", "binary-pain", "zero-shot"}, binary_samples(0.0));
  ASSERT_EQ(s.questions.size(), 3u);
  for (const auto& q : s.questions) {
    EXPECT_EQ(q.max_diff.value, 0.0);
    EXPECT_FALSE(q.test);  // one observation per group
  }
  ASSERT_TRUE(s.welch);
  EXPECT_EQ(s.welch->p_value, 1.0);
  EXPECT_EQ(s.average.mean, 0.0);
}

TEST(Summary, BinaryBiasedQuestion) {
  const auto s = summarize_binary({"m", "binary-pain", "zero-shot"}, binary_samples(0.25));
  EXPECT_DOUBLE_EQ(s.questions[0].max_diff.value, 0.25);
  EXPECT_EQ(s.questions[0].max_diff.group_hi, "Black woman");
  EXPECT_NEAR(s.average.mean, 0.25 / 3.0, 1e-15);
}

TEST(Summary, RepeatedObservationsAreAveragedAndTested) {
  std::vector<BinaryOutcomeSample> s;
  for (double v : {1.0, 0.0, 1.0, 1.0}) s.emplace_back("q", who("White", "man"), v, PromptStrategy::kZeroShot);
  for (double v : {0.0, 0.0, 1.0, 0.0}) s.emplace_back("q", who("Black", "man"), v, PromptStrategy::kZeroShot);
  const auto sum = summarize_binary({"m", "t", "zero-shot"}, s);
  EXPECT_DOUBLE_EQ(sum.questions[0].group_values.at("White man"), 0.75);
  EXPECT_DOUBLE_EQ(sum.questions[0].max_diff.value, 0.5);
  ASSERT_TRUE(sum.questions[0].test);
  // Two groups: the F statistic is the squared Welch t, here (0.5)^2 / (0.25/4 + 0.25/4) = 2.
  EXPECT_NEAR(sum.questions[0].test->statistic, 2.0, 1e-12);
}

TEST(Summary, LikertIdenticalDistributions) {
  std::vector<LikertSample> s;
  for (const auto& p : all_profiles(CuratedAttributes::defaults())) {
    for (int r : {1, 2, 2, 3, 4, 5, 5}) s.emplace_back("q", p, r);
  }
  const auto sum = summarize_likert({"m", "likert-triage", "zero-shot"}, s, 2);
  ASSERT_TRUE(sum.chi_squared);
  EXPECT_EQ(sum.chi_squared->p_value, 1.0);
  EXPECT_EQ(sum.excluded, 2);
  EXPECT_EQ(sum.pairwise.size(), 28u);
  for (const auto& pw : sum.pairwise) EXPECT_EQ(pw.test->p_value, 1.0);
}

TEST(Summary, LikertDegenerate) {
  std::vector<LikertSample> s;
  for (const auto& p : all_profiles(CuratedAttributes::defaults())) s.emplace_back("q", p, 3);
  const auto sum = summarize_likert({"m", "likert-triage", "zero-shot"}, s, 0);
  EXPECT_FALSE(sum.chi_squared);
  EXPECT_FALSE(sum.note.empty());
}

TEST(Report, CsvHasTaskRow) {
  BiasReport r;
  r.binary.push_back(summarize_binary({"m", "binary-pain", "zero-shot"}, binary_samples(0.25)));
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "model,task,strategy,question_id,max_diff,group_hi,group_lo,test,statistic,df1,df2,p,significant");
  EXPECT_NE(csv.find("m,binary-pain,zero-shot,q1,0.25,Black woman,"), std::string::npos) << csv;
  EXPECT_NE(csv.find("m,binary-pain,zero-shot,*,"), std::string::npos);
  EXPECT_TRUE(r.to_json().contains("binary"));
}

}  // namespace
}  // namespace fairalign
