#include "fairalign/preference.hpp"

#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "fairalign/mock_backend.hpp"
#include "test_util.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;
using testing::data_dir;
using testing::slurp;

std::unique_ptr<Gateway> mock_gateway(const std::string& role, const json& spec) {
  BackendConfig c;
  c.id = role;
  c.mock = spec;
  return std::make_unique<Gateway>(make_backend(c), c);
}

json mock_file(const std::string& name) { return json::parse(slurp(data_dir() / "mocks" / name)); }

NeutralQuery query(std::string id, std::string text, bool neutral = true) { return {std::move(id), std::move(text), neutral}; }

TEST(Queries, Parse) {
  EXPECT_TRUE(parse_neutral_query({{"id", "a"}, {"text", "t"}, {"neutral_flag", true}}).neutral);
  EXPECT_ERRC(parse_neutral_query({{"id", "a"}, {"neutral", true}}), Errc::kMissingField);
  const auto qs = load_queries(data_dir() / "queries.jsonl");
  EXPECT_EQ(qs.size(), 50u);
  for (const auto& q : qs) EXPECT_TRUE(q.neutral);
}

TEST(Queries, LoadErrorNamesLine) {
  testing::TempDir dir;
  std::ofstream(dir / "q.jsonl") << R"({"id":"a","text":"x","neutral":true})" << "\n{oops\n";
  try {
    load_queries(dir / "q.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("q.jsonl:2"), std::string::npos) << e.what();
  }
}

TEST(Profiles, SampleIsDeterministicAndCoversAttributes) {
  const auto curated = CuratedAttributes::defaults();
  std::map<std::string, int> counts;
  for (std::uint64_t i = 0; i < 4000; ++i) {
    const auto p = sample_profile(curated, 42, i);
    EXPECT_EQ(p, sample_profile(curated, 42, i));
    EXPECT_EQ(p.pronouns, curated.pronouns_for(p.gender));
    ++counts[p.group()];
  }
  ASSERT_EQ(counts.size(), 8u);
  for (const auto& [g, n] : counts) EXPECT_NEAR(n / 4000.0, 0.125, 0.025) << g;
  EXPECT_ERRC(sample_profile(CuratedAttributes{{}, curated.genders}, 1, 0), Errc::kEmptyList);
}

TEST(Text, MentionsPhrase) {
  EXPECT_TRUE(mentions_phrase("As a black woman, I ask", "Black"));
  EXPECT_FALSE(mentions_phrase("Blackberry allergy", "Black"));
  EXPECT_TRUE(mentions_phrase("an older man.", "man"));
  EXPECT_FALSE(mentions_phrase("a woman", "man"));
}

TEST(Text, ContentWordRetention) {
  EXPECT_DOUBLE_EQ(content_word_retention("What should I do about a headache?", "As a man: what to do about a headache"), 1.0);
  EXPECT_DOUBLE_EQ(content_word_retention("the of and", "anything"), 1.0);
  EXPECT_LT(content_word_retention("persistent headache treatment options", "hello there"), kMinContentRetention);
}

TEST(Inject, TemplateInsert) {
  const auto p = make_profile(CuratedAttributes::defaults(), "Asian", "woman");
  const auto mq = inject_demographics(query("q", "Is a rash serious?"), p, nullptr, ModifierMode::kTemplateInsert);
  EXPECT_EQ(mq.text, "A Asian woman patient asks: Is a rash serious?");
  EXPECT_ERRC(inject_demographics(query("q", "x", false), p, nullptr, ModifierMode::kTemplateInsert), Errc::kNotNeutral);
}

TEST(Inject, TeacherRewriteValidated) {
  const auto p = make_profile(CuratedAttributes::defaults(), "Hispanic", "man");
  auto teacher = mock_gateway("teacher", mock_file("teacher.json"));
  const auto mq = inject_demographics(query("q", "Is a rash serious?"), p, teacher.get(), ModifierMode::kTeacherRewrite);
  EXPECT_EQ(mq.text, "As a Hispanic man, I want to know: Is a rash serious?");

  json omit = mock_file("teacher.json");
  omit["rewrite"] = "omit-race";
  auto bad = mock_gateway("bad", omit);
  EXPECT_ERRC(inject_demographics(query("q", "Is a rash serious?"), p, bad.get(), ModifierMode::kTeacherRewrite),
              Errc::kAttributeMissingInRewrite);
}

TEST(Candidates, SeedsDifferByKAndAttempt) {
  std::set<std::uint64_t> seen;
  for (int k : {1, 2}) {
    for (int attempt : {0, 1}) seen.insert(candidate_seed(7, "q01", k, attempt));
  }
  EXPECT_EQ(seen.size(), 4u);
  EXPECT_EQ(candidate_seed(7, "q01", 1, 0), candidate_seed(7, "q01", 1, 0));
  EXPECT_NE(candidate_seed(7, "q01", 1, 0), candidate_seed(8, "q01", 1, 0));
}

TEST(Candidates, IdenticalPairsAreDropped) {
  auto target = mock_gateway("t", json{{"rules", {{{"id", "r"}, {"match", ""}, {"kind", "text"}, {"answers", {"same"}}}}}});
  const auto p = make_profile(CuratedAttributes::defaults(), "White", "man");
  const auto mq = inject_demographics(query("q", "x?"), p, nullptr, ModifierMode::kTemplateInsert);
  EXPECT_FALSE(candidate_answers(mq, *target, 3));
}

TEST(Cosine, Properties) {
  EXPECT_DOUBLE_EQ(cosine(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0);
  EXPECT_DOUBLE_EQ(cosine(std::vector<double>{2, 2}, std::vector<double>{1, 1}), 1.0);
  EXPECT_DOUBLE_EQ(cosine(std::vector<double>{1, 2}, std::vector<double>{-1, -2}), -1.0);
  EXPECT_ERRC(cosine(std::vector<double>{1, 0}, std::vector<double>{1, 0, 0}), Errc::kDimMismatch);
  EXPECT_ERRC(cosine(std::vector<double>{0, 0}, std::vector<double>{1, 0}), Errc::kZeroVector);
}

TEST(Rank, ArgmaxAndTies) {
  EmbeddingVector ref{{1, 0, 0}}, a{{0, 1, 0}}, b{{1, 1, 0}};
  auto r = rank_embeddings(ref, a, b);
  EXPECT_FALSE(r.first_wins);
  EXPECT_FALSE(r.tie);
  r = rank_embeddings(ref, a, a);
  EXPECT_TRUE(r.first_wins);
  EXPECT_TRUE(r.tie);
}

TEST(Rank, WithMockEmbedder) {
  auto emb = mock_gateway("e", mock_file("teacher.json"));
  const auto t = rank("Ask your clinician about this +", "Rest and drink fluids -", "Rest and drink fluids +", *emb);
  EXPECT_EQ(t.chosen, "Rest and drink fluids +");
  EXPECT_EQ(t.rejected, "Rest and drink fluids -");
  EXPECT_GT(t.sim_chosen, t.sim_rejected);
}

struct Pipeline {
  std::unique_ptr<Gateway> teacher = mock_gateway("teacher", mock_file("teacher.json"));
  std::unique_ptr<Gateway> target = mock_gateway("target", mock_file("target.json"));
  std::unique_ptr<Gateway> embedder = mock_gateway("embedder", mock_file("teacher.json"));
  BuildOutcome run(const std::vector<NeutralQuery>& qs, BuildConfig cfg) {
    return build_dataset(qs, *teacher, *target, *embedder, cfg);
  }
};

TEST(Build, ShippedQueriesPreferTeacherAlignedAnswers) {
  Pipeline p;
  BuildConfig cfg;
  cfg.seed = 11;
  const auto out = p.run(load_queries(data_dir() / "queries.jsonl"), cfg);
  ASSERT_EQ(out.dataset.size(), 50u);
  EXPECT_TRUE(out.failed.empty());
  EXPECT_TRUE(out.dropped.empty());
  for (std::size_t i = 0; i < out.dataset.size(); ++i) {
    const auto& t = out.dataset.tuples[i];
    EXPECT_EQ(t.chosen.back(), '+') << t.id;
    EXPECT_EQ(t.rejected.back(), '-') << t.id;
    EXPECT_NE(t.chosen, t.rejected);
    EXPECT_GE(t.sim_chosen, t.sim_rejected);
    EXPECT_TRUE(mentions_phrase(t.prompt, t.race));
    EXPECT_TRUE(mentions_phrase(t.prompt, t.gender));
    if (i > 0) EXPECT_LT(out.dataset.tuples[i - 1].id, t.id);
  }
}

TEST(Build, DeterministicAcrossThreadCounts) {
  const auto qs = load_queries(data_dir() / "queries.jsonl");
  BuildConfig cfg;
  cfg.seed = 5;
  cfg.threads = 1;
  Pipeline a, b;
  const auto one = a.run(qs, cfg);
  cfg.threads = 8;
  const auto many = b.run(qs, cfg);
  EXPECT_EQ(one.dataset.to_jsonl(), many.dataset.to_jsonl());
  EXPECT_EQ(one.dataset.provenance, many.dataset.provenance);
}

TEST(Build, NonNeutralQueriesExcluded) {
  Pipeline p;
  const auto out = p.run(load_queries(data_dir() / "queries_with_flagged.jsonl"), BuildConfig{});
  ASSERT_EQ(out.excluded.size(), 1u);
  EXPECT_EQ(out.excluded[0].id, "q-flagged");
  EXPECT_EQ(out.attempted, 50u);
}

TEST(Build, FailureRateAboveLimitCarriesPartial) {
  Pipeline p;
  json omit = mock_file("teacher.json");
  omit["rewrite"] = "omit-race";
  p.teacher = mock_gateway("teacher", omit);
  try {
    p.run(load_queries(data_dir() / "queries.jsonl"), BuildConfig{});
    FAIL();
  } catch (const BuildFailedError& e) {
    EXPECT_EQ(e.code(), Errc::kBuildFailed);
    EXPECT_EQ(e.partial().failed.size(), 50u);
    EXPECT_EQ(e.partial().dataset.size(), 0u);
  }
}

TEST(Build, SelfTeacherUsesTarget) {
  Pipeline p;
  BuildConfig cfg;
  cfg.self_teacher = true;
  // The target mock cannot rewrite, so every query fails validation.
  EXPECT_THROW(p.run(load_queries(data_dir() / "queries.jsonl"), cfg), BuildFailedError);
  cfg.mode = ModifierMode::kTemplateInsert;
  const auto out = p.run(load_queries(data_dir() / "queries.jsonl"), cfg);
  EXPECT_EQ(out.teacher_id, "target");
  EXPECT_EQ(out.dataset.size(), 50u);
}

TEST(Build, ManifestRecordsSettings) {
  Pipeline p;
  BuildConfig cfg;
  cfg.seed = 3;
  const auto out = p.run(load_queries(data_dir() / "queries.jsonl"), cfg);
  const auto m = build_manifest(out, cfg, *p.teacher, *p.target, *p.embedder);
  EXPECT_EQ(m["seed"], 3);
  EXPECT_EQ(m["n"], 50);
  EXPECT_EQ(m["config_digest"], out.dataset.provenance);
  EXPECT_EQ(m["dataset_digest"], sha256_hex(out.dataset.to_jsonl()));
}

TEST(Dataset, JsonlRoundTrip) {
  Pipeline p;
  const auto out = p.run(load_queries(data_dir() / "queries.jsonl"), BuildConfig{});
  const auto back = parse_preferences(out.dataset.to_jsonl());
  EXPECT_EQ(back.tuples, out.dataset.tuples);
  EXPECT_EQ(back.to_jsonl(), out.dataset.to_jsonl());
}

TEST(Dataset, ParseErrorNamesLine) {
  try {
    parse_preferences("{\"id\":\"a\"}\n", "prefs.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("prefs.jsonl:1:"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace fairalign
