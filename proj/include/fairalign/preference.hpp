#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fairalign/error.hpp"
#include "fairalign/gateway.hpp"
#include "fairalign/vignette.hpp"

namespace fairalign {

struct NeutralQuery {
  std::string id;
  std::string text;
  // Author-supplied curation flag: the right answer does not depend on demographics.
  bool neutral = false;
};

/// Accepts {id, text, neutral} (or "neutral_flag").
NeutralQuery parse_neutral_query(const nlohmann::json& j);
std::vector<NeutralQuery> load_queries(const std::filesystem::path& path);

enum class ModifierMode { kTeacherRewrite, kTemplateInsert };

std::string_view to_string(ModifierMode mode);
ModifierMode parse_modifier_mode(std::string_view s);

struct ModifiedQuery {
  std::string neutral_id;
  DemographicProfile profile;
  std::string text;
  ModifierMode mode = ModifierMode::kTemplateInsert;
};

struct PreferenceTuple {
  std::string id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  double sim_chosen = 0.0;
  double sim_rejected = 0.0;
  std::string reference;
  bool tie = false;
  std::string race;
  std::string gender;

  bool operator==(const PreferenceTuple&) const = default;
};

nlohmann::json to_json(const PreferenceTuple& t);
PreferenceTuple preference_from_json(const nlohmann::json& j);

struct PreferenceDataset {
  std::vector<PreferenceTuple> tuples;
  std::string provenance;  // config digest

  std::size_t size() const { return tuples.size(); }
  std::string to_jsonl() const;
};

/// Parse errors name the 1-based line.
PreferenceDataset parse_preferences(std::string_view jsonl, std::string_view source = "<input>");
PreferenceDataset load_preferences(const std::filesystem::path& path);

/// Uniform independent draw per attribute, fixed by (seed, index).
DemographicProfile sample_profile(const CuratedAttributes& curated, std::uint64_t seed, std::uint64_t index);

/// Whole-word, case-insensitive phrase search.
bool mentions_phrase(std::string_view text, std::string_view phrase);

/// Fraction of the original's content words (stopwords removed) that survive
/// in the rewrite. 1 when the original has none.
double content_word_retention(std::string_view original, std::string_view rewrite);

inline constexpr double kMinContentRetention = 0.8;

/// template-insert needs no teacher. teacher-rewrite asks the teacher and
/// validates the reply, retrying once before AttributeMissingInRewrite.
ModifiedQuery inject_demographics(const NeutralQuery& q, const DemographicProfile& profile, Gateway* teacher,
                                  ModifierMode mode);

struct GenerationOptions {
  double temperature = 0.7;
  int max_tokens = 128;
};

std::string reference_answer(const NeutralQuery& q, Gateway& teacher, int max_tokens = 128);

struct CandidatePair {
  std::string first;
  std::string second;
  bool regenerated = false;
};

/// Seeds for candidate k in {1, 2} of one query on one attempt.
std::uint64_t candidate_seed(std::uint64_t run_seed, std::string_view neutral_id, int k, int attempt);

/// Two samples from the target. Byte-identical pairs are regenerated once;
/// nullopt when still identical.
std::optional<CandidatePair> candidate_answers(const ModifiedQuery& mq, Gateway& target, std::uint64_t run_seed,
                                               const GenerationOptions& options = {});

double cosine(const std::vector<double>& u, const std::vector<double>& v);
inline double cosine(const EmbeddingVector& u, const EmbeddingVector& v) { return cosine(u.values, v.values); }

struct RankResult {
  bool first_wins = true;
  double sim_first = 0.0;
  double sim_second = 0.0;
  bool tie = false;
};

/// Argmax of cosine to the reference; exact ties go to the first candidate.
RankResult rank_embeddings(const EmbeddingVector& reference, const EmbeddingVector& c1, const EmbeddingVector& c2);

/// Fills prompt-independent fields: chosen, rejected, sims, reference, tie.
PreferenceTuple rank(const std::string& reference, const std::string& c1, const std::string& c2, Gateway& embedder);

struct BuildConfig {
  std::uint64_t seed = 0;
  CuratedAttributes curated = CuratedAttributes::defaults();
  ModifierMode mode = ModifierMode::kTeacherRewrite;
  bool self_teacher = false;
  GenerationOptions candidates;
  int reference_max_tokens = 128;
  int threads = 4;
  double max_failure_rate = 0.1;

  nlohmann::json to_json() const;
};

struct QueryIssue {
  std::string id;
  std::string reason;
};

struct BuildOutcome {
  PreferenceDataset dataset;
  std::vector<QueryIssue> dropped;   // degenerate candidate pairs
  std::vector<QueryIssue> failed;    // errors
  std::vector<QueryIssue> excluded;  // not flagged neutral
  std::string teacher_id;
  std::size_t attempted = 0;
};

/// Raised when more than max_failure_rate of the queries fail; carries the
/// partial result.
class BuildFailedError : public Error {
 public:
  BuildFailedError(const std::string& msg, BuildOutcome partial)
      : Error(Errc::kBuildFailed, msg), partial_(std::move(partial)) {}
  const BuildOutcome& partial() const { return partial_; }

 private:
  BuildOutcome partial_;
};

std::string config_digest(const BuildConfig& config, const Gateway& teacher, const Gateway& target,
                          const Gateway& embedder);

/// Tuples are ordered by query id regardless of completion order. With
/// self_teacher the target also plays the teacher.
BuildOutcome build_dataset(const std::vector<NeutralQuery>& queries, Gateway& teacher, Gateway& target,
                           Gateway& embedder, const BuildConfig& config);

/// Sidecar manifest: seed, backends, digests and per-query issues.
nlohmann::json build_manifest(const BuildOutcome& outcome, const BuildConfig& config, const Gateway& teacher,
                              const Gateway& target, const Gateway& embedder);

}  // namespace fairalign
