#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace fairalign {

enum class TaskKind { kBinaryPain, kBinaryTreatment, kLikertTriage, kFreeQa };
enum class AnswerSchema { kYesNo, kLikert1To5, kJsonTwoBooleans, kFreeText };
enum class PromptStrategy { kZeroShot, kFewShot, kChainOfThought };
enum class Placeholder { kRace, kGender, kSubject, kObject, kPossessive };

std::string_view to_string(TaskKind kind);
std::string_view to_string(AnswerSchema schema);
std::string_view to_string(PromptStrategy strategy);
std::string_view to_string(Placeholder placeholder);
TaskKind parse_task_kind(std::string_view s);
AnswerSchema parse_answer_schema(std::string_view s);
/// Accepts "zero-shot", "few-shot", "chain-of-thought" and the short form "cot".
PromptStrategy parse_strategy(std::string_view s);

bool is_pronoun(Placeholder p) noexcept;

struct Pronouns {
  std::string subject;
  std::string object;
  std::string possessive;

  bool operator==(const Pronouns&) const = default;
};

struct GenderEntry {
  std::string name;
  Pronouns pronouns;
};

/// The curated attribute lists that profiles are drawn from. Pronoun sets are
/// looked up by gender, never chosen freely.
struct CuratedAttributes {
  std::vector<std::string> races;
  std::vector<GenderEntry> genders;

  static CuratedAttributes defaults();
  static CuratedAttributes from_json(const nlohmann::json& j);
  static CuratedAttributes load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  const Pronouns& pronouns_for(std::string_view gender) const;
};

struct DemographicProfile {
  std::string race;
  std::string gender;
  Pronouns pronouns;

  /// "race gender", the unit that bias statistics are grouped by.
  std::string group() const { return race + " " + gender; }

  bool operator==(const DemographicProfile&) const = default;
};

/// Builds a validated profile; pronouns come from the curated lookup table.
DemographicProfile make_profile(const CuratedAttributes& curated, std::string_view race,
                                std::string_view gender);

/// Full race x gender cross product, races outermost.
std::vector<DemographicProfile> all_profiles(const CuratedAttributes& curated);

struct Exemplar {
  std::string body;
  std::string question;
  std::string answer;
  std::optional<std::string> explanation;
};

struct VignetteTemplate {
  std::string id;
  TaskKind task_kind = TaskKind::kBinaryPain;
  std::string body;
  std::string question;
  AnswerSchema answer_schema = AnswerSchema::kYesNo;
  std::optional<Exemplar> exemplar;
  std::optional<std::string> system_preamble;
  std::string body_label = "Vignette";
  std::string question_label = "Question";
  // Field names of the two booleans for json-two-booleans answers.
  std::vector<std::string> answer_fields;

  std::set<Placeholder> placeholders() const;
};

/// One piece of a parsed text: either literal bytes or a placeholder.
struct TextSegment {
  std::optional<Placeholder> placeholder;
  std::string literal;
  std::size_t offset = 0;
};

/// Splits text on the placeholder grammar `[name]`. Throws UnknownPlaceholder
/// (with token and byte offset) or UnbalancedBracket.
std::vector<TextSegment> split_placeholders(std::string_view text);

VignetteTemplate parse_template(const nlohmann::json& source);
nlohmann::json template_to_json(const VignetteTemplate& t);
/// One template per line; blank lines are skipped. Errors name the line.
std::vector<VignetteTemplate> load_templates(const std::filesystem::path& path);

/// Byte range in RenderedPrompt::text produced by one placeholder.
struct SubstitutionSpan {
  std::size_t offset = 0;
  std::size_t length = 0;
  Placeholder placeholder = Placeholder::kRace;
};

struct RenderedPrompt {
  std::string text;
  std::string template_id;
  std::optional<DemographicProfile> profile;
  PromptStrategy strategy = PromptStrategy::kZeroShot;
  std::vector<SubstitutionSpan> spans;

  /// "template|strategy|race|gender", or "template|strategy|neutral".
  std::string origin() const;
};

/// Question suffix appended under a strategy, e.g. " Yes or No? Explain." for
/// chain-of-thought on yes/no questions.
std::string_view question_suffix(AnswerSchema schema, PromptStrategy strategy);

RenderedPrompt render(const VignetteTemplate& t, const DemographicProfile& profile,
                      PromptStrategy strategy);

/// Demographic placeholders collapse to "patient" (a whitespace-joined run such
/// as "[race] [gender]" yields one word); pronouns become they/them/their.
RenderedPrompt neutral_render(const VignetteTemplate& t, PromptStrategy strategy);

std::vector<RenderedPrompt> rotate(const VignetteTemplate& t,
                                   const std::vector<DemographicProfile>& profiles,
                                   PromptStrategy strategy);

/// Replaces every substituted span with `sentinel`; counterfactual renderings
/// of one template are equal after masking.
std::string mask_substitutions(const RenderedPrompt& prompt, std::string_view sentinel);

}  // namespace fairalign
