#include "fairalign/vignette.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "fairalign/error.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

constexpr std::string_view kNeutralDemographic = "patient";

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

bool all_space(std::string_view s) {
  return std::all_of(s.begin(), s.end(), is_space);
}

std::optional<Placeholder> placeholder_from_name(std::string_view name) {
  if (name == "race") return Placeholder::kRace;
  if (name == "gender") return Placeholder::kGender;
  if (name == "subject") return Placeholder::kSubject;
  if (name == "object") return Placeholder::kObject;
  if (name == "possessive") return Placeholder::kPossessive;
  return std::nullopt;
}

// A pronoun starts a sentence when it opens the text (optionally after
// whitespace) or follows ".", "?" or "!" plus at least one whitespace.
bool sentence_initial(const std::string& out, std::size_t field_start) {
  std::size_t pos = out.size();
  if (pos == field_start) return true;
  std::size_t ws_end = pos;
  while (pos > field_start && is_space(out[pos - 1])) --pos;
  if (pos == field_start) return true;
  if (pos == ws_end) return false;
  const char prev = out[pos - 1];
  return prev == '.' || prev == '?' || prev == '!';
}

std::string substitution_for(Placeholder p, const DemographicProfile* profile) {
  if (profile == nullptr) {
    switch (p) {
      case Placeholder::kSubject: return "they";
      case Placeholder::kObject: return "them";
      case Placeholder::kPossessive: return "their";
      default: return std::string(kNeutralDemographic);
    }
  }
  switch (p) {
    case Placeholder::kRace: return profile->race;
    case Placeholder::kGender: return profile->gender;
    case Placeholder::kSubject: return profile->pronouns.subject;
    case Placeholder::kObject: return profile->pronouns.object;
    case Placeholder::kPossessive: return profile->pronouns.possessive;
  }
  return {};
}

bool is_demographic_segment(const TextSegment& s) {
  return s.placeholder && !is_pronoun(*s.placeholder);
}

// Appends `field` with placeholders expanded. A null profile selects the
// neutral rendering.
void expand_into(std::string_view field, const DemographicProfile* profile, std::string& out,
                 std::vector<SubstitutionSpan>& spans) {
  const auto segments = split_placeholders(field);
  const std::size_t field_start = out.size();
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const TextSegment& seg = segments[i];
    if (!seg.placeholder) {
      out += seg.literal;
      continue;
    }
    const Placeholder ph = *seg.placeholder;
    std::string value = substitution_for(ph, profile);
    if (profile == nullptr && !is_pronoun(ph)) {
      // Swallow the rest of a "[race] [gender]" style run.
      while (true) {
        if (i + 1 < segments.size() && is_demographic_segment(segments[i + 1])) {
          i += 1;
        } else if (i + 2 < segments.size() && !segments[i + 1].placeholder &&
                   all_space(segments[i + 1].literal) && is_demographic_segment(segments[i + 2])) {
          i += 2;
        } else {
          break;
        }
      }
    }
    if (is_pronoun(ph) && !value.empty() && sentence_initial(out, field_start)) {
      value[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(value[0])));
    }
    spans.push_back({out.size(), value.size(), ph});
    out += value;
  }
}

void validate_text(std::string_view text) { (void)split_placeholders(text); }

std::string required_string(const json& source, const char* field) {
  if (!source.contains(field) || !source[field].is_string()) {
    throw Error(Errc::kMissingField, std::string("template field '") + field + "' is required");
  }
  return source[field].get<std::string>();
}

std::optional<std::string> optional_string(const json& source, const char* field) {
  if (!source.contains(field) || source[field].is_null()) return std::nullopt;
  if (!source[field].is_string()) {
    throw Error(Errc::kMissingField, std::string("template field '") + field + "' must be a string");
  }
  return source[field].get<std::string>();
}

TaskKind default_task_for(AnswerSchema schema) {
  switch (schema) {
    case AnswerSchema::kYesNo: return TaskKind::kBinaryPain;
    case AnswerSchema::kJsonTwoBooleans: return TaskKind::kBinaryTreatment;
    case AnswerSchema::kLikert1To5: return TaskKind::kLikertTriage;
    case AnswerSchema::kFreeText: return TaskKind::kFreeQa;
  }
  return TaskKind::kFreeQa;
}

bool schema_fits(TaskKind kind, AnswerSchema schema) {
  switch (kind) {
    case TaskKind::kBinaryPain:
    case TaskKind::kBinaryTreatment:
      return schema == AnswerSchema::kYesNo || schema == AnswerSchema::kJsonTwoBooleans;
    case TaskKind::kLikertTriage:
      return schema == AnswerSchema::kLikert1To5;
    case TaskKind::kFreeQa:
      return schema == AnswerSchema::kFreeText;
  }
  return false;
}

}  // namespace

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kBinaryPain: return "binary-pain";
    case TaskKind::kBinaryTreatment: return "binary-treatment";
    case TaskKind::kLikertTriage: return "likert-triage";
    case TaskKind::kFreeQa: return "free-qa";
  }
  return "";
}

std::string_view to_string(AnswerSchema schema) {
  switch (schema) {
    case AnswerSchema::kYesNo: return "yes-no";
    case AnswerSchema::kLikert1To5: return "likert-1-5";
    case AnswerSchema::kJsonTwoBooleans: return "json-two-booleans";
    case AnswerSchema::kFreeText: return "free-text";
  }
  return "";
}

std::string_view to_string(PromptStrategy strategy) {
  switch (strategy) {
    case PromptStrategy::kZeroShot: return "zero-shot";
    case PromptStrategy::kFewShot: return "few-shot";
    case PromptStrategy::kChainOfThought: return "chain-of-thought";
  }
  return "";
}

std::string_view to_string(Placeholder placeholder) {
  switch (placeholder) {
    case Placeholder::kRace: return "race";
    case Placeholder::kGender: return "gender";
    case Placeholder::kSubject: return "subject";
    case Placeholder::kObject: return "object";
    case Placeholder::kPossessive: return "possessive";
  }
  return "";
}

TaskKind parse_task_kind(std::string_view s) {
  for (auto k : {TaskKind::kBinaryPain, TaskKind::kBinaryTreatment, TaskKind::kLikertTriage,
                 TaskKind::kFreeQa}) {
    if (to_string(k) == s) return k;
  }
  throw Error(Errc::kSchemaMismatch, "unknown task_kind '" + std::string(s) + "'");
}

AnswerSchema parse_answer_schema(std::string_view s) {
  for (auto a : {AnswerSchema::kYesNo, AnswerSchema::kLikert1To5, AnswerSchema::kJsonTwoBooleans,
                 AnswerSchema::kFreeText}) {
    if (to_string(a) == s) return a;
  }
  throw Error(Errc::kSchemaMismatch, "unknown answer_schema '" + std::string(s) + "'");
}

PromptStrategy parse_strategy(std::string_view s) {
  if (s == "zero-shot") return PromptStrategy::kZeroShot;
  if (s == "few-shot") return PromptStrategy::kFewShot;
  if (s == "chain-of-thought" || s == "cot") return PromptStrategy::kChainOfThought;
  throw Error(Errc::kInvalidArgument, "unknown strategy '" + std::string(s) + "'");
}

bool is_pronoun(Placeholder p) noexcept {
  return p == Placeholder::kSubject || p == Placeholder::kObject || p == Placeholder::kPossessive;
}

CuratedAttributes CuratedAttributes::defaults() {
  return CuratedAttributes{
      {"White", "Black", "Asian", "Hispanic"},
      {{"man", {"he", "him", "his"}}, {"woman", {"she", "her", "her"}}},
  };
}

CuratedAttributes CuratedAttributes::from_json(const json& j) {
  CuratedAttributes out;
  out.races = j.at("races").get<std::vector<std::string>>();
  for (const auto& g : j.at("genders")) {
    GenderEntry entry;
    entry.name = g.at("name").get<std::string>();
    entry.pronouns.subject = g.at("subject").get<std::string>();
    entry.pronouns.object = g.at("object").get<std::string>();
    entry.pronouns.possessive = g.at("possessive").get<std::string>();
    out.genders.push_back(std::move(entry));
  }
  for (const auto& r : out.races) {
    if (r.empty()) throw Error(Errc::kInvalidProfile, "empty race entry in curated list");
  }
  for (const auto& g : out.genders) {
    if (g.name.empty() || g.pronouns.subject.empty() || g.pronouns.object.empty() ||
        g.pronouns.possessive.empty()) {
      throw Error(Errc::kInvalidProfile, "incomplete gender entry in curated list");
    }
  }
  return out;
}

CuratedAttributes CuratedAttributes::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open attribute file " + path.string());
  return from_json(json::parse(in));
}

json CuratedAttributes::to_json() const {
  json genders_json = json::array();
  for (const auto& g : genders) {
    genders_json.push_back({{"name", g.name},
                            {"subject", g.pronouns.subject},
                            {"object", g.pronouns.object},
                            {"possessive", g.pronouns.possessive}});
  }
  return {{"races", races}, {"genders", genders_json}};
}

const Pronouns& CuratedAttributes::pronouns_for(std::string_view gender) const {
  for (const auto& g : genders) {
    if (g.name == gender) return g.pronouns;
  }
  throw Error(Errc::kInvalidProfile, "gender '" + std::string(gender) + "' is not in the curated list");
}

DemographicProfile make_profile(const CuratedAttributes& curated, std::string_view race,
                                std::string_view gender) {
  if (std::find(curated.races.begin(), curated.races.end(), race) == curated.races.end()) {
    throw Error(Errc::kInvalidProfile, "race '" + std::string(race) + "' is not in the curated list");
  }
  return DemographicProfile{std::string(race), std::string(gender), curated.pronouns_for(gender)};
}

std::vector<DemographicProfile> all_profiles(const CuratedAttributes& curated) {
  std::vector<DemographicProfile> out;
  out.reserve(curated.races.size() * curated.genders.size());
  for (const auto& race : curated.races) {
    for (const auto& g : curated.genders) {
      out.push_back(DemographicProfile{race, g.name, g.pronouns});
    }
  }
  return out;
}

std::set<Placeholder> VignetteTemplate::placeholders() const {
  std::set<Placeholder> out;
  for (std::string_view text : {std::string_view(body), std::string_view(question)}) {
    for (const auto& seg : split_placeholders(text)) {
      if (seg.placeholder) out.insert(*seg.placeholder);
    }
  }
  return out;
}

std::vector<TextSegment> split_placeholders(std::string_view text) {
  std::vector<TextSegment> out;
  std::size_t literal_start = 0;
  std::size_t i = 0;
  auto flush_literal = [&](std::size_t end) {
    if (end > literal_start) {
      out.push_back({std::nullopt, std::string(text.substr(literal_start, end - literal_start)),
                     literal_start});
    }
  };
  while (i < text.size()) {
    const char c = text[i];
    if (c == ']') {
      throw Error(Errc::kUnbalancedBracket, "unmatched ']' at byte " + std::to_string(i));
    }
    if (c != '[') {
      ++i;
      continue;
    }
    const std::size_t close = text.find_first_of("[]", i + 1);
    if (close == std::string_view::npos || text[close] != ']') {
      throw Error(Errc::kUnbalancedBracket, "unclosed '[' at byte " + std::to_string(i));
    }
    const std::string_view name = text.substr(i + 1, close - i - 1);
    const auto ph = placeholder_from_name(name);
    if (!ph) {
      throw Error(Errc::kUnknownPlaceholder,
                  "placeholder '[" + std::string(name) + "]' at byte " + std::to_string(i));
    }
    flush_literal(i);
    out.push_back({ph, {}, i});
    i = close + 1;
    literal_start = i;
  }
  flush_literal(text.size());
  return out;
}

VignetteTemplate parse_template(const json& source) {
  if (!source.is_object()) throw Error(Errc::kMissingField, "template record must be a JSON object");
  VignetteTemplate t;
  t.id = required_string(source, "id");
  t.body = required_string(source, "body");
  t.question = required_string(source, "question");
  t.answer_schema = parse_answer_schema(required_string(source, "answer_schema"));
  if (auto kind = optional_string(source, "task_kind")) {
    t.task_kind = parse_task_kind(*kind);
  } else {
    t.task_kind = default_task_for(t.answer_schema);
  }
  if (!schema_fits(t.task_kind, t.answer_schema)) {
    throw Error(Errc::kSchemaMismatch, "task_kind " + std::string(to_string(t.task_kind)) +
                                           " does not admit answer_schema " +
                                           std::string(to_string(t.answer_schema)));
  }
  if (source.contains("exemplar") && !source["exemplar"].is_null()) {
    const json& ex = source["exemplar"];
    Exemplar e;
    e.body = required_string(ex, "body");
    e.question = required_string(ex, "question");
    e.answer = optional_string(ex, "answer").value_or("");
    e.explanation = optional_string(ex, "explanation");
    if (e.explanation && e.answer.empty()) {
      throw Error(Errc::kSchemaMismatch, "exemplar has an explanation but no answer");
    }
    validate_text(e.body);
    validate_text(e.question);
    t.exemplar = std::move(e);
  }
  t.system_preamble = optional_string(source, "system_preamble");
  if (auto label = optional_string(source, "body_label")) t.body_label = *label;
  if (auto label = optional_string(source, "question_label")) t.question_label = *label;
  if (source.contains("answer_fields")) {
    t.answer_fields = source["answer_fields"].get<std::vector<std::string>>();
  }
  if (t.answer_schema == AnswerSchema::kJsonTwoBooleans) {
    if (t.answer_fields.empty()) {
      t.answer_fields = {"Specialist Recommendation", "Advanced Medical Imaging Recommendation"};
    }
    if (t.answer_fields.size() != 2) {
      throw Error(Errc::kSchemaMismatch, "json-two-booleans needs exactly two answer_fields");
    }
  }
  validate_text(t.body);
  validate_text(t.question);
  if (t.system_preamble) validate_text(*t.system_preamble);
  return t;
}

json template_to_json(const VignetteTemplate& t) {
  json j{{"id", t.id},
         {"task_kind", to_string(t.task_kind)},
         {"body", t.body},
         {"question", t.question},
         {"answer_schema", to_string(t.answer_schema)}};
  if (t.exemplar) {
    json ex{{"body", t.exemplar->body}, {"question", t.exemplar->question}, {"answer", t.exemplar->answer}};
    if (t.exemplar->explanation) ex["explanation"] = *t.exemplar->explanation;
    j["exemplar"] = ex;
  }
  if (t.system_preamble) j["system_preamble"] = *t.system_preamble;
  if (t.body_label != "Vignette") j["body_label"] = t.body_label;
  if (t.question_label != "Question") j["question_label"] = t.question_label;
  if (!t.answer_fields.empty()) j["answer_fields"] = t.answer_fields;
  return j;
}

std::vector<VignetteTemplate> load_templates(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open template file " + path.string());
  std::vector<VignetteTemplate> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (all_space(line)) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw Error(Errc::kParseError, where + e.what());
    }
    try {
      out.push_back(parse_template(record));
    } catch (const Error& e) {
      throw Error(e.code(), where + e.what());
    }
  }
  return out;
}

std::string RenderedPrompt::origin() const {
  std::string out = template_id + "|" + std::string(to_string(strategy)) + "|";
  if (profile) {
    out += profile->race + "|" + profile->gender;
  } else {
    out += "neutral";
  }
  return out;
}

std::string_view question_suffix(AnswerSchema schema, PromptStrategy strategy) {
  if (schema == AnswerSchema::kYesNo) {
    switch (strategy) {
      case PromptStrategy::kZeroShot: return " Yes or No?";
      case PromptStrategy::kFewShot: return "";
      case PromptStrategy::kChainOfThought: return " Yes or No? Explain.";
    }
  }
  return strategy == PromptStrategy::kChainOfThought ? " Explain." : "";
}

namespace {

RenderedPrompt render_impl(const VignetteTemplate& t, const DemographicProfile* profile,
                           PromptStrategy strategy) {
  if (strategy != PromptStrategy::kZeroShot && !t.exemplar) {
    throw Error(Errc::kStrategyUnsupported,
                "template '" + t.id + "' has no exemplar for " + std::string(to_string(strategy)));
  }
  if (strategy == PromptStrategy::kChainOfThought && !t.exemplar->explanation) {
    throw Error(Errc::kStrategyUnsupported,
                "template '" + t.id + "' exemplar lacks an explanation for chain-of-thought");
  }
  const std::string_view suffix = question_suffix(t.answer_schema, strategy);

  RenderedPrompt out;
  out.template_id = t.id;
  out.strategy = strategy;
  if (profile) out.profile = *profile;
  std::string& text = out.text;

  if (t.system_preamble) {
    expand_into(*t.system_preamble, profile, text, out.spans);
    text += '\n';
  }
  if (strategy != PromptStrategy::kZeroShot) {
    const Exemplar& ex = *t.exemplar;
    text += "Example:\n";
    text += t.body_label + ": ";
    expand_into(ex.body, profile, text, out.spans);
    text += '\n';
    text += t.question_label + ": ";
    expand_into(ex.question, profile, text, out.spans);
    text += suffix;
    text += "\nAnswer: " + ex.answer;
    if (strategy == PromptStrategy::kChainOfThought) {
      text += "\nExplanation: " + *ex.explanation;
    }
    text += "\n\nCase:\n";
  }
  text += t.body_label + ": ";
  expand_into(t.body, profile, text, out.spans);
  text += '\n';
  text += t.question_label + ": ";
  expand_into(t.question, profile, text, out.spans);
  text += suffix;
  return out;
}

}  // namespace

RenderedPrompt render(const VignetteTemplate& t, const DemographicProfile& profile,
                      PromptStrategy strategy) {
  if (profile.race.empty() || profile.gender.empty() || profile.pronouns.subject.empty() ||
      profile.pronouns.object.empty() || profile.pronouns.possessive.empty()) {
    throw Error(Errc::kInvalidProfile, "profile fields must be non-empty");
  }
  return render_impl(t, &profile, strategy);
}

RenderedPrompt neutral_render(const VignetteTemplate& t, PromptStrategy strategy) {
  return render_impl(t, nullptr, strategy);
}

std::vector<RenderedPrompt> rotate(const VignetteTemplate& t,
                                   const std::vector<DemographicProfile>& profiles,
                                   PromptStrategy strategy) {
  if (profiles.empty()) throw Error(Errc::kEmptyProfileList, "no profiles to rotate through");
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    for (std::size_t j = i + 1; j < profiles.size(); ++j) {
      if (profiles[i] == profiles[j]) {
        throw Error(Errc::kDuplicateProfile,
                    "profile '" + profiles[i].group() + "' appears more than once");
      }
    }
  }
  std::vector<RenderedPrompt> out;
  out.reserve(profiles.size());
  for (const auto& p : profiles) out.push_back(render(t, p, strategy));
  return out;
}

std::string mask_substitutions(const RenderedPrompt& prompt, std::string_view sentinel) {
  std::string out;
  std::size_t cursor = 0;
  for (const auto& span : prompt.spans) {
    out.append(prompt.text, cursor, span.offset - cursor);
    out += sentinel;
    cursor = span.offset + span.length;
  }
  out.append(prompt.text, cursor, std::string::npos);
  return out;
}

}  // namespace fairalign
