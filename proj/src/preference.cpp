#include "fairalign/preference.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "fairalign/rewrite_prompt.hpp"
#include "fairalign/seed.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool word_byte(char c) {
  const auto u = static_cast<unsigned char>(c);
  return std::isalnum(u) != 0 || u >= 0x80;
}

std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!word_byte(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && (word_byte(text[j]) || text[j] == '\'')) ++j;
    out.push_back(lower(text.substr(i, j - i)));
    i = j;
  }
  return out;
}

const std::set<std::string>& stopwords() {
  static const std::set<std::string> kStop{
      "a",    "an",   "the", "of",   "to",  "in",    "on",   "for",  "and",  "or",   "is",   "are",
      "was",  "were", "be",  "been", "do",  "does",  "did",  "i",    "my",   "me",   "it",   "its",
      "this", "that", "at",  "by",   "with", "as",   "what", "how",  "can",  "should", "if", "from",
      "am",   "will", "would", "there", "any", "about", "when", "which", "who", "why", "so", "than"};
  return kStop;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

NeutralQuery parse_neutral_query(const json& j) {
  if (!j.is_object()) throw Error(Errc::kParseError, "query must be a JSON object");
  for (const char* field : {"id", "text"}) {
    if (!j.contains(field) || !j[field].is_string()) {
      throw Error(Errc::kMissingField, std::string("query lacks string field '") + field + "'");
    }
  }
  NeutralQuery q;
  q.id = j["id"].get<std::string>();
  q.text = j["text"].get<std::string>();
  if (q.id.empty()) throw Error(Errc::kMissingField, "query id is empty");
  if (q.text.empty()) throw Error(Errc::kMissingField, "query " + q.id + " has empty text");
  const char* flag = j.contains("neutral") ? "neutral" : "neutral_flag";
  if (!j.contains(flag) || !j[flag].is_boolean()) {
    throw Error(Errc::kMissingField, "query " + q.id + " lacks boolean 'neutral'");
  }
  q.neutral = j[flag].get<bool>();
  return q;
}

std::vector<NeutralQuery> load_queries(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<NeutralQuery> out;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_neutral_query(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(Errc::kParseError, path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.code(), path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::string_view to_string(ModifierMode mode) {
  return mode == ModifierMode::kTeacherRewrite ? "teacher-rewrite" : "template-insert";
}

ModifierMode parse_modifier_mode(std::string_view s) {
  if (s == "teacher-rewrite") return ModifierMode::kTeacherRewrite;
  if (s == "template-insert") return ModifierMode::kTemplateInsert;
  throw Error(Errc::kInvalidArgument, "unknown modifier mode '" + std::string(s) + "'");
}

json to_json(const PreferenceTuple& t) {
  return {{"id", t.id},
          {"prompt", t.prompt},
          {"chosen", t.chosen},
          {"rejected", t.rejected},
          {"sim_chosen", t.sim_chosen},
          {"sim_rejected", t.sim_rejected},
          {"reference", t.reference},
          {"tie", t.tie},
          {"profile", {{"race", t.race}, {"gender", t.gender}}}};
}

PreferenceTuple preference_from_json(const json& j) {
  PreferenceTuple t;
  t.id = j.at("id").get<std::string>();
  t.prompt = j.at("prompt").get<std::string>();
  t.chosen = j.at("chosen").get<std::string>();
  t.rejected = j.at("rejected").get<std::string>();
  t.sim_chosen = j.value("sim_chosen", 0.0);
  t.sim_rejected = j.value("sim_rejected", 0.0);
  t.reference = j.value("reference", std::string());
  t.tie = j.value("tie", false);
  if (j.contains("profile")) {
    t.race = j["profile"].value("race", std::string());
    t.gender = j["profile"].value("gender", std::string());
  }
  return t;
}

std::string PreferenceDataset::to_jsonl() const {
  std::string out;
  for (const auto& t : tuples) out += to_json(t).dump() + "\n";
  return out;
}

PreferenceDataset parse_preferences(std::string_view jsonl, std::string_view source) {
  PreferenceDataset ds;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      ds.tuples.push_back(preference_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(Errc::kParseError, std::string(source) + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return ds;
}

PreferenceDataset load_preferences(const std::filesystem::path& path) {
  return parse_preferences(read_file(path), path.string());
}

DemographicProfile sample_profile(const CuratedAttributes& curated, std::uint64_t seed, std::uint64_t index) {
  if (curated.races.empty() || curated.genders.empty()) {
    throw Error(Errc::kEmptyList, "curated attribute lists must be non-empty");
  }
  const std::uint64_t draw = mix_seed(mix_seed(seed, "profile"), index);
  const auto& race = curated.races[bounded(mix_seed(draw, "race"), curated.races.size())];
  const auto& gender = curated.genders[bounded(mix_seed(draw, "gender"), curated.genders.size())];
  return DemographicProfile{race, gender.name, gender.pronouns};
}

bool mentions_phrase(std::string_view text, std::string_view phrase) {
  const std::vector<std::string> hay = words(text);
  const std::vector<std::string> needle = words(phrase);
  if (needle.empty()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

double content_word_retention(std::string_view original, std::string_view rewrite) {
  std::set<std::string> wanted;
  for (auto& w : words(original)) {
    if (!stopwords().count(w)) wanted.insert(w);
  }
  if (wanted.empty()) return 1.0;
  const std::vector<std::string> have_list = words(rewrite);
  const std::set<std::string> have(have_list.begin(), have_list.end());
  std::size_t kept = 0;
  for (const auto& w : wanted) kept += have.count(w);
  return static_cast<double>(kept) / static_cast<double>(wanted.size());
}

ModifiedQuery inject_demographics(const NeutralQuery& q, const DemographicProfile& profile, Gateway* teacher,
                                  ModifierMode mode) {
  if (!q.neutral) throw Error(Errc::kNotNeutral, "query " + q.id + " is not flagged demographically neutral");
  ModifiedQuery mq{q.id, profile, "", mode};
  if (mode == ModifierMode::kTemplateInsert) {
    mq.text = "A " + profile.race + " " + profile.gender + " patient asks: " + q.text;
    return mq;
  }
  if (teacher == nullptr) throw Error(Errc::kInvalidArgument, "teacher-rewrite mode needs a teacher backend");

  GenerationRequest req;
  req.prompt = rewrite_instruction({profile.race, profile.gender, q.text});
  req.max_tokens = 256;
  req.top_logprobs = 0;
  std::string why;
  for (int attempt = 0; attempt < 2; ++attempt) {
    // The retry changes the seed so it is a distinct request, not a cache hit.
    if (attempt > 0) req.seed = static_cast<std::uint64_t>(attempt);
    std::string text = teacher->generate(req).text;
    const auto first = text.find_first_not_of(" \t\r\n");
    text = first == std::string::npos ? "" : text.substr(first, text.find_last_not_of(" \t\r\n") - first + 1);
    if (!mentions_phrase(text, profile.race)) {
      why = "rewrite lacks race '" + profile.race + "'";
    } else if (!mentions_phrase(text, profile.gender)) {
      why = "rewrite lacks gender '" + profile.gender + "'";
    } else if (content_word_retention(q.text, text) < kMinContentRetention) {
      why = "rewrite drops too many content words";
    } else if (text == q.text) {
      why = "rewrite is unchanged";
    } else {
      mq.text = std::move(text);
      return mq;
    }
  }
  throw Error(Errc::kAttributeMissingInRewrite, "query " + q.id + ": " + why + " after retry");
}

std::string reference_answer(const NeutralQuery& q, Gateway& teacher, int max_tokens) {
  GenerationRequest req;
  req.prompt = q.text;
  req.max_tokens = max_tokens;
  req.top_logprobs = 0;
  return teacher.generate(req).text;
}

std::uint64_t candidate_seed(std::uint64_t run_seed, std::string_view neutral_id, int k, int attempt) {
  std::uint64_t base = mix_seed(mix_seed(run_seed, "candidates"), neutral_id);
  if (attempt > 0) base = mix_seed(base, static_cast<std::uint64_t>(attempt));
  // Keep seeds exactly representable for servers that parse them as doubles.
  base >>= 12;
  return base * 2 + static_cast<std::uint64_t>(k - 1);
}

std::optional<CandidatePair> candidate_answers(const ModifiedQuery& mq, Gateway& target, std::uint64_t run_seed,
                                               const GenerationOptions& options) {
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::string out[2];
    for (int k = 1; k <= 2; ++k) {
      GenerationRequest req;
      req.prompt = mq.text;
      req.max_tokens = options.max_tokens;
      req.temperature = options.temperature;
      req.top_logprobs = 0;
      req.seed = candidate_seed(run_seed, mq.neutral_id, k, attempt);
      out[k - 1] = target.generate(req).text;
    }
    if (out[0] != out[1]) return CandidatePair{std::move(out[0]), std::move(out[1]), attempt > 0};
  }
  return std::nullopt;
}

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) {
    throw Error(Errc::kDimMismatch, std::to_string(u.size()) + " vs " + std::to_string(v.size()) + " dimensions");
  }
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw Error(Errc::kZeroVector, "cosine of an all-zero vector");
  return std::clamp(dot / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

RankResult rank_embeddings(const EmbeddingVector& reference, const EmbeddingVector& c1, const EmbeddingVector& c2) {
  RankResult r;
  r.sim_first = cosine(reference, c1);
  r.sim_second = cosine(reference, c2);
  r.tie = r.sim_first == r.sim_second;
  r.first_wins = r.sim_first >= r.sim_second;
  return r;
}

PreferenceTuple rank(const std::string& reference, const std::string& c1, const std::string& c2, Gateway& embedder) {
  const EmbeddingVector er = embedder.embed(reference);
  const EmbeddingVector e1 = embedder.embed(c1);
  const EmbeddingVector e2 = embedder.embed(c2);
  const RankResult r = rank_embeddings(er, e1, e2);
  PreferenceTuple t;
  t.reference = reference;
  t.tie = r.tie;
  t.chosen = r.first_wins ? c1 : c2;
  t.rejected = r.first_wins ? c2 : c1;
  t.sim_chosen = r.first_wins ? r.sim_first : r.sim_second;
  t.sim_rejected = r.first_wins ? r.sim_second : r.sim_first;
  return t;
}

json BuildConfig::to_json() const {
  return {{"seed", seed},
          {"curated", curated.to_json()},
          {"mode", to_string(mode)},
          {"self_teacher", self_teacher},
          {"temperature", candidates.temperature},
          {"max_tokens", candidates.max_tokens},
          {"reference_max_tokens", reference_max_tokens},
          {"max_failure_rate", max_failure_rate}};
}

std::string config_digest(const BuildConfig& config, const Gateway& teacher, const Gateway& target,
                          const Gateway& embedder) {
  const Gateway& effective_teacher = config.self_teacher ? target : teacher;
  const json doc{{"build", config.to_json()},
                 {"teacher", effective_teacher.config().to_json()},
                 {"target", target.config().to_json()},
                 {"embedder", embedder.config().to_json()}};
  return sha256_hex(doc.dump());
}

BuildOutcome build_dataset(const std::vector<NeutralQuery>& queries, Gateway& teacher, Gateway& target,
                           Gateway& embedder, const BuildConfig& config) {
  Gateway& role_teacher = config.self_teacher ? target : teacher;
  BuildOutcome outcome;
  outcome.teacher_id = role_teacher.backend_id();
  outcome.dataset.provenance = config_digest(config, teacher, target, embedder);

  struct Slot {
    std::optional<PreferenceTuple> tuple;
    std::optional<QueryIssue> dropped;
    std::optional<QueryIssue> failed;
  };
  std::vector<std::size_t> work;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].neutral) {
      work.push_back(i);
    } else {
      outcome.excluded.push_back({queries[i].id, "not flagged neutral"});
    }
  }
  outcome.attempted = work.size();
  std::vector<Slot> slots(queries.size());

  auto process = [&](std::size_t i) {
    const NeutralQuery& q = queries[i];
    Slot& slot = slots[i];
    try {
      const DemographicProfile profile = sample_profile(config.curated, config.seed, i);
      const ModifiedQuery mq = inject_demographics(q, profile, &role_teacher, config.mode);
      const std::string reference = reference_answer(q, role_teacher, config.reference_max_tokens);
      const auto pair = candidate_answers(mq, target, config.seed, config.candidates);
      if (!pair) {
        slot.dropped = QueryIssue{q.id, "identical candidates after regeneration"};
        return;
      }
      PreferenceTuple t = rank(reference, pair->first, pair->second, embedder);
      t.id = q.id;
      t.prompt = mq.text;
      t.race = profile.race;
      t.gender = profile.gender;
      slot.tuple = std::move(t);
    } catch (const std::exception& e) {
      slot.failed = QueryIssue{q.id, e.what()};
    }
  };

  const std::size_t threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(config.threads, 1)), 1,
                                                      std::max<std::size_t>(work.size(), 1));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t w = next++; w < work.size(); w = next++) process(work[w]);
    });
  }
  for (auto& th : pool) th.join();

  std::vector<std::size_t> order(queries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return queries[a].id < queries[b].id; });
  for (std::size_t i : order) {
    Slot& s = slots[i];
    if (s.tuple) outcome.dataset.tuples.push_back(std::move(*s.tuple));
    if (s.dropped) outcome.dropped.push_back(std::move(*s.dropped));
    if (s.failed) outcome.failed.push_back(std::move(*s.failed));
  }

  const double rate = outcome.attempted == 0
                          ? 0.0
                          : static_cast<double>(outcome.failed.size()) / static_cast<double>(outcome.attempted);
  if (rate > config.max_failure_rate) {
    std::string msg = std::to_string(outcome.failed.size()) + " of " + std::to_string(outcome.attempted) +
                      " queries failed; first: " + outcome.failed.front().id + ": " + outcome.failed.front().reason;
    throw BuildFailedError(msg, std::move(outcome));
  }
  return outcome;
}

json build_manifest(const BuildOutcome& outcome, const BuildConfig& config, const Gateway& teacher,
                    const Gateway& target, const Gateway& embedder) {
  auto issues = [](const std::vector<QueryIssue>& v) {
    json a = json::array();
    for (const auto& i : v) a.push_back({{"id", i.id}, {"reason", i.reason}});
    return a;
  };
  const Gateway& role_teacher = config.self_teacher ? target : teacher;
  return {{"seed", config.seed},
          {"self_teacher", config.self_teacher},
          {"mode", to_string(config.mode)},
          {"backends",
           {{"teacher", role_teacher.backend_id()}, {"target", target.backend_id()}, {"embedder", embedder.backend_id()}}},
          {"config", config.to_json()},
          {"config_digest", outcome.dataset.provenance},
          {"dataset_digest", sha256_hex(outcome.dataset.to_jsonl())},
          {"n", outcome.dataset.size()},
          {"attempted", outcome.attempted},
          {"dropped", issues(outcome.dropped)},
          {"failed", issues(outcome.failed)},
          {"excluded", issues(outcome.excluded)}};
}

}  // namespace fairalign
