#include "fairalign/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "fairalign/error.hpp"
#include "fairalign/seed.hpp"

namespace fairalign {
namespace {

using json = nlohmann::json;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string_view to_string(BinaryMode m) {
  switch (m) {
    case BinaryMode::kAuto: return "auto";
    case BinaryMode::kLogprob: return "logprob";
    case BinaryMode::kSampling: return "sampling";
  }
  return "auto";
}

BinaryMode parse_binary_mode(std::string_view s) {
  if (s == "auto") return BinaryMode::kAuto;
  if (s == "logprob") return BinaryMode::kLogprob;
  if (s == "sampling") return BinaryMode::kSampling;
  throw Error(Errc::kInvalidArgument, "unknown binary mode '" + std::string(s) + "'");
}

std::string num(double v) { return std::isfinite(v) ? json(v).dump() : ""; }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Seed for sample k of one prompt. The profile is deliberately not an input:
// every counterfactual rendering of a prompt sees the same random numbers.
std::uint64_t sample_seed(std::uint64_t run_seed, std::string_view stream, const std::string& template_id,
                          PromptStrategy strategy, std::size_t k) {
  std::uint64_t s = mix_seed(mix_seed(run_seed, stream), template_id);
  s = mix_seed(s, to_string(strategy));
  return mix_seed(s, static_cast<std::uint64_t>(k)) >> 12;
}

std::string model_name(const Gateway& g) {
  return g.config().model_name.empty() ? g.backend_id() : g.config().model_name;
}

struct ItemResult {
  std::vector<RunRecord> records;
  std::optional<Error> error;
};

class Evaluator {
 public:
  Evaluator(const RunConfig& config, Gateway& target) : config_(config), target_(target), model_(model_name(target)) {}

  ItemResult run(const VignetteTemplate& t, const RenderedPrompt& prompt) const {
    ItemResult out;
    try {
      if (t.answer_schema == AnswerSchema::kLikert1To5) {
        out.records = likert(t, prompt);
      } else {
        out.records = binary(t, prompt);
      }
    } catch (const Error& e) {
      RunRecord r = base(t, prompt, t.id, "");
      r.error = e.what();
      out.records.push_back(std::move(r));
      out.error = e;
    }
    return out;
  }

 private:
  RunRecord base(const VignetteTemplate& t, const RenderedPrompt& p, const std::string& question,
                 const std::string& path) const {
    RunRecord r;
    r.model = model_;
    r.task = std::string(to_string(t.task_kind));
    r.template_id = t.id;
    r.question_id = question;
    r.strategy = p.strategy;
    r.race = p.profile ? p.profile->race : "";
    r.gender = p.profile ? p.profile->gender : "";
    r.path = path;
    return r;
  }

  bool is_json(const VignetteTemplate& t) const { return t.answer_schema == AnswerSchema::kJsonTwoBooleans; }

  std::vector<RunRecord> binary(const VignetteTemplate& t, const RenderedPrompt& p) const {
    if (config_.binary_mode != BinaryMode::kSampling) {
      GenerationRequest req;
      req.prompt = p.text;
      req.max_tokens = is_json(t) ? 64 : 1;
      req.temperature = 0.0;
      req.top_logprobs = 20;
      const GenerationResult res = target_.generate(req);
      if (res.has_logprobs) return logprob_records(t, p, res, target_.key_for(req));
      if (config_.binary_mode == BinaryMode::kLogprob) {
        throw Error(Errc::kMalformedResponse, "backend returned no log-probabilities");
      }
    }
    return sampling_records(t, p);
  }

  std::vector<RunRecord> logprob_records(const VignetteTemplate& t, const RenderedPrompt& p,
                                         const GenerationResult& res, const std::string& key) const {
    std::vector<RunRecord> out;
    auto push = [&](const std::string& question, double pn) {
      RunRecord r = base(t, p, question, "logprob");
      r.p_negative = pn;
      r.cache_keys = {key};
      r.created_at = res.created_at;
      out.push_back(std::move(r));
    };
    if (is_json(t)) {
      const auto probs = boolean_position_probabilities(res);
      if (!probs) throw Error(Errc::kNoChoiceTokenFound, "no true/false tokens with alternatives in the answer");
      push(t.id + "/" + t.answer_fields.at(0), probs->first);
      push(t.id + "/" + t.answer_fields.at(1), probs->second);
    } else {
      push(t.id, closed_answer_probability(res, kYesTokens, kNoTokens));
    }
    return out;
  }

  std::vector<RunRecord> sampling_records(const VignetteTemplate& t, const RenderedPrompt& p) const {
    std::vector<RunRecord> out;
    for (std::size_t k = 0; k < config_.binary_samples; ++k) {
      GenerationRequest req;
      req.prompt = p.text;
      req.max_tokens = is_json(t) ? 64 : 8;
      req.temperature = config_.sampling_temperature;
      req.top_logprobs = 0;
      req.seed = sample_seed(config_.seed, "binary-sample", t.id, p.strategy, k);
      const GenerationResult res = target_.generate(req);
      const std::string key = target_.key_for(req);
      auto push = [&](const std::string& question, std::optional<bool> negative) {
        RunRecord r = base(t, p, question, "sampling");
        r.sample = k;
        r.negative = negative;
        r.cache_keys = {key};
        r.created_at = res.created_at;
        out.push_back(std::move(r));
      };
      if (is_json(t)) {
        const auto parsed = parse_two_booleans(res.text, t.answer_fields);
        push(t.id + "/" + t.answer_fields.at(0), parsed ? std::optional<bool>(!parsed->first) : std::nullopt);
        push(t.id + "/" + t.answer_fields.at(1), parsed ? std::optional<bool>(!parsed->second) : std::nullopt);
      } else {
        const auto yes = parse_yes_no(res.text);
        push(t.id, yes ? std::optional<bool>(!*yes) : std::nullopt);
      }
    }
    return out;
  }

  std::vector<RunRecord> likert(const VignetteTemplate& t, const RenderedPrompt& p) const {
    std::vector<RunRecord> out;
    for (std::size_t k = 0; k < config_.samples; ++k) {
      RunRecord r = base(t, p, t.id, "likert");
      r.sample = k;
      GenerationRequest req;
      req.prompt = p.text;
      req.max_tokens = 8;
      req.temperature = config_.sampling_temperature;
      req.top_logprobs = 0;
      req.seed = sample_seed(config_.seed, "likert", t.id, p.strategy, k);
      for (int attempt = 0; attempt < 2 && !r.rating; ++attempt) {
        if (attempt > 0) req.seed = mix_seed(*req.seed, "retry") >> 12;
        const GenerationResult res = target_.generate(req);
        r.cache_keys.push_back(target_.key_for(req));
        r.created_at = res.created_at;
        r.rating = parse_likert_rating(res.text);
      }
      out.push_back(std::move(r));
    }
    return out;
  }

  const RunConfig& config_;
  Gateway& target_;
  std::string model_;
};

std::vector<DemographicProfile> rotation_profiles(const RunConfig& config) {
  std::vector<DemographicProfile> all = all_profiles(config.attributes);
  if (config.rotations == 0 || config.rotations >= all.size()) return all;
  // Seeded sample without replacement, kept in cross-product order.
  std::vector<std::size_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const std::uint64_t stream = mix_seed(config.seed, "rotations");
  for (std::size_t i = 0; i < config.rotations; ++i) {
    const std::size_t j = i + bounded(mix_seed(stream, static_cast<std::uint64_t>(i)), idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(config.rotations);
  std::sort(idx.begin(), idx.end());
  std::vector<DemographicProfile> out;
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(Errc::kInvalidArgument, m); };
  if (!backends.count("target")) fail("config needs a 'target' backend");
  for (const auto& [role, b] : backends) b.validate();
  if (rotations == 1) fail("rotations must cover at least two groups");
  if (samples == 0) fail("samples must be at least 1");
  if (binary_samples == 0) fail("binary_samples must be at least 1");
  if (!(alpha > 0.0 && alpha < 1.0)) fail("alpha must lie in (0, 1)");
  if (!(max_failure_rate >= 0.0 && max_failure_rate <= 1.0)) fail("max_failure_rate must lie in [0, 1]");
  if (!(sampling_temperature >= 0.0)) fail("sampling_temperature must be non-negative");
  if (threads < 1) fail("threads must be at least 1");
  if (strategies.empty()) fail("at least one strategy is required");
  if (attributes.races.empty() || attributes.genders.empty()) fail("attribute lists must be non-empty");
  simpo.validate();
}

json RunConfig::to_json() const {
  json b = json::object();
  for (const auto& [role, cfg] : backends) b[role] = cfg.to_json();
  json s = json::array();
  for (auto st : strategies) s.push_back(std::string(fairalign::to_string(st)));
  return {{"seed", seed},
          {"backends", b},
          {"attributes", attributes.to_json()},
          {"strategies", s},
          {"rotations", rotations},
          {"samples", samples},
          {"alpha", alpha},
          {"binary_mode", to_string(binary_mode)},
          {"binary_samples", binary_samples},
          {"sampling_temperature", sampling_temperature},
          {"out_dir", out_dir.string()},
          {"cache_dir", cache_dir ? json(cache_dir->string()) : json(nullptr)},
          {"offline", offline},
          {"self_teacher", self_teacher},
          {"modifier_mode", fairalign::to_string(modifier_mode)},
          {"candidate_temperature", candidate_temperature},
          {"max_failure_rate", max_failure_rate},
          {"threads", threads},
          {"simpo", simpo.to_json()},
          {"model", model.to_json()}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error(Errc::kParseError, "config must be a JSON object");
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  if (j.contains("backends")) {
    for (const auto& [role, bj] : j["backends"].items()) {
      json doc = bj;
      if (!doc.contains("id")) doc["id"] = role;
      c.backends[role] = BackendConfig::from_json(doc);
    }
  }
  if (j.contains("attributes") && j["attributes"].is_object()) c.attributes = CuratedAttributes::from_json(j["attributes"]);
  if (j.contains("strategies")) {
    c.strategies.clear();
    for (const auto& s : j["strategies"]) c.strategies.push_back(parse_strategy(s.get<std::string>()));
  }
  c.rotations = j.value("rotations", c.rotations);
  c.samples = j.value("samples", c.samples);
  c.alpha = j.value("alpha", c.alpha);
  if (j.contains("binary_mode")) c.binary_mode = parse_binary_mode(j["binary_mode"].get<std::string>());
  c.binary_samples = j.value("binary_samples", c.binary_samples);
  c.sampling_temperature = j.value("sampling_temperature", c.sampling_temperature);
  if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("cache_dir") && j["cache_dir"].is_string()) c.cache_dir = j["cache_dir"].get<std::string>();
  c.offline = j.value("offline", c.offline);
  c.self_teacher = j.value("self_teacher", c.self_teacher);
  if (j.contains("modifier_mode")) c.modifier_mode = parse_modifier_mode(j["modifier_mode"].get<std::string>());
  c.candidate_temperature = j.value("candidate_temperature", c.candidate_temperature);
  c.max_failure_rate = j.value("max_failure_rate", c.max_failure_rate);
  c.threads = j.value("threads", c.threads);
  if (j.contains("simpo")) c.simpo = SimPOConfig::from_json(j["simpo"]);
  if (j.contains("model")) c.model = ToyConfig::from_json(j["model"]);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(Errc::kParseError, path.string() + ": " + e.what());
  }
  // A string "attributes" names a file relative to the config.
  if (j.contains("attributes") && j["attributes"].is_string()) {
    const auto attr = path.parent_path() / j["attributes"].get<std::string>();
    j["attributes"] = CuratedAttributes::load(attr).to_json();
  }
  // Mock specs may live in their own files.
  if (j.contains("backends")) {
    for (auto& [role, bj] : j["backends"].items()) {
      if (bj.contains("mock") && bj["mock"].is_string()) {
        const auto spec = path.parent_path() / bj["mock"].get<std::string>();
        try {
          bj["mock"] = json::parse(read_file(spec));
        } catch (const json::exception& e) {
          throw Error(Errc::kParseError, spec.string() + ": " + e.what());
        }
      }
    }
  }
  return from_json(j);
}

BackendPool::BackendPool(const RunConfig& config) {
  for (const auto& [role, cfg] : config.backends) {
    auto gw = std::make_unique<Gateway>(make_backend(cfg), cfg, config.cache_dir);
    gw->set_offline(config.offline);
    gateways_[role] = std::move(gw);
  }
}

Gateway& BackendPool::role(const std::string& name) {
  auto it = gateways_.find(name);
  if (it == gateways_.end()) it = gateways_.find("target");
  if (it == gateways_.end()) throw Error(Errc::kInvalidArgument, "no backend for role '" + name + "'");
  return *it->second;
}

// ---------------------------------------------------------------------------
// Records

json RunRecord::to_json() const {
  json j{{"model", model},
         {"task", task},
         {"template_id", template_id},
         {"question_id", question_id},
         {"strategy", fairalign::to_string(strategy)},
         {"profile", {{"race", race}, {"gender", gender}}},
         {"path", path},
         {"sample", sample},
         {"cache_keys", cache_keys},
         {"created_at", created_at}};
  json outcome = json::object();
  if (p_negative) outcome["p_negative"] = *p_negative;
  if (path == "sampling") outcome["negative"] = negative ? json(*negative) : json(nullptr);
  if (path == "likert") outcome["rating"] = rating ? json(*rating) : json(nullptr);
  j["outcome"] = outcome;
  if (!error.empty()) j["error"] = error;
  return j;
}

RunRecord RunRecord::from_json(const json& j) {
  RunRecord r;
  r.model = j.at("model").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.template_id = j.value("template_id", std::string());
  r.question_id = j.at("question_id").get<std::string>();
  r.strategy = parse_strategy(j.at("strategy").get<std::string>());
  r.race = j.at("profile").at("race").get<std::string>();
  r.gender = j.at("profile").at("gender").get<std::string>();
  r.path = j.value("path", std::string());
  r.sample = j.value("sample", std::size_t{0});
  r.cache_keys = j.value("cache_keys", std::vector<std::string>{});
  r.created_at = j.value("created_at", std::string());
  r.error = j.value("error", std::string());
  const json outcome = j.value("outcome", json::object());
  if (outcome.contains("p_negative") && outcome["p_negative"].is_number()) r.p_negative = outcome["p_negative"].get<double>();
  if (outcome.contains("negative") && outcome["negative"].is_boolean()) r.negative = outcome["negative"].get<bool>();
  if (outcome.contains("rating") && outcome["rating"].is_number_integer()) r.rating = outcome["rating"].get<int>();
  return r;
}

std::vector<RunRecord> parse_records(std::string_view jsonl, std::string_view source) {
  std::vector<RunRecord> out;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(RunRecord::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw Error(Errc::kParseError, std::string(source) + ":" + std::to_string(n) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(Errc::kParseError, std::string(source) + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

std::vector<RunRecord> load_records(const std::filesystem::path& path) {
  return parse_records(read_file(path), path.string());
}

std::string records_to_jsonl(const std::vector<RunRecord>& records) {
  std::string out;
  for (const auto& r : records) out += r.to_json().dump() + "\n";
  return out;
}

BiasReport aggregate(const std::vector<RunRecord>& records, double alpha) {
  std::map<ReportKey, std::vector<BinaryOutcomeSample>> binary;
  std::map<ReportKey, std::vector<LikertSample>> likert;
  std::map<ReportKey, std::int64_t> excluded;
  // (key, question, race, gender) -> (negatives, parsed)
  std::map<std::tuple<ReportKey, std::string, std::string, std::string, PromptStrategy>, std::pair<int, int>> sampled;

  for (const auto& r : records) {
    if (!r.error.empty()) continue;
    const ReportKey key{r.model, r.task, std::string(to_string(r.strategy))};
    const DemographicProfile profile{r.race, r.gender, {}};
    if (r.path == "logprob" && r.p_negative) {
      binary[key].emplace_back(r.question_id, profile, *r.p_negative, r.strategy);
    } else if (r.path == "sampling") {
      auto& cell = sampled[{key, r.question_id, r.race, r.gender, r.strategy}];
      if (r.negative) {
        cell.first += *r.negative ? 1 : 0;
        cell.second += 1;
      }
    } else if (r.path == "likert") {
      if (r.rating) {
        likert[key].emplace_back(r.question_id, profile, *r.rating);
      } else {
        ++excluded[key];
      }
    }
  }
  for (const auto& [k, cell] : sampled) {
    const auto& [key, question, race, gender, strategy] = k;
    if (cell.second == 0) continue;
    binary[key].emplace_back(question, DemographicProfile{race, gender, {}},
                             static_cast<double>(cell.first) / static_cast<double>(cell.second), strategy);
  }

  BiasReport report;
  report.alpha = alpha;
  for (const auto& [key, samples] : binary) report.binary.push_back(summarize_binary(key, samples, alpha));
  std::set<ReportKey> likert_keys;
  for (const auto& [key, s] : likert) likert_keys.insert(key);
  for (const auto& [key, n] : excluded) likert_keys.insert(key);
  for (const auto& key : likert_keys) {
    const auto it = likert.find(key);
    const auto ex = excluded.find(key);
    report.likert.push_back(summarize_likert(key, it == likert.end() ? std::vector<LikertSample>{} : it->second,
                                             ex == excluded.end() ? 0 : ex->second, alpha));
  }
  return report;
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::kIo, "cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(Errc::kIo, "short write to " + path.string());
}

// ---------------------------------------------------------------------------
// evaluate

EvaluateResult evaluate(const RunConfig& config, const std::vector<VignetteTemplate>& templates, Gateway& target) {
  config.validate();
  const std::vector<DemographicProfile> profiles = rotation_profiles(config);
  struct Item {
    const VignetteTemplate* t;
    RenderedPrompt prompt;
  };
  EvaluateResult result;
  std::vector<Item> items;
  for (const auto& t : templates) {
    if (t.answer_schema == AnswerSchema::kFreeText) {
      result.skipped.push_back(t.id + ": free-text answers carry no closed outcome");
      continue;
    }
    for (PromptStrategy s : config.strategies) {
      try {
        for (auto& p : rotate(t, profiles, s)) items.push_back({&t, std::move(p)});
      } catch (const Error& e) {
        if (e.code() != Errc::kStrategyUnsupported) throw;
        result.skipped.push_back(t.id + "|" + std::string(to_string(s)) + ": " + e.what());
      }
    }
  }
  result.work_items = items.size();

  const Evaluator evaluator(config, target);
  std::vector<ItemResult> slots(items.size());
  std::atomic<std::size_t> next{0};
  const std::size_t threads = std::clamp<std::size_t>(static_cast<std::size_t>(config.threads), 1,
                                                      std::max<std::size_t>(items.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < threads; ++i) {
    pool.emplace_back([&] {
      for (std::size_t w = next++; w < items.size(); w = next++) slots[w] = evaluator.run(*items[w].t, items[w].prompt);
    });
  }
  for (auto& th : pool) th.join();

  std::optional<Error> first_error;
  bool same_code = true;
  for (auto& slot : slots) {
    if (slot.error) {
      ++result.failed;
      if (!first_error) {
        first_error = slot.error;
      } else if (slot.error->code() != first_error->code()) {
        same_code = false;
      }
    }
    for (auto& r : slot.records) result.records.push_back(std::move(r));
  }
  if (result.work_items > 0 &&
      static_cast<double>(result.failed) / static_cast<double>(result.work_items) > config.max_failure_rate) {
    const std::string msg = std::to_string(result.failed) + " of " + std::to_string(result.work_items) +
                            " work items failed; first: " + first_error->what();
    if (result.failed == result.work_items && same_code) throw Error(first_error->code(), msg);
    throw Error(Errc::kRunFailed, msg);
  }
  result.report = aggregate(result.records, config.alpha);
  return result;
}

EvaluateResult run_evaluate(const RunConfig& config, const std::filesystem::path& templates_path) {
  const std::vector<VignetteTemplate> templates = load_templates(templates_path);
  BackendPool pool(config);
  EvaluateResult result = evaluate(config, templates, pool.role("target"));
  write_file(config.out_dir / "results.jsonl", records_to_jsonl(result.records));
  write_file(config.out_dir / "bias_report.json", result.report.to_json().dump(2) + "\n");
  write_file(config.out_dir / "bias_report.csv", result.report.to_csv());
  return result;
}

// ---------------------------------------------------------------------------
// report

std::string bars_csv(const BiasReport& report) {
  std::string out = "model,task,strategy,mean_max_diff,std_max_diff,questions\n";
  for (const auto& t : report.binary) {
    out += csv_field(t.key.model) + "," + csv_field(t.key.task) + "," + csv_field(t.key.strategy) + "," +
           num(t.average.mean) + "," + num(t.average.std) + "," + std::to_string(t.questions.size()) + "\n";
  }
  return out;
}

std::string likert_csv(const BiasReport& report) {
  std::string out = "model,task,strategy,group,p1,p2,p3,p4,p5,n,excluded\n";
  for (const auto& t : report.likert) {
    for (const auto& [group, p] : t.distribution) {
      out += csv_field(t.key.model) + "," + csv_field(t.key.task) + "," + csv_field(t.key.strategy) + "," +
             csv_field(group);
      for (double v : p) out += "," + num(v);
      const auto n = t.counts.find(group);
      out += "," + std::to_string(n == t.counts.end() ? 0 : n->second) + "," + std::to_string(t.excluded) + "\n";
    }
  }
  return out;
}

std::string pvalues_csv(const BiasReport& report) {
  std::string out = "model,task,strategy,scope,test,statistic,df1,df2,p,significant\n";
  auto row = [&](const ReportKey& k, const std::string& scope, const char* test,
                 const std::optional<stats::TestResult>& r) {
    out += csv_field(k.model) + "," + csv_field(k.task) + "," + csv_field(k.strategy) + "," + csv_field(scope) + "," +
           test + ",";
    if (r) {
      out += num(r->statistic) + "," + num(r->df1) + "," + (r->df2 ? num(*r->df2) : "") + "," + num(r->p_value) + "," +
             (r->significant ? "true" : "false");
    } else {
      out += ",,,,";
    }
    out += "\n";
  };
  for (const auto& t : report.binary) {
    row(t.key, "task", "welch", t.welch);
    for (const auto& q : t.questions) {
      if (q.test) row(t.key, q.question_id, "welch", q.test);
    }
  }
  for (const auto& t : report.likert) {
    row(t.key, "task", "chi-squared", t.chi_squared);
    for (const auto& q : t.per_question) row(t.key, q.question_id, "chi-squared", q.test);
    for (const auto& p : t.pairwise) row(t.key, p.group_a + " vs " + p.group_b, "chi-squared", p.test);
  }
  return out;
}

std::string bars_svg(const BiasReport& report) {
  const double bar_w = 36, gap = 14, left = 60, top = 20, height = 220, bottom = 140;
  double max_v = 0.05;
  for (const auto& t : report.binary) max_v = std::max(max_v, t.average.mean + t.average.std);
  const double width = left + static_cast<double>(report.binary.size()) * (bar_w + gap) + gap;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + bottom
    << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + height
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top + height << "\" x2=\"" << width << "\" y2=\"" << top + height
    << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = max_v * tick / 4.0;
    const double y = top + height - height * tick / 4.0;
    s << "<text x=\"" << left - 4 << "\" y=\"" << y + 3 << "\" text-anchor=\"end\">" << num(std::round(v * 1000) / 1000)
      << "</text>\n";
  }
  double x = left + gap;
  for (const auto& t : report.binary) {
    const double h = height * t.average.mean / max_v;
    s << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar_w << "\" height=\"" << h
      << "\" fill=\"#4c72b0\"><title>" << xml_escape(t.key.model + " " + t.key.task + " " + t.key.strategy)
      << "</title></rect>\n";
    const double ey1 = top + height - height * (t.average.mean + t.average.std) / max_v;
    const double ey2 = top + height - height * std::max(0.0, t.average.mean - t.average.std) / max_v;
    s << "<line x1=\"" << x + bar_w / 2 << "\" y1=\"" << ey1 << "\" x2=\"" << x + bar_w / 2 << "\" y2=\"" << ey2
      << "\" stroke=\"black\"/>\n";
    s << "<text transform=\"translate(" << x + bar_w / 2 << "," << top + height + 8 << ") rotate(60)\">"
      << xml_escape(t.key.task + " / " + t.key.strategy) << "</text>\n";
    x += bar_w + gap;
  }
  s << "</svg>\n";
  return s.str();
}

std::string likert_svg(const BiasReport& report) {
  static const char* kColors[5] = {"#d7191c", "#fdae61", "#ffffbf", "#abd9e9", "#2c7bb6"};
  const double bar_w = 28, gap = 8, left = 40, top = 20, height = 200, bottom = 160, block_gap = 30;
  std::size_t bars = 0;
  for (const auto& t : report.likert) bars += t.distribution.size();
  const double width = left + static_cast<double>(bars) * (bar_w + gap) +
                       static_cast<double>(report.likert.size()) * block_gap + gap;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + bottom
    << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  double x = left;
  for (const auto& t : report.likert) {
    s << "<text x=\"" << x << "\" y=\"" << top - 6 << "\">" << xml_escape(t.key.task + " / " + t.key.strategy)
      << "</text>\n";
    for (const auto& [group, p] : t.distribution) {
      double y = top + height;
      for (std::size_t i = 0; i < 5; ++i) {
        const double h = height * p[i];
        y -= h;
        s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w << "\" height=\"" << h << "\" fill=\""
          << kColors[i] << "\"><title>" << xml_escape(group) << " rating " << i + 1 << ": " << num(p[i])
          << "</title></rect>\n";
      }
      s << "<text transform=\"translate(" << x + bar_w / 2 << "," << top + height + 8 << ") rotate(60)\">"
        << xml_escape(group) << "</text>\n";
      x += bar_w + gap;
    }
    x += block_gap;
  }
  s << "</svg>\n";
  return s.str();
}

ReportFiles run_report(const std::filesystem::path& results_path, const std::filesystem::path& out_dir, bool svg,
                       double alpha) {
  const std::vector<RunRecord> records = load_records(results_path);
  if (records.empty()) throw Error(Errc::kEmptyResults, results_path.string() + " holds no records");
  ReportFiles files;
  files.report = aggregate(records, alpha);
  auto emit = [&](const char* name, const std::string& content) {
    write_file(out_dir / name, content);
    files.written.push_back(out_dir / name);
  };
  emit("summary.csv", files.report.to_csv());
  emit("bars.csv", bars_csv(files.report));
  emit("likert.csv", likert_csv(files.report));
  emit("pvalues.csv", pvalues_csv(files.report));
  if (svg) {
    emit("bars.svg", bars_svg(files.report));
    emit("likert.svg", likert_svg(files.report));
  }
  return files;
}

// ---------------------------------------------------------------------------
// build-prefs

BuildOutcome run_build_prefs(const RunConfig& config, const std::filesystem::path& queries_path) {
  config.validate();
  const std::vector<NeutralQuery> queries = load_queries(queries_path);
  BackendPool pool(config);
  Gateway& teacher = pool.role("teacher");
  Gateway& target = pool.role("target");
  Gateway& embedder = pool.role("embedder");
  BuildConfig bc;
  bc.seed = config.seed;
  bc.curated = config.attributes;
  bc.mode = config.modifier_mode;
  bc.self_teacher = config.self_teacher;
  bc.candidates.temperature = config.candidate_temperature;
  bc.threads = config.threads;
  bc.max_failure_rate = config.max_failure_rate;
  try {
    BuildOutcome outcome = build_dataset(queries, teacher, target, embedder, bc);
    write_file(config.out_dir / "prefs.jsonl", outcome.dataset.to_jsonl());
    write_file(config.out_dir / "prefs.manifest.json",
               build_manifest(outcome, bc, teacher, target, embedder).dump(2) + "\n");
    return outcome;
  } catch (const BuildFailedError& e) {
    write_file(config.out_dir / "prefs.jsonl.partial", e.partial().dataset.to_jsonl());
    json manifest = build_manifest(e.partial(), bc, teacher, target, embedder);
    manifest["failed"] = true;
    manifest["error"] = e.what();
    write_file(config.out_dir / "prefs.manifest.json", manifest.dump(2) + "\n");
    throw;
  }
}

// ---------------------------------------------------------------------------
// align

AlignResult run_align(const RunConfig& config, const std::filesystem::path& prefs_path,
                      const std::optional<std::filesystem::path>& model_path) {
  config.simpo.validate();
  const PreferenceDataset prefs = load_preferences(prefs_path);
  if (prefs.tuples.empty()) throw Error(Errc::kEmptyDataset, prefs_path.string() + " holds no preference pairs");
  AlignResult out;
  std::optional<ToyLM> model;
  if (model_path) {
    model = ToyLM::load(*model_path);
    out.model_path = *model_path;
  } else {
    std::vector<std::string> texts;
    std::size_t needed = 0;
    for (const auto& t : prefs.tuples) {
      texts.push_back(t.prompt);
      texts.push_back(t.chosen);
      texts.push_back(t.rejected);
      const std::size_t x = Tokenizer::split(t.prompt).size();
      needed = std::max({needed, x + Tokenizer::split(t.chosen).size(), x + Tokenizer::split(t.rejected).size()});
    }
    ToyConfig mc = config.model;
    mc.seed = config.seed;
    mc.context = std::max(mc.context, needed);
    model.emplace(mc, Tokenizer::from_texts(texts));
    out.model_path = config.out_dir / "model.json";
    std::filesystem::create_directories(config.out_dir);
    model->save(out.model_path);
  }
  SimPOConfig sc = config.simpo;
  sc.seed = config.seed;
  out.train = train(*model, prefs, sc);
  out.adapter_path = config.out_dir / "adapters.json";
  out.report_path = config.out_dir / "train_report.json";
  write_file(out.adapter_path, out.train.adapters.to_json().dump() + "\n");
  json report = out.train.report.to_json();
  report["config"] = sc.to_json();
  write_file(out.report_path, report.dump(2) + "\n");
  return out;
}

// ---------------------------------------------------------------------------
// utility

std::vector<UtilityItem> load_utility_items(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<UtilityItem> items;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      UtilityItem item{j.at("question").get<std::string>(), j.value("context", std::string()),
                       j.at("label").get<std::string>()};
      std::transform(item.label.begin(), item.label.end(), item.label.begin(),
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      if (item.label != "yes" && item.label != "no" && item.label != "maybe") {
        throw Error(Errc::kDomainError, "label '" + item.label + "' is not yes, no or maybe");
      }
      items.push_back(std::move(item));
    } catch (const json::exception& e) {
      throw Error(Errc::kParseError, path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(e.code(), path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return items;
}

std::string utility_prompt(const UtilityItem& item) {
  std::string p;
  if (!item.context.empty()) p += "Context: " + item.context + "\n";
  p += "Question: " + item.question + "\nAnswer with yes, no, or maybe.\nAnswer:";
  return p;
}

UtilityScore score_utility(const std::vector<UtilityItem>& items, Gateway& backend) {
  if (items.empty()) throw Error(Errc::kEmptyInput, "utility dataset is empty");
  static const std::vector<std::pair<std::string, TokenSet>> kLabels{
      {"yes", {"yes"}}, {"no", {"no"}}, {"maybe", {"maybe"}}};
  UtilityScore score;
  score.backend = backend.backend_id();
  std::vector<std::string> gold;
  for (std::size_t i = 0; i < items.size(); ++i) {
    gold.push_back(items[i].label);
    GenerationRequest req;
    req.prompt = utility_prompt(items[i]);
    req.max_tokens = 1;
    req.temperature = 0.0;
    req.top_logprobs = 20;
    const GenerationResult res = backend.generate(req);
    std::string prediction;
    try {
      if (res.has_logprobs) {
        prediction = closed_answer_label(res.first_token_alternatives, kLabels);
      } else {
        const std::string first = normalize_choice_token(Tokenizer::split(res.text).empty()
                                                             ? std::string()
                                                             : Tokenizer::split(res.text).front());
        for (const auto& [label, set] : kLabels) {
          if (set.count(first)) prediction = label;
        }
        if (prediction.empty()) throw Error(Errc::kNoChoiceTokenFound, "answer is not yes, no or maybe");
      }
    } catch (const Error& e) {
      if (e.code() != Errc::kNoChoiceTokenFound) throw;
      score.flagged.push_back(i);
    }
    score.predictions.push_back(prediction);
  }
  score.accuracy = accuracy(score.predictions, gold);
  return score;
}

std::vector<UtilityScore> run_utility(const RunConfig& config, const std::filesystem::path& dataset_path) {
  const std::vector<UtilityItem> items = load_utility_items(dataset_path);
  BackendPool pool(config);
  std::vector<UtilityScore> scores{score_utility(items, pool.role("target"))};
  if (pool.has("comparison")) scores.push_back(score_utility(items, pool.role("comparison")));
  json out = json::array();
  for (const auto& s : scores) {
    json flagged = json::array();
    for (std::size_t i : s.flagged) flagged.push_back(i);
    out.push_back({{"backend", s.backend},
                   {"accuracy", s.accuracy},
                   {"n", items.size()},
                   {"flagged", flagged},
                   {"predictions", s.predictions}});
  }
  json doc{{"scores", out}};
  if (scores.size() == 2) doc["delta"] = scores[1].accuracy - scores[0].accuracy;
  write_file(config.out_dir / "utility.json", doc.dump(2) + "\n");
  return scores;
}

}  // namespace fairalign
