#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairalign/bias_metrics.hpp"
#include "fairalign/gateway.hpp"
#include "fairalign/preference.hpp"
#include "fairalign/simpo.hpp"
#include "fairalign/toy_lm.hpp"
#include "fairalign/vignette.hpp"

namespace fairalign {

enum class BinaryMode { kAuto, kLogprob, kSampling };

struct RunConfig {
  std::uint64_t seed = 0;
  // Roles: "target" is required; "teacher", "embedder" and "comparison" are
  // optional and fall back to the target.
  std::map<std::string, BackendConfig> backends;
  CuratedAttributes attributes = CuratedAttributes::defaults();
  std::vector<PromptStrategy> strategies{PromptStrategy::kZeroShot, PromptStrategy::kFewShot,
                                         PromptStrategy::kChainOfThought};
  // 0 covers the full race x gender cross product; otherwise a seeded sample.
  std::size_t rotations = 0;
  // Generations per Likert prompt.
  std::size_t samples = 20;
  double alpha = stats::kDefaultAlpha;
  BinaryMode binary_mode = BinaryMode::kAuto;
  // Generations per binary prompt on the sampling path.
  std::size_t binary_samples = 500;
  double sampling_temperature = 1.0;
  std::filesystem::path out_dir = "out";
  std::optional<std::filesystem::path> cache_dir;
  bool offline = false;
  bool self_teacher = false;
  ModifierMode modifier_mode = ModifierMode::kTeacherRewrite;
  double candidate_temperature = 0.7;
  double max_failure_rate = 0.1;
  int threads = 4;
  SimPOConfig simpo;
  ToyConfig model;

  /// Throws InvalidArgument.
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Gateways for the configured roles, sharing the cache directory.
class BackendPool {
 public:
  explicit BackendPool(const RunConfig& config);
  Gateway& role(const std::string& name);
  bool has(const std::string& name) const { return gateways_.count(name) > 0; }

 private:
  std::map<std::string, std::unique_ptr<Gateway>> gateways_;
};

/// One generation (or one boolean field of it) and what was read from it.
struct RunRecord {
  std::string model;
  std::string task;
  std::string template_id;
  std::string question_id;
  PromptStrategy strategy = PromptStrategy::kZeroShot;
  std::string race;
  std::string gender;
  std::string path;  // "logprob", "sampling" or "likert"
  std::size_t sample = 0;
  std::optional<double> p_negative;
  std::optional<bool> negative;
  std::optional<int> rating;
  std::vector<std::string> cache_keys;
  std::string created_at;
  std::string error;

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
};

std::vector<RunRecord> parse_records(std::string_view jsonl, std::string_view source = "<input>");
std::vector<RunRecord> load_records(const std::filesystem::path& path);
std::string records_to_jsonl(const std::vector<RunRecord>& records);

/// Pure reduction of records into the bias report. Failed records are ignored;
/// Likert records without a rating count as exclusions.
BiasReport aggregate(const std::vector<RunRecord>& records, double alpha = stats::kDefaultAlpha);

struct EvaluateResult {
  std::vector<RunRecord> records;
  BiasReport report;
  std::vector<std::string> skipped;  // "template|strategy: reason"
  std::size_t work_items = 0;
  std::size_t failed = 0;
};

/// Runs every (template, profile, strategy) on the target. Per-item failures
/// are recorded; above max_failure_rate the run fails.
EvaluateResult evaluate(const RunConfig& config, const std::vector<VignetteTemplate>& templates, Gateway& target);

/// evaluate() plus results.jsonl, bias_report.json and bias_report.csv in out_dir.
EvaluateResult run_evaluate(const RunConfig& config, const std::filesystem::path& templates_path);

struct ReportFiles {
  std::vector<std::filesystem::path> written;
  BiasReport report;
};

/// summary.csv, bars.csv, likert.csv and pvalues.csv (plus bars.svg and
/// likert.svg with `svg`). Throws EmptyResults.
ReportFiles run_report(const std::filesystem::path& results_path, const std::filesystem::path& out_dir, bool svg,
                       double alpha = stats::kDefaultAlpha);

std::string bars_csv(const BiasReport& report);
std::string likert_csv(const BiasReport& report);
std::string pvalues_csv(const BiasReport& report);
std::string bars_svg(const BiasReport& report);
std::string likert_svg(const BiasReport& report);

/// prefs.jsonl and prefs.manifest.json in out_dir. On failure the partial
/// dataset is kept as prefs.jsonl.partial.
BuildOutcome run_build_prefs(const RunConfig& config, const std::filesystem::path& queries_path);

struct AlignResult {
  TrainResult train;
  std::filesystem::path model_path;
  std::filesystem::path adapter_path;
  std::filesystem::path report_path;
};

/// Trains adapters on a preference file. Without a model file a fresh toy
/// model is built over the preference vocabulary and saved next to the
/// adapters.
AlignResult run_align(const RunConfig& config, const std::filesystem::path& prefs_path,
                      const std::optional<std::filesystem::path>& model_path);

struct UtilityItem {
  std::string question;
  std::string context;
  std::string label;
};

std::vector<UtilityItem> load_utility_items(const std::filesystem::path& path);
std::string utility_prompt(const UtilityItem& item);

struct UtilityScore {
  std::string backend;
  double accuracy = 0.0;
  std::vector<std::string> predictions;
  std::vector<std::size_t> flagged;  // items with no yes/no/maybe token
};

/// Closed-answer accuracy over yes/no/maybe. Throws EmptyInput.
UtilityScore score_utility(const std::vector<UtilityItem>& items, Gateway& backend);

/// utility.json in out_dir; compares against the "comparison" role when set.
std::vector<UtilityScore> run_utility(const RunConfig& config, const std::filesystem::path& dataset_path);

void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace fairalign
