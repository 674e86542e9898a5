#include <cstdlib>
#include <set>

#include <gtest/gtest.h>

#include "fairalign/pipeline.hpp"
#include "test_util.hpp"

namespace fairalign {
namespace {

using testing::data_dir;
using testing::slurp;
using testing::TempDir;

RunConfig config_from(const std::string& name, const TempDir& tmp) {
  RunConfig cfg = RunConfig::load(data_dir() / "configs" / name);
  cfg.out_dir = tmp / "out";
  return cfg;
}

std::vector<VignetteTemplate> templates() { return load_templates(data_dir() / "templates.jsonl"); }

TEST(RunConfig, LoadResolvesRelativeFiles) {
  const RunConfig cfg = RunConfig::load(data_dir() / "configs" / "evaluate_biased.json");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.samples, 20u);
  EXPECT_EQ(cfg.attributes.races.size(), 4u);
  ASSERT_TRUE(cfg.backends.count("target"));
  EXPECT_NO_THROW(cfg.validate());
}

TEST(RunConfig, JsonRoundTrip) {
  const RunConfig a = RunConfig::load(data_dir() / "configs" / "prefs.json");
  const RunConfig b = RunConfig::from_json(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_DOUBLE_EQ(b.simpo.learning_rate, 0.1);
}

TEST(RunConfig, ValidateRejects) {
  RunConfig cfg = RunConfig::load(data_dir() / "configs" / "evaluate_unbiased.json");
  auto bad = [&](auto mutate) {
    RunConfig c = cfg;
    mutate(c);
    EXPECT_ERRC(c.validate(), Errc::kInvalidArgument);
  };
  bad([](RunConfig& c) { c.backends.clear(); });
  bad([](RunConfig& c) { c.rotations = 1; });
  bad([](RunConfig& c) { c.samples = 0; });
  bad([](RunConfig& c) { c.alpha = 1.0; });
  bad([](RunConfig& c) { c.max_failure_rate = 1.5; });
  bad([](RunConfig& c) { c.threads = 0; });
  bad([](RunConfig& c) { c.strategies.clear(); });
  bad([](RunConfig& c) { c.simpo.beta = 0.0; });
}

TEST(RunConfig, MalformedFile) {
  TempDir tmp;
  write_file(tmp / "bad.json", "{ not json");
  EXPECT_ERRC(RunConfig::load(tmp / "bad.json"), Errc::kParseError);
}

TEST(Evaluate, UnbiasedMockIsInvariant) {
  TempDir tmp;
  const RunConfig cfg = config_from("evaluate_unbiased.json", tmp);
  BackendPool pool(cfg);
  const EvaluateResult r = evaluate(cfg, templates(), pool.role("target"));
  EXPECT_EQ(r.failed, 0u);
  ASSERT_FALSE(r.report.binary.empty());
  for (const auto& task : r.report.binary) {
    for (const auto& q : task.questions) EXPECT_EQ(q.max_diff.value, 0.0) << q.question_id;
    if (task.welch) EXPECT_EQ(task.welch->p_value, 1.0);
  }
  ASSERT_FALSE(r.report.likert.empty());
  for (const auto& task : r.report.likert) {
    ASSERT_TRUE(task.chi_squared);
    EXPECT_EQ(task.chi_squared->p_value, 1.0);
  }
  // Likert templates have no exemplar.
  EXPECT_FALSE(r.skipped.empty());
}

TEST(Evaluate, BiasedMockShowsInjectedGap) {
  TempDir tmp;
  const RunConfig cfg = config_from("evaluate_biased.json", tmp);
  BackendPool pool(cfg);
  const EvaluateResult r = evaluate(cfg, templates(), pool.role("target"));
  bool seen = false;
  for (const auto& task : r.report.binary) {
    for (const auto& q : task.questions) {
      if (q.question_id == "qpain-cnc-d") {
        seen = true;
        EXPECT_EQ(q.max_diff.value, 0.25);
        EXPECT_EQ(q.group_values.at("Black woman"), 0.75);
        EXPECT_EQ(q.group_values.at("White man"), 0.5);
      } else {
        EXPECT_EQ(q.max_diff.value, 0.0) << q.question_id;
      }
    }
  }
  EXPECT_TRUE(seen);
}

TEST(Evaluate, IndependentOfThreadCount) {
  TempDir tmp;
  RunConfig cfg = config_from("evaluate_biased.json", tmp);
  BackendPool pool(cfg);
  cfg.threads = 1;
  const auto a = records_to_jsonl(evaluate(cfg, templates(), pool.role("target")).records);
  cfg.threads = 8;
  const auto b = records_to_jsonl(evaluate(cfg, templates(), pool.role("target")).records);
  EXPECT_EQ(a, b);
}

TEST(Evaluate, AllItemsFailingWithOneCodeRethrowsIt) {
  TempDir tmp;
  RunConfig cfg = config_from("evaluate_unbiased.json", tmp);
  cfg.backends["target"].mock = nlohmann::json{{"id", "empty"}, {"rules", nlohmann::json::array()}};
  BackendPool pool(cfg);
  EXPECT_ERRC(evaluate(cfg, templates(), pool.role("target")), Errc::kUnknownQuestionId);
}

TEST(Evaluate, FailuresBelowThresholdAreRecorded) {
  TempDir tmp;
  RunConfig cfg = config_from("evaluate_unbiased.json", tmp);
  auto spec = cfg.backends["target"].mock;
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& rule : spec["rules"]) {
    if (rule["id"] != "qpain-postop-f") rules.push_back(rule);
  }
  spec["rules"] = rules;
  cfg.backends["target"].mock = spec;
  BackendPool pool(cfg);
  EXPECT_ERRC(evaluate(cfg, templates(), pool.role("target")), Errc::kRunFailed);
  cfg.max_failure_rate = 0.5;
  const EvaluateResult r = evaluate(cfg, templates(), pool.role("target"));
  EXPECT_EQ(r.failed, 24u);
  std::size_t errors = 0;
  for (const auto& rec : r.records) errors += !rec.error.empty();
  EXPECT_EQ(errors, 24u);
}

TEST(Evaluate, LogprobModeRequiresLogprobs) {
  TempDir tmp;
  RunConfig cfg = config_from("evaluate_sampling.json", tmp);
  cfg.binary_mode = BinaryMode::kLogprob;
  cfg.max_failure_rate = 1.0;
  BackendPool pool(cfg);
  const EvaluateResult r = evaluate(cfg, templates(), pool.role("target"));
  EXPECT_GT(r.failed, 0u);
}

TEST(Records, JsonlRoundTrip) {
  TempDir tmp;
  const RunConfig cfg = config_from("evaluate_biased.json", tmp);
  const EvaluateResult r = run_evaluate(cfg, data_dir() / "templates.jsonl");
  const auto loaded = load_records(cfg.out_dir / "results.jsonl");
  ASSERT_EQ(loaded.size(), r.records.size());
  EXPECT_EQ(records_to_jsonl(loaded), slurp(cfg.out_dir / "results.jsonl"));
  EXPECT_EQ(aggregate(loaded).to_json(), r.report.to_json());
  EXPECT_TRUE(std::filesystem::exists(cfg.out_dir / "bias_report.json"));
  EXPECT_TRUE(std::filesystem::exists(cfg.out_dir / "bias_report.csv"));
}

TEST(Records, MalformedLine) {
  EXPECT_ERRC(parse_records("{\"model\": 1}\n"), Errc::kParseError);
}

TEST(Aggregate, IgnoresFailedRecords) {
  TempDir tmp;
  const RunConfig cfg = config_from("evaluate_biased.json", tmp);
  BackendPool pool(cfg);
  auto records = evaluate(cfg, templates(), pool.role("target")).records;
  const auto clean = aggregate(records).to_json();
  RunRecord bad = records.front();
  bad.p_negative.reset();
  bad.error = "Transport: down";
  records.push_back(bad);
  EXPECT_EQ(aggregate(records).to_json(), clean);
}

TEST(Report, WritesTablesAndCharts) {
  TempDir tmp;
  const RunConfig cfg = config_from("evaluate_biased.json", tmp);
  run_evaluate(cfg, data_dir() / "templates.jsonl");
  const ReportFiles files = run_report(cfg.out_dir / "results.jsonl", tmp / "report", true);
  std::set<std::string> names;
  for (const auto& p : files.written) names.insert(p.filename().string());
  for (const char* n : {"summary.csv", "bars.csv", "likert.csv", "pvalues.csv", "bars.svg", "likert.svg"}) {
    EXPECT_TRUE(names.count(n)) << n;
  }
  const std::string svg = slurp(tmp / "report" / "bars.svg");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(bars_csv(files.report).find("binary-pain,zero-shot,0.08333333333333333"), std::string::npos);
}

TEST(Report, EmptyResults) {
  TempDir tmp;
  write_file(tmp / "r.jsonl", "");
  EXPECT_ERRC(run_report(tmp / "r.jsonl", tmp / "report", false), Errc::kEmptyResults);
}

TEST(BuildPrefsAndAlign, EndToEnd) {
  TempDir tmp;
  const RunConfig cfg = config_from("prefs.json", tmp);
  const BuildOutcome out = run_build_prefs(cfg, data_dir() / "queries.jsonl");
  EXPECT_EQ(out.dataset.size(), 50u);
  EXPECT_TRUE(std::filesystem::exists(cfg.out_dir / "prefs.manifest.json"));
  const AlignResult r = run_align(cfg, cfg.out_dir / "prefs.jsonl", std::nullopt);
  EXPECT_GE(r.train.report.held_out_accuracy, 0.9);
  EXPECT_EQ(r.train.report.base_hash_before, r.train.report.base_hash_after);
  EXPECT_TRUE(std::filesystem::exists(r.model_path));
  EXPECT_TRUE(std::filesystem::exists(r.adapter_path));
  const auto report = nlohmann::json::parse(slurp(r.report_path));
  EXPECT_EQ(report.at("epoch_losses").size(), cfg.simpo.epochs);

  // Reusing the saved model reproduces the adapters.
  RunConfig again = cfg;
  again.out_dir = tmp / "again";
  const AlignResult r2 = run_align(again, cfg.out_dir / "prefs.jsonl", r.model_path);
  EXPECT_EQ(slurp(r2.adapter_path), slurp(r.adapter_path));
}

TEST(BuildPrefsAndAlign, EmptyPrefs) {
  TempDir tmp;
  const RunConfig cfg = config_from("prefs.json", tmp);
  write_file(tmp / "p.jsonl", "");
  EXPECT_ERRC(run_align(cfg, tmp / "p.jsonl", std::nullopt), Errc::kEmptyDataset);
}

TEST(Utility, ScoresAndComparison) {
  TempDir tmp;
  const RunConfig cfg = config_from("utility.json", tmp);
  const auto scores = run_utility(cfg, data_dir() / "utility.jsonl");
  ASSERT_EQ(scores.size(), 2u);
  EXPECT_DOUBLE_EQ(scores[0].accuracy, 1.0);
  EXPECT_DOUBLE_EQ(scores[1].accuracy, 5.0 / 6.0);
  const auto doc = nlohmann::json::parse(slurp(cfg.out_dir / "utility.json"));
  EXPECT_DOUBLE_EQ(doc.at("delta").get<double>(), 5.0 / 6.0 - 1.0);
}

TEST(Utility, BadLabel) {
  TempDir tmp;
  write_file(tmp / "u.jsonl", R"({"question": "q", "label": "perhaps"})" "\n");
  EXPECT_ERRC(load_utility_items(tmp / "u.jsonl"), Errc::kDomainError);
}

// CLI exit codes.

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + FAIRALIGN_CLI + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

TEST(Cli, Success) {
  TempDir tmp;
  EXPECT_EQ(run_cli("evaluate --config " + q(data_dir() / "configs/evaluate_biased.json") + " --templates " +
                    q(data_dir() / "templates.jsonl") + " --out " + q(tmp / "ev")),
            0);
  EXPECT_TRUE(std::filesystem::exists(tmp / "ev" / "results.jsonl"));
  EXPECT_EQ(run_cli("report --in " + q(tmp / "ev" / "results.jsonl") + " --out " + q(tmp / "rep") + " --svg"), 0);
  EXPECT_TRUE(std::filesystem::exists(tmp / "rep" / "bars.svg"));
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("evaluate"), 1);
  TempDir tmp;
  EXPECT_EQ(run_cli("evaluate --config " + q(data_dir() / "configs/evaluate_biased.json") + " --templates " +
                    q(data_dir() / "templates.jsonl") + " --rotations 1 --out " + q(tmp / "ev")),
            1);
}

TEST(Cli, BackendError) {
  TempDir tmp;
  const auto cfg = nlohmann::json{{"backends",
                                   {{"target",
                                     {{"kind", "http"},
                                      {"endpoint_url", "http://127.0.0.1:1/v1/chat/completions"},
                                      {"model_name", "m"},
                                      {"max_retries", 0},
                                      {"timeout", 1.0}}}}}};
  write_file(tmp / "cfg.json", cfg.dump());
  EXPECT_EQ(run_cli("evaluate --config " + q(tmp / "cfg.json") + " --templates " + q(data_dir() / "templates.jsonl") +
                    " --out " + q(tmp / "ev")),
            2);
}

TEST(Cli, DataError) {
  TempDir tmp;
  write_file(tmp / "bad.jsonl", "{\"id\": \"x\"}\n");
  EXPECT_EQ(run_cli("evaluate --config " + q(data_dir() / "configs/evaluate_biased.json") + " --templates " +
                    q(tmp / "bad.jsonl") + " --out " + q(tmp / "ev")),
            3);
  write_file(tmp / "empty.jsonl", "");
  EXPECT_EQ(run_cli("report --in " + q(tmp / "empty.jsonl") + " --out " + q(tmp / "rep")), 3);
}

}  // namespace
}  // namespace fairalign
