// Command-line front end: evaluate, report, build-prefs, align, utility.
//
// Exit codes: 0 success, 1 usage error, 2 backend failure, 3 data error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "fairalign/error.hpp"
#include "fairalign/pipeline.hpp"

namespace {

using namespace fairalign;

constexpr int kUsage = 1;
constexpr int kBackend = 2;
constexpr int kData = 3;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string cache_dir;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "RunConfig JSON file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Run seed");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--cache-dir", c.cache_dir, "Response cache directory");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  if (!c.cache_dir.empty()) cfg.cache_dir = c.cache_dir;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual fairness evaluation and preference alignment"};
  app.require_subcommand(1);

  Common common;
  std::string templates, strategy, results, queries, prefs, model, in;
  std::optional<std::size_t> rotations, samples, rank, epochs;
  std::optional<double> beta, gamma, lr;
  bool svg = false, self_teacher = false;

  auto* evaluate = app.add_subcommand("evaluate", "Run counterfactual prompts and write results plus a bias report");
  add_common(evaluate, common);
  evaluate->add_option("--templates", templates, "Vignette templates (JSONL)")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--strategy", strategy, "Restrict to one strategy")
      ->check(CLI::IsMember({"zero-shot", "few-shot", "cot", "chain-of-thought"}));
  evaluate->add_option("--rotations", rotations, "Profiles per question (0 = full cross product)");
  evaluate->add_option("--samples", samples, "Generations per Likert prompt")->check(CLI::PositiveNumber);

  auto* report = app.add_subcommand("report", "Summarize a results file into CSV tables and plots");
  add_common(report, common);
  report->add_option("--in", in, "results.jsonl from evaluate")->required()->check(CLI::ExistingFile);
  report->add_flag("--svg", svg, "Also write SVG charts");

  auto* build = app.add_subcommand("build-prefs", "Build a preference dataset from neutral queries");
  add_common(build, common);
  build->add_option("--queries", queries, "Neutral queries (JSONL)")->required()->check(CLI::ExistingFile);
  build->add_flag("--self-teacher", self_teacher, "Use the target backend as the teacher");

  auto* align = app.add_subcommand("align", "Train LoRA adapters with SimPO on a preference file");
  add_common(align, common);
  align->add_option("--prefs", prefs, "Preference dataset (JSONL)")->required()->check(CLI::ExistingFile);
  align->add_option("--model", model, "Toy model JSON; built from the preference vocabulary when omitted")
      ->check(CLI::ExistingFile);
  align->add_option("--beta", beta, "Reward scale")->check(CLI::PositiveNumber);
  align->add_option("--gamma", gamma, "Target reward margin")->check(CLI::NonNegativeNumber);
  align->add_option("--rank", rank, "LoRA rank")->check(CLI::PositiveNumber);
  align->add_option("--epochs", epochs, "Training epochs");
  align->add_option("--lr", lr, "Learning rate")->check(CLI::NonNegativeNumber);

  auto* utility = app.add_subcommand("utility", "Closed-answer accuracy on a yes/no/maybe dataset");
  add_common(utility, common);
  utility->add_option("--in", in, "Dataset of {question, context, label} (JSONL)")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    RunConfig cfg = resolve(common);
    if (evaluate->parsed()) {
      if (!strategy.empty()) cfg.strategies = {parse_strategy(strategy)};
      if (rotations) cfg.rotations = *rotations;
      if (samples) cfg.samples = *samples;
      try {
        cfg.validate();
      } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
      }
      const EvaluateResult r = run_evaluate(cfg, templates);
      for (const auto& s : r.skipped) std::cerr << "skipped " << s << "\n";
      std::cout << "evaluate: " << r.work_items << " work items, " << r.failed << " failed, " << r.records.size()
                << " records -> " << (cfg.out_dir / "results.jsonl").string() << "\n";
    } else if (report->parsed()) {
      const ReportFiles files = run_report(in, cfg.out_dir, svg, cfg.alpha);
      for (const auto& p : files.written) std::cout << p.string() << "\n";
    } else if (build->parsed()) {
      if (self_teacher) cfg.self_teacher = true;
      try {
        const BuildOutcome out = run_build_prefs(cfg, queries);
        std::cout << "build-prefs: " << out.dataset.size() << " tuples, " << out.dropped.size() << " dropped, "
                  << out.failed.size() << " failed -> " << (cfg.out_dir / "prefs.jsonl").string() << "\n";
      } catch (const BuildFailedError& e) {
        std::cerr << "error: " << e.what() << "\npartial output: " << (cfg.out_dir / "prefs.jsonl.partial").string()
                  << "\n";
        return kBackend;
      }
    } else if (align->parsed()) {
      if (beta) cfg.simpo.beta = *beta;
      if (gamma) cfg.simpo.gamma = *gamma;
      if (rank) cfg.simpo.lora_rank = *rank;
      if (epochs) cfg.simpo.epochs = *epochs;
      if (lr) cfg.simpo.learning_rate = *lr;
      std::optional<std::filesystem::path> model_path;
      if (!model.empty()) model_path = model;
      const AlignResult r = run_align(cfg, prefs, model_path);
      const TrainReport& rep = r.train.report;
      std::cout << "align: held-out accuracy " << rep.held_out_accuracy << " over " << rep.held_out_size
                << " pairs, mean margin " << rep.mean_margin << " -> " << r.adapter_path.string() << "\n";
    } else if (utility->parsed()) {
      for (const auto& s : run_utility(cfg, in)) {
        std::cout << "utility: " << s.backend << " accuracy " << s.accuracy << " (" << s.flagged.size()
                  << " flagged)\n";
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (e.code() == Errc::kInvalidArgument) return kUsage;
    return is_backend_error(e.code()) ? kBackend : kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return 0;
}
