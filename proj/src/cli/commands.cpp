#include "abmll/cli/commands.hpp"

#include <chrono>
#include <filesystem>
#include <optional>

#include <CLI11.hpp>
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "abmll/cli/checkpoint.hpp"
#include "abmll/cli/config.hpp"
#include "abmll/cli/metrics_io.hpp"
#include "abmll/metrics.hpp"
#include "abmll/rng.hpp"

#ifndef ABMLL_VERSION
#define ABMLL_VERSION "dev"
#endif

namespace abmll::cli {

namespace fs = std::filesystem;

namespace {

std::string utc_now() {
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::chrono::system_clock::to_time_t(
                                                  std::chrono::system_clock::now())));
}

void write_manifest(const fs::path& path, const ExperimentConfig& config, const std::string& command,
                    const std::string& method, std::size_t start_epoch, std::size_t end_epoch,
                    const nlohmann::ordered_json& artifacts) {
  nlohmann::ordered_json m;
  m["command"] = command;
  m["version"] = ABMLL_VERSION;
  m["created"] = utc_now();
  m["method"] = method;
  m["suite_seed"] = config.suite.seed;
  m["start_epoch"] = start_epoch;
  m["end_epoch"] = end_epoch;
  m["artifacts"] = artifacts;
  m["config"] = to_text(config);
  write_file(path, m.dump(2) + "\n");
}

struct PretrainArgs {
  std::string config;
  std::string out;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  const ExperimentConfig config = load_config(a.config);
  const auto corpus = tasks::pretraining_corpus(config.pretrain.seed, config.corpus_tasks, config.corpus_examples);
  const fs::path ckpt(a.out);
  const fs::path manifest = ckpt.string() + ".manifest.json";
  write_manifest(manifest, config, "pretrain", "pretrained", 0, 0, {{"checkpoint", ckpt.string()}});
  auto result = lm::pretrain_base(corpus, config.model, config.pretrain);
  write_file(ckpt, encode_base(config, result.weights));
  out << fmt::format("pretrained {} steps on {} tokens: loss {:.4f} -> {:.4f}\n", config.pretrain.steps,
                     corpus.size(), result.initial_loss, result.final_loss);
  return 0;
}

struct MetatrainArgs {
  std::string config;
  std::string method;
  std::string base;
  std::string out;
  std::string resume;
  std::optional<std::size_t> until_epoch;
  std::optional<std::size_t> jobs;
};

int cmd_metatrain(const MetatrainArgs& a, std::ostream& out) {
  ExperimentConfig config = load_config(a.config);
  config.train.method = metatrain::parse_method(a.method);
  if (a.jobs) config.train.jobs = *a.jobs;
  config.train.validate();

  std::optional<metatrain::RunState> state;
  lm::BaseWeights base;
  std::size_t start_epoch = 0;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    if (ck.kind != CheckpointKind::kRun) throw ConfigError(a.resume + " is not a training checkpoint");
    if (ck.state->method != config.train.method) {
      throw ConfigError(fmt::format("checkpoint {} was trained with {}, --method is {}", a.resume,
                                    metatrain::method_name(ck.state->method), a.method));
    }
    if (!(ck.config.model == config.model)) throw ConfigError("checkpoint model differs from the config");
    base = std::move(ck.base);
    state = std::move(ck.state);
    start_epoch = state->epoch;
  } else {
    if (a.base.empty()) throw UsageError("--base is required unless --resume is given");
    Checkpoint ck = load_checkpoint(a.base);
    if (!(ck.config.model == config.model)) throw ConfigError("base checkpoint model differs from the config");
    base = std::move(ck.base);
    state = metatrain::init_state(base, config.train);
  }

  const fs::path dir(a.out);
  fs::create_directories(dir / "checkpoints");
  const auto data = tasks::generate_suite(config.suite);
  metatrain::TrainConfig run_cfg = config.train;
  if (a.until_epoch) run_cfg.epochs = std::min(run_cfg.epochs, *a.until_epoch);

  const fs::path manifest =
      start_epoch == 0 ? dir / "manifest.json" : dir / fmt::format("manifest.resume-{:04}.json", start_epoch);
  write_manifest(manifest, config, "metatrain", a.method, start_epoch, run_cfg.epochs,
                 {{"metrics", (dir / "metrics.tsv").string()},
                  {"checkpoint", (dir / "checkpoint.ckpt").string()},
                  {"checkpoints", (dir / "checkpoints").string()},
                  {"base", a.base},
                  {"resume", a.resume}});
  write_file(dir / "metrics.tsv", metrics_table(state->history));

  metatrain::train(*state, base, data, run_cfg, [&](const metatrain::RunState& s) {
    const std::string bytes = encode_run(config, base, s);
    write_file(dir / "checkpoints" / fmt::format("epoch_{:04}.ckpt", s.epoch), bytes);
    write_file(dir / "checkpoint.ckpt", bytes);
    write_file(dir / "metrics.tsv", metrics_table(s.history));
    const auto& m = s.history.back();
    out << fmt::format("{} epoch {}: accuracy {:.4f} ece {:.4f} train_nll {:.4f}\n",
                       metatrain::method_name(m.method), m.epoch, m.accuracy, m.ece, m.train_nll);
  });
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string config;
  std::optional<std::uint64_t> suite_seed;
  std::vector<std::string> datasets;
  std::size_t adapt_steps = 10;
  std::size_t jobs = 1;
  std::optional<std::size_t> predict_samples;
  std::string out;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  if (!a.config.empty()) {
    // Evaluation settings and the suite come from the given config; the
    // model must be the one the checkpoint holds.
    ExperimentConfig given = load_config(a.config);
    if (!(given.model == ck.config.model)) throw ConfigError("checkpoint model differs from the config");
    if (ck.kind == CheckpointKind::kRun) given.train.method = ck.state->method;
    ck.config = std::move(given);
  }
  metatrain::TrainConfig cfg = ck.config.train;
  cfg.jobs = a.jobs;
  if (a.predict_samples) cfg.predict_samples = *a.predict_samples;
  cfg.validate();

  std::optional<lora::Posture> fresh;
  std::string method = "pretrained";
  if (ck.kind == CheckpointKind::kRun) {
    method = metatrain::method_name(ck.state->method);
  } else {
    fresh.emplace(metatrain::init_posture(ck.base, metatrain::Method::kRegularLora, cfg,
                                          derive_seed(cfg.seed, {0x1u})));
  }
  const lora::Posture& global = fresh ? *fresh : ck.state->global;

  std::vector<tasks::Task> task_list;
  if (!a.datasets.empty()) {
    const tasks::Vocabulary vocab;
    for (const auto& path : a.datasets) task_list.push_back(tasks::load_records(path, vocab));
  } else {
    tasks::SuiteConfig suite = ck.config.suite;
    if (a.suite_seed) suite.seed = *a.suite_seed;
    task_list = tasks::generate_suite(suite).unseen_tasks;
  }
  const auto eval = metrics::evaluate_tasks(ck.base, global, task_list, cfg, a.adapt_steps);

  const fs::path dir(a.out);
  write_file(dir / "evaluation.tsv", evaluation_table(eval, method));
  write_file(dir / "calibration.tsv", eval.table.to_text());
  write_file(dir / "predictions.tsv", predictions_table(eval));
  out << fmt::format("{}: accuracy {:.4f} ece {:.4f} over {} examples\n", method, eval.accuracy, eval.ece,
                     eval.records.size());
  return 0;
}

struct ReportArgs {
  std::vector<std::string> files;
  std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  std::vector<std::vector<metatrain::EpochMetrics>> runs;
  for (const auto& f : a.files) runs.push_back(parse_metrics(read_file(f), f));
  const Report report = make_report(runs);
  const std::string summary = summary_table(report);
  const std::string curves = curves_table(report);
  if (!a.out.empty()) {
    write_file(fs::path(a.out) / "summary.tsv", summary);
    write_file(fs::path(a.out) / "curves.tsv", curves);
  }
  out << summary;
  return 0;
}

struct GenerateArgs {
  std::string config;
  std::string out;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  const ExperimentConfig config = load_config(a.config);
  const auto data = tasks::generate_suite(config.suite);
  fs::create_directories(a.out);
  for (const auto* list : {&data.seen_tasks, &data.unseen_tasks}) {
    for (const auto& t : *list) tasks::save_records(t, fs::path(a.out) / (t.id + ".jsonl"), data.vocab);
  }
  out << fmt::format("wrote {} seen and {} unseen tasks to {}\n", data.seen_tasks.size(),
                     data.unseen_tasks.size(), a.out);
  return 0;
}

}  // namespace

int exit_code(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::kUsage: return 2;
    case ErrorCategory::kData: return 3;
    case ErrorCategory::kIntegrity: return 4;
    case ErrorCategory::kInternal: return 1;
  }
  return 1;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Amortized Bayesian meta-learning of LoRA adapters on a tiny transformer", "abmll"};
  app.require_subcommand(1);

  PretrainArgs pre;
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the base model and write its checkpoint");
  pretrain->add_option("--config", pre.config, "Experiment config file")->required();
  pretrain->add_option("--out", pre.out, "Base checkpoint path")->required();

  MetatrainArgs mt;
  auto* metatrain = app.add_subcommand("metatrain", "Meta-train adapters with one method");
  metatrain->add_option("--config", mt.config, "Experiment config file")->required();
  metatrain->add_option("--method", mt.method, "abmll | regular_lora | structured_lora | reptile")->required();
  metatrain->add_option("--base", mt.base, "Base checkpoint from `pretrain`");
  metatrain->add_option("--out", mt.out, "Run directory")->required();
  metatrain->add_option("--resume", mt.resume, "Continue from a training checkpoint");
  metatrain->add_option("--until-epoch", mt.until_epoch, "Stop after this reported epoch");
  metatrain->add_option("--jobs", mt.jobs, "Evaluation threads");

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Adapt to unseen tasks and report accuracy and ECE");
  evaluate->add_option("--checkpoint", ev.checkpoint, "Base or training checkpoint")->required();
  evaluate->add_option("--config", ev.config, "Take evaluation settings and the suite from this config");
  auto* seed_opt = evaluate->add_option("--suite-seed", ev.suite_seed, "Generate the unseen tasks with this seed");
  evaluate->add_option("--dataset", ev.datasets, "JSONL task files")->excludes(seed_opt);
  evaluate->add_option("--adapt-steps", ev.adapt_steps, "Adaptation steps per task")->capture_default_str();
  evaluate->add_option("--jobs", ev.jobs, "Prediction threads")->capture_default_str()->check(CLI::PositiveNumber);
  evaluate->add_option("--predict-samples", ev.predict_samples, "Average predictions over weight samples");
  evaluate->add_option("--out", ev.out, "Output directory")->required();

  ReportArgs rep;
  auto* report = app.add_subcommand("report", "Summarize metrics files across seeds and methods");
  report->add_option("files", rep.files, "metrics.tsv files")->required();
  report->add_option("--out", rep.out, "Write summary.tsv and curves.tsv here");

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Export the task suite as JSONL files");
  generate->add_option("--config", gen.config, "Experiment config file")->required();
  generate->add_option("--out", gen.out, "Output directory")->required();

  auto* defaults = app.add_subcommand("defaults", "Print the default config file");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(pre, out);
    if (metatrain->parsed()) return cmd_metatrain(mt, out);
    if (evaluate->parsed()) return cmd_evaluate(ev, out);
    if (report->parsed()) return cmd_report(rep, out);
    if (generate->parsed()) return cmd_generate(gen, out);
    if (defaults->parsed()) {
      out << to_text(ExperimentConfig{});
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace abmll::cli
