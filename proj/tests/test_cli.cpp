#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "abmll/cli/checkpoint.hpp"
#include "abmll/cli/commands.hpp"
#include "abmll/cli/config.hpp"
#include "abmll/cli/metrics_io.hpp"
#include "abmll/errors.hpp"

using namespace abmll;
using namespace abmll::cli;
namespace fs = std::filesystem;

namespace {

fs::path work_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "abmll_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "abmll");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.d_ff = 32;
  c.model.d_rank = 2;
  c.pretrain.steps = 3;
  c.pretrain.window = 16;
  c.corpus_tasks = 4;
  c.corpus_examples = 8;
  c.suite.n_seen = 2;
  c.suite.examples_per_task = 40;
  c.train.beta = 1e-4;
  c.train.c = 1e-2;
  c.train.inner_lr = 1e-3;
  c.train.outer_lr = 1e-3;
  c.train.lr_scale = 1.0;
  c.train.inner_steps = 2;
  c.train.epochs = 3;
  c.train.adapt_steps = 2;
  c.train.grad_clip = 1.0;
  return c;
}

fs::path write_config(const fs::path& dir, const ExperimentConfig& c) {
  auto p = dir / "exp.cfg";
  write_file(p, to_text(c));
  return p;
}

metatrain::EpochMetrics row(std::size_t epoch, metatrain::Method m, std::uint64_t seed, double acc, double ece) {
  metatrain::EpochMetrics r;
  r.epoch = epoch;
  r.method = m;
  r.seed = seed;
  r.accuracy = acc;
  r.ece = ece;
  r.train_nll = 1.5;
  r.kl_task = 0.25;
  r.neg_log_prior = -3.0;
  r.objective = 1.0;
  return r;
}

}  // namespace

TEST(Config, RoundTripAndDefaults) {
  ExperimentConfig c = tiny_config();
  c.train.prior_spread = dist::PriorSpread::kVariance;
  c.suite.unseen_families = {tasks::RuleFamily::kMajority};
  const std::string text = to_text(c);
  ExperimentConfig back = parse_config(text);
  EXPECT_EQ(to_text(back), text);
  EXPECT_EQ(back.train.c, c.train.c);

  // Comments, blank lines and omitted keys.
  ExperimentConfig partial = parse_config("# note\n\n  train.epochs = 7  \n");
  EXPECT_EQ(partial.train.epochs, 7u);
  EXPECT_EQ(to_text(parse_config("")), to_text(ExperimentConfig{}));
  // Published c survives the text round trip exactly.
  EXPECT_EQ(parse_config(to_text(ExperimentConfig{})).train.c, std::exp(-20.0));
}

TEST(Config, ErrorsNameTheLine) {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("train.epochs = 2\ntrain.bogus = 1\n").find("line 2"), std::string::npos);
  EXPECT_NE(message("train.epochs = 2\ntrain.epochs = 3\n").find("duplicate"), std::string::npos);
  EXPECT_NE(message("train.epochs 2\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("train.beta = abc\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("train.epochs = -1\n").find("line 1"), std::string::npos);
  EXPECT_NE(message("train.prior_spread = wide\n").find("line 1"), std::string::npos);
  EXPECT_THROW(load_config("/nonexistent/exp.cfg"), UsageError);
}

TEST(Container, RoundTripAndKnownChecksum) {
  std::vector<Section> sections{{"1234", "56789"}, {"empty", ""}, {"bin", std::string("\0\xff\x01", 3)}};
  const std::string bytes = encode_container(sections);
  EXPECT_EQ(bytes.substr(0, 6), "ABMLL1");
  auto back = decode_container(bytes);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].name, sections[i].name);
    EXPECT_EQ(back[i].payload, sections[i].payload);
  }
  // CRC-32 of "123456789" is 0xCBF43926, stored little endian after the first payload.
  const std::size_t crc_at = 6 + 4 + 4 + 4 + 4 + 8 + 5;
  EXPECT_EQ(bytes.substr(crc_at, 4), std::string("\x26\x39\xf4\xcb", 4));
}

TEST(Container, CorruptionIsAnIntegrityError) {
  const std::string bytes = encode_container({{"weights", std::string(64, 'x')}});
  for (std::size_t cut : {0u, 5u, 10u, 20u, 40u}) {
    EXPECT_THROW(decode_container(bytes.substr(0, cut)), IntegrityError) << cut;
  }
  EXPECT_THROW(decode_container(bytes.substr(0, bytes.size() - 1)), IntegrityError);
  std::string flipped = bytes;
  flipped[40] ^= 0x01;
  EXPECT_THROW(decode_container(flipped), IntegrityError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_container(magic), IntegrityError);
  std::string version = bytes;
  version[6] = 9;
  EXPECT_THROW(decode_container(version), IntegrityError);
  EXPECT_THROW(decode_container(bytes + "trailing"), IntegrityError);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto config = tiny_config();
  auto base = lm::BaseWeights::init(config.model, 3);
  const std::string first = encode_base(config, base);
  Checkpoint ck = decode_checkpoint(first);
  EXPECT_EQ(ck.kind, CheckpointKind::kBase);
  EXPECT_EQ(encode_base(ck.config, ck.base), first);

  auto cfg = config.train;
  cfg.method = metatrain::Method::kAbmll;
  auto state = metatrain::init_state(base, cfg);
  state.history.push_back(row(1, cfg.method, 0, 0.5, 0.1));
  const std::string run = encode_run(config, base, state);
  Checkpoint rc = decode_checkpoint(run);
  ASSERT_EQ(rc.kind, CheckpointKind::kRun);
  EXPECT_EQ(rc.state->history, state.history);
  EXPECT_EQ(encode_run(rc.config, rc.base, *rc.state), run);
}

TEST(MetricsIo, RoundTripAndFormatErrors) {
  std::vector<metatrain::EpochMetrics> rows{row(1, metatrain::Method::kReptile, 2, 0.125, 0.3),
                                            row(2, metatrain::Method::kReptile, 2, 1.0 / 3.0, 0.1)};
  rows[1].objective = 1e-300;
  const std::string text = metrics_table(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), kMetricsHeader);
  EXPECT_EQ(parse_metrics(text, "m.tsv"), rows);
  EXPECT_EQ(metrics_table(parse_metrics(text, "m.tsv")), text);

  try {
    parse_metrics("epoch\tmethod\n", "bad.tsv");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.tsv"), std::string::npos);
  }
  EXPECT_THROW(parse_metrics(std::string(kMetricsHeader) + "\n1\tabmll\t0\tx\t0\t0\t0\t0\t0\n", "m"), FormatError);
  EXPECT_THROW(parse_metrics(std::string(kMetricsHeader) + "\n1\tabmll\t0\n", "m"), FormatError);
  EXPECT_THROW(parse_metrics(std::string(kMetricsHeader) + "\n1\tnope\t0\t0\t0\t0\t0\t0\t0\n", "m"), FormatError);
}

TEST(Report, MeanAndStandardErrorByHand) {
  auto [m, se] = mean_stderr({0.5, 0.6, 0.7});
  EXPECT_NEAR(m, 0.6, 1e-15);
  ASSERT_TRUE(se.has_value());
  // Sample deviation 0.1 over sqrt(3).
  EXPECT_NEAR(*se, 0.1 / std::sqrt(3.0), 1e-15);
  auto [one, none] = mean_stderr({0.42});
  EXPECT_EQ(one, 0.42);
  EXPECT_FALSE(none.has_value());
  EXPECT_THROW(mean_stderr({}), ContractError);
}

TEST(Report, SingleRunHasEmptyStderrColumn) {
  using metatrain::Method;
  Report r = make_report({{row(1, Method::kAbmll, 0, 0.5, 0.2), row(2, Method::kAbmll, 0, 0.75, 0.1)}});
  ASSERT_EQ(r.summary.size(), 1u);
  EXPECT_EQ(r.summary[0].best_epoch, 2u);
  EXPECT_FALSE(r.summary[0].accuracy_stderr.has_value());
  const std::string table = summary_table(r);
  const std::string line = table.substr(table.find('\n') + 1);
  EXPECT_NE(line.find("\t\t"), std::string::npos) << line;
}

TEST(Report, MixedMethodsOneRowEachWithBestEpoch) {
  using metatrain::Method;
  std::vector<std::vector<metatrain::EpochMetrics>> runs;
  const double acc[3][2] = {{0.5, 0.4}, {0.7, 0.5}, {0.6, 0.9}};
  for (std::uint64_t s = 0; s < 3; ++s) {
    runs.push_back({row(1, Method::kAbmll, s, acc[s][0], 0.1 * (s + 1)), row(2, Method::kAbmll, s, acc[s][1], 0.2)});
  }
  runs.push_back({row(1, Method::kReptile, 0, 0.3, 0.4), row(2, Method::kReptile, 0, 0.3, 0.5)});
  Report r = make_report(runs);
  ASSERT_EQ(r.summary.size(), 2u);
  EXPECT_EQ(r.summary[0].method, "abmll");
  EXPECT_EQ(r.summary[0].runs, 3u);
  // Epoch means: 0.6 and 0.6; the earliest wins the tie.
  EXPECT_EQ(r.summary[0].best_epoch, 1u);
  EXPECT_NEAR(r.summary[0].accuracy_mean, 0.6, 1e-15);
  EXPECT_NEAR(*r.summary[0].accuracy_stderr, 0.1 / std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(r.summary[0].ece_mean, 0.2, 1e-15);
  EXPECT_NEAR(*r.summary[0].ece_stderr, 0.1 / std::sqrt(3.0), 1e-15);
  EXPECT_EQ(r.summary[1].method, "reptile");
  EXPECT_EQ(r.summary[1].best_epoch, 1u);
  EXPECT_EQ(r.curves.size(), 4u);
  EXPECT_THROW(make_report({}), UsageError);
}

TEST(Cli, MissingConfigIsAUsageErrorNamingThePath) {
  auto dir = work_dir("missing");
  auto r = run({"pretrain", "--config", (dir / "nope.cfg").string(), "--out", (dir / "b.ckpt").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nope.cfg"), std::string::npos) << r.err;
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"frobnicate"}).code, 2);
  EXPECT_EQ(run({"pretrain", "--config", "x"}).code, 2);
  auto d = run({"defaults"});
  EXPECT_EQ(d.code, 0);
  EXPECT_EQ(d.out, to_text(ExperimentConfig{}));
}

TEST(Cli, PretrainZeroStepsAndDeterminism) {
  auto dir = work_dir("pretrain");
  auto config = tiny_config();
  config.pretrain.steps = 0;
  auto cfg = write_config(dir, config);
  ASSERT_EQ(run({"pretrain", "--config", cfg.string(), "--out", (dir / "zero.ckpt").string()}).code, 0);
  Checkpoint ck = load_checkpoint(dir / "zero.ckpt");
  auto init = lm::BaseWeights::init(config.model, config.pretrain.seed);
  EXPECT_EQ(encode_base(config, init), slurp(dir / "zero.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "zero.ckpt.manifest.json"));

  config.pretrain.steps = 3;
  cfg = write_config(dir, config);
  ASSERT_EQ(run({"pretrain", "--config", cfg.string(), "--out", (dir / "a.ckpt").string()}).code, 0);
  ASSERT_EQ(run({"pretrain", "--config", cfg.string(), "--out", (dir / "b.ckpt").string()}).code, 0);
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_NE(slurp(dir / "a.ckpt"), slurp(dir / "zero.ckpt"));
}

TEST(Cli, MetatrainUnknownMethodListsValidNames) {
  auto dir = work_dir("method");
  auto cfg = write_config(dir, tiny_config());
  auto r = run({"metatrain", "--config", cfg.string(), "--method", "maml", "--base", "x", "--out",
                (dir / "run").string()});
  EXPECT_EQ(r.code, 2);
  for (const auto& name : metatrain::method_names()) EXPECT_NE(r.err.find(name), std::string::npos) << r.err;
}

TEST(Cli, MetatrainResumeAndEvaluate) {
  auto dir = work_dir("train");
  auto cfg = write_config(dir, tiny_config()).string();
  const std::string base = (dir / "base.ckpt").string();
  ASSERT_EQ(run({"pretrain", "--config", cfg, "--out", base}).code, 0);

  for (const std::string method : {"abmll", "regular_lora"}) {
    const auto full = dir / (method + "_full");
    const auto part = dir / (method + "_part");
    ASSERT_EQ(run({"metatrain", "--config", cfg, "--method", method, "--base", base, "--out", full.string()}).code, 0);
    auto rows = parse_metrics(slurp(full / "metrics.tsv"), "metrics");
    ASSERT_EQ(rows.size(), 3u);
    for (std::size_t e = 0; e < rows.size(); ++e) EXPECT_EQ(rows[e].epoch, e + 1);

    ASSERT_EQ(run({"metatrain", "--config", cfg, "--method", method, "--base", base, "--out", part.string(),
                   "--until-epoch", "1"})
                  .code,
              0);
    EXPECT_EQ(parse_metrics(slurp(part / "metrics.tsv"), "metrics").size(), 1u);
    ASSERT_EQ(run({"metatrain", "--config", cfg, "--method", method, "--out", part.string(), "--resume",
                   (part / "checkpoints" / "epoch_0001.ckpt").string()})
                  .code,
              0);
    EXPECT_EQ(slurp(part / "metrics.tsv"), slurp(full / "metrics.tsv")) << method;
    EXPECT_EQ(slurp(part / "checkpoint.ckpt"), slurp(full / "checkpoint.ckpt")) << method;
  }

  // Resuming with a different method is refused.
  auto wrong = run({"metatrain", "--config", cfg, "--method", "reptile", "--out", (dir / "w").string(), "--resume",
                    (dir / "abmll_full" / "checkpoint.ckpt").string()});
  EXPECT_EQ(wrong.code, 2);

  // Evaluating twice writes identical files.
  const std::string ckpt = (dir / "abmll_full" / "checkpoint.ckpt").string();
  ASSERT_EQ(run({"evaluate", "--checkpoint", ckpt, "--out", (dir / "e1").string()}).code, 0);
  ASSERT_EQ(run({"evaluate", "--checkpoint", ckpt, "--out", (dir / "e2").string(), "--jobs", "2"}).code, 0);
  for (const char* f : {"evaluation.tsv", "calibration.tsv", "predictions.tsv"}) {
    EXPECT_EQ(slurp(dir / "e1" / f), slurp(dir / "e2" / f)) << f;
  }

  // Zero adaptation steps on the base checkpoint scores the unadapted model on every example.
  ASSERT_EQ(run({"evaluate", "--checkpoint", base, "--adapt-steps", "0", "--out", (dir / "e0").string()}).code, 0);
  const std::string preds = slurp(dir / "e0" / "predictions.tsv");
  EXPECT_EQ(static_cast<std::size_t>(std::count(preds.begin(), preds.end(), '\n')), 1u + 2u * 40u);
  EXPECT_NE(slurp(dir / "e0" / "evaluation.tsv").find("pretrained"), std::string::npos);

  // Report over the three runs.
  auto rep = run({"report", (dir / "abmll_full" / "metrics.tsv").string(),
                  (dir / "regular_lora_full" / "metrics.tsv").string(), "--out", (dir / "rep").string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_TRUE(fs::exists(dir / "rep" / "summary.tsv"));
  EXPECT_EQ(rep.out, slurp(dir / "rep" / "summary.tsv"));
}

TEST(Cli, DataAndIntegrityExitCodes) {
  auto dir = work_dir("codes");
  auto config = tiny_config();
  config.pretrain.steps = 0;
  auto cfg = write_config(dir, config).string();
  const std::string base = (dir / "base.ckpt").string();
  ASSERT_EQ(run({"pretrain", "--config", cfg, "--out", base}).code, 0);

  std::string bytes = slurp(base);
  bytes[bytes.size() / 2] ^= 0x20;
  write_file(dir / "corrupt.ckpt", bytes);
  auto r = run({"evaluate", "--checkpoint", (dir / "corrupt.ckpt").string(), "--out", (dir / "e").string()});
  EXPECT_EQ(r.code, 4) << r.err;
  write_file(dir / "short.ckpt", slurp(base).substr(0, 100));
  EXPECT_EQ(run({"evaluate", "--checkpoint", (dir / "short.ckpt").string(), "--out", (dir / "e").string()}).code, 4);

  write_file(dir / "empty.jsonl", "");
  EXPECT_EQ(run({"evaluate", "--checkpoint", base, "--dataset", (dir / "empty.jsonl").string(), "--out",
                 (dir / "e").string()})
                .code,
            3);

  write_file(dir / "bad.tsv", "epoch\tmethod\n");
  EXPECT_EQ(run({"report", (dir / "bad.tsv").string()}).code, 3);
}

TEST(Cli, GenerateWritesLoadableRecords) {
  auto dir = work_dir("generate");
  auto cfg = write_config(dir, tiny_config()).string();
  ASSERT_EQ(run({"generate", "--config", cfg, "--out", (dir / "data").string()}).code, 0);
  std::size_t files = 0;
  for (const auto& entry : fs::directory_iterator(dir / "data")) {
    ++files;
    auto task = tasks::load_records(entry.path(), tasks::Vocabulary{});
    EXPECT_EQ(task.examples.size(), 40u);
  }
  EXPECT_EQ(files, 4u);
}
