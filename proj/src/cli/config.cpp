#include "abmll/cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include <fmt/format.h>

#include "abmll/errors.hpp"

namespace abmll::cli {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid number '" + value + "'");
  return out;
}

// Builds a field for a numeric member reached through `access`.
template <typename T, typename Access>
Field numeric(std::string key, Access access) {
  return {std::move(key),
          [access](const ExperimentConfig& c) {
            return fmt::format("{}", access(const_cast<ExperimentConfig&>(c)));
          },
          [access](ExperimentConfig& c, const std::string& v) { access(c) = parse_number<T>(v); }};
}

#define ABMLL_FIELD(T, key, expr) numeric<T>(key, [](ExperimentConfig& c) -> T& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        ABMLL_FIELD(std::size_t, "model.vocab_size", c.model.vocab_size),
        ABMLL_FIELD(std::size_t, "model.d_model", c.model.d_model),
        ABMLL_FIELD(std::size_t, "model.n_layers", c.model.n_layers),
        ABMLL_FIELD(std::size_t, "model.n_heads", c.model.n_heads),
        ABMLL_FIELD(std::size_t, "model.d_ff", c.model.d_ff),
        ABMLL_FIELD(std::size_t, "model.max_context", c.model.max_context),
        ABMLL_FIELD(std::size_t, "model.d_rank", c.model.d_rank),
        ABMLL_FIELD(std::size_t, "pretrain.steps", c.pretrain.steps),
        ABMLL_FIELD(double, "pretrain.lr", c.pretrain.lr),
        ABMLL_FIELD(std::uint64_t, "pretrain.seed", c.pretrain.seed),
        ABMLL_FIELD(std::size_t, "pretrain.window", c.pretrain.window),
        ABMLL_FIELD(std::size_t, "pretrain.batch", c.pretrain.batch),
        ABMLL_FIELD(std::size_t, "pretrain.corpus_tasks", c.corpus_tasks),
        ABMLL_FIELD(std::size_t, "pretrain.corpus_examples", c.corpus_examples),
        ABMLL_FIELD(std::uint64_t, "suite.seed", c.suite.seed),
        ABMLL_FIELD(std::size_t, "suite.n_seen", c.suite.n_seen),
        ABMLL_FIELD(std::size_t, "suite.n_unseen", c.suite.n_unseen),
        ABMLL_FIELD(std::size_t, "suite.examples_per_task", c.suite.examples_per_task),
    };
    f.push_back({"suite.unseen_families",
                 [](const ExperimentConfig& c) {
                   std::string out;
                   for (auto fam : c.suite.unseen_families) {
                     out += (out.empty() ? "" : ",") + tasks::family_name(fam);
                   }
                   return out;
                 },
                 [](ExperimentConfig& c, const std::string& v) {
                   c.suite.unseen_families.clear();
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     c.suite.unseen_families.push_back(tasks::parse_family(trim(item)));
                   }
                   if (c.suite.unseen_families.empty()) throw ConfigError("empty family list");
                 }});
    f.push_back({"train.method",
                 [](const ExperimentConfig& c) { return metatrain::method_name(c.train.method); },
                 [](ExperimentConfig& c, const std::string& v) { c.train.method = metatrain::parse_method(v); }});
    for (auto&& field : {
             ABMLL_FIELD(double, "train.beta", c.train.beta),
             ABMLL_FIELD(double, "train.gamma", c.train.gamma),
             ABMLL_FIELD(double, "train.c", c.train.c),
             ABMLL_FIELD(double, "train.a0", c.train.a0),
             ABMLL_FIELD(double, "train.b0", c.train.b0),
         }) {
      f.push_back(field);
    }
    f.push_back({"train.prior_spread",
                 [](const ExperimentConfig& c) {
                   return std::string(c.train.prior_spread == dist::PriorSpread::kVariance ? "variance" : "std");
                 },
                 [](ExperimentConfig& c, const std::string& v) {
                   if (v == "std") c.train.prior_spread = dist::PriorSpread::kStandardDeviation;
                   else if (v == "variance") c.train.prior_spread = dist::PriorSpread::kVariance;
                   else throw ConfigError("prior_spread must be 'std' or 'variance'");
                 }});
    for (auto&& field : {
             ABMLL_FIELD(std::size_t, "train.inner_steps", c.train.inner_steps),
             ABMLL_FIELD(std::size_t, "train.batch_size", c.train.batch_size),
             ABMLL_FIELD(std::size_t, "train.query_batches", c.train.query_batches),
             ABMLL_FIELD(double, "train.inner_lr", c.train.inner_lr),
             ABMLL_FIELD(double, "train.outer_lr", c.train.outer_lr),
             ABMLL_FIELD(double, "train.lr_scale", c.train.lr_scale),
             ABMLL_FIELD(std::size_t, "train.mc_samples", c.train.mc_samples),
             ABMLL_FIELD(std::size_t, "train.epochs", c.train.epochs),
             ABMLL_FIELD(std::size_t, "train.tasks_per_epoch", c.train.tasks_per_epoch),
             ABMLL_FIELD(std::uint64_t, "train.seed", c.train.seed),
             ABMLL_FIELD(double, "train.reptile_epsilon", c.train.reptile_epsilon),
             ABMLL_FIELD(double, "train.adapter_init_std", c.train.adapter_init_std),
             ABMLL_FIELD(double, "train.grad_clip", c.train.grad_clip),
             ABMLL_FIELD(std::size_t, "train.adapt_steps", c.train.adapt_steps),
             ABMLL_FIELD(std::size_t, "train.predict_samples", c.train.predict_samples),
             ABMLL_FIELD(std::size_t, "train.calibration_bins", c.train.calibration_bins),
             ABMLL_FIELD(std::size_t, "train.jobs", c.train.jobs),
         }) {
      f.push_back(field);
    }
    return f;
  }();
  return table;
}

#undef ABMLL_FIELD

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig config;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(fmt::format("line {}: expected 'key = value'", line_no));
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto& table = fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(fmt::format("line {}: unknown key '{}'", line_no, key));
    if (!seen.insert(key).second) throw ConfigError(fmt::format("line {}: duplicate key '{}'", line_no, key));
    try {
      it->set(config, value);
    } catch (const ConfigError& e) {
      throw ConfigError(fmt::format("line {}: {}: {}", line_no, key, e.what()));
    }
  }
  config.model.validate();
  config.train.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string to_text(const ExperimentConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

}  // namespace abmll::cli
