#include "abmll/cli/metrics_io.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "abmll/errors.hpp"

namespace abmll::cli {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

template <typename T>
T parse_field(const std::string& s, const std::string& source, std::size_t line_no) {
  T out{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  if (ec != std::errc() || ptr != end || s.empty()) {
    throw FormatError(fmt::format("{}:{}: invalid field '{}'", source, line_no, s));
  }
  return out;
}

std::string opt(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); }

}  // namespace

std::string metrics_table(const std::vector<metatrain::EpochMetrics>& rows) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const auto& m : rows) {
    out += fmt::format("{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n", m.epoch, metatrain::method_name(m.method),
                       m.seed, m.accuracy, m.ece, m.train_nll, m.kl_task, m.neg_log_prior, m.objective);
  }
  return out;
}

std::vector<metatrain::EpochMetrics> parse_metrics(std::string_view text, const std::string& source) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw FormatError(source + ": unexpected metrics header");
  }
  std::vector<metatrain::EpochMetrics> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 9) throw FormatError(fmt::format("{}:{}: expected 9 columns", source, line_no));
    metatrain::EpochMetrics m;
    m.epoch = parse_field<std::size_t>(f[0], source, line_no);
    try {
      m.method = metatrain::parse_method(f[1]);
    } catch (const ConfigError& e) {
      throw FormatError(fmt::format("{}:{}: {}", source, line_no, e.what()));
    }
    m.seed = parse_field<std::uint64_t>(f[2], source, line_no);
    double* values[] = {&m.accuracy, &m.ece, &m.train_nll, &m.kl_task, &m.neg_log_prior, &m.objective};
    for (std::size_t k = 0; k < 6; ++k) *values[k] = parse_field<double>(f[3 + k], source, line_no);
    rows.push_back(m);
  }
  return rows;
}

std::string evaluation_table(const metrics::Evaluation& eval, const std::string& method) {
  std::string out = "scope\tmethod\texamples\taccuracy\tece\n";
  out += fmt::format("all\t{}\t{}\t{}\t{}\n", method, eval.records.size(), eval.accuracy, eval.ece);
  for (const auto& t : eval.tasks) {
    out += fmt::format("{}\t{}\t{}\t{}\t{}\n", t.task_id, method, t.records.size(), t.accuracy, t.ece);
  }
  return out;
}

std::string predictions_table(const metrics::Evaluation& eval) {
  std::string out = "task\texample\tchosen\tconfidence\tcorrect\n";
  for (const auto& t : eval.tasks) {
    for (const auto& r : t.records) {
      out += fmt::format("{}\t{}\t{}\t{}\t{}\n", t.task_id, r.example_id, r.chosen, r.confidence,
                         r.correct ? 1 : 0);
    }
  }
  return out;
}

std::pair<double, std::optional<double>> mean_stderr(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("mean of no values");
  const double n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  if (values.size() == 1) return {mean, std::nullopt};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

Report make_report(const std::vector<std::vector<metatrain::EpochMetrics>>& runs) {
  if (runs.empty()) throw UsageError("report needs at least one metrics file");
  std::vector<std::string> order;
  // method -> epoch -> (accuracies, eces)
  std::map<std::string, std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>>> by_method;
  for (const auto& run : runs) {
    for (const auto& m : run) {
      const auto name = metatrain::method_name(m.method);
      if (!by_method.count(name)) order.push_back(name);
      auto& cell = by_method[name][m.epoch];
      cell.first.push_back(m.accuracy);
      cell.second.push_back(m.ece);
    }
  }
  Report report;
  for (const auto& name : order) {
    MethodSummary best;
    bool have = false;
    for (const auto& [epoch, cell] : by_method[name]) {
      const auto [acc, acc_se] = mean_stderr(cell.first);
      const auto [e, e_se] = mean_stderr(cell.second);
      report.curves.push_back({name, epoch, cell.first.size(), acc, acc_se, e, e_se});
      if (!have || acc > best.accuracy_mean) {
        best = {name, cell.first.size(), epoch, acc, acc_se, e, e_se};
        have = true;
      }
    }
    if (have) report.summary.push_back(best);
  }
  return report;
}

std::string summary_table(const Report& report) {
  std::string out = "method\truns\tbest_epoch\taccuracy_mean\taccuracy_stderr\tece_mean\tece_stderr\n";
  for (const auto& s : report.summary) {
    out += fmt::format("{}\t{}\t{}\t{}\t{}\t{}\t{}\n", s.method, s.runs, s.best_epoch, s.accuracy_mean,
                       opt(s.accuracy_stderr), s.ece_mean, opt(s.ece_stderr));
  }
  return out;
}

std::string curves_table(const Report& report) {
  std::string out = "method\tepoch\truns\taccuracy_mean\taccuracy_stderr\tece_mean\tece_stderr\n";
  for (const auto& c : report.curves) {
    out += fmt::format("{}\t{}\t{}\t{}\t{}\t{}\t{}\n", c.method, c.epoch, c.runs, c.accuracy_mean,
                       opt(c.accuracy_stderr), c.ece_mean, opt(c.ece_stderr));
  }
  return out;
}

}  // namespace abmll::cli
