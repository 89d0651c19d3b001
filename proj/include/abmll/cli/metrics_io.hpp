#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "abmll/metatrain.hpp"
#include "abmll/metrics.hpp"

namespace abmll::cli {

// Tab-separated, one row per reported epoch, fixed column order.
inline constexpr std::string_view kMetricsHeader =
    "epoch\tmethod\tseed\taccuracy\tece\ttrain_nll\tkl_task\tneg_log_prior\tobjective";

std::string metrics_table(const std::vector<metatrain::EpochMetrics>& rows);
// FormatError (naming `source`) on a header mismatch or malformed row.
std::vector<metatrain::EpochMetrics> parse_metrics(std::string_view text, const std::string& source);

// Overall and per-task accuracy/ECE of one evaluation.
std::string evaluation_table(const metrics::Evaluation& eval, const std::string& method);
std::string predictions_table(const metrics::Evaluation& eval);

struct MethodSummary {
  std::string method;
  std::size_t runs = 0;
  std::size_t best_epoch = 0;
  double accuracy_mean = 0.0;
  std::optional<double> accuracy_stderr;  // absent for a single run
  double ece_mean = 0.0;
  std::optional<double> ece_stderr;
};

struct CurvePoint {
  std::string method;
  std::size_t epoch = 0;
  std::size_t runs = 0;
  double accuracy_mean = 0.0;
  std::optional<double> accuracy_stderr;
  double ece_mean = 0.0;
  std::optional<double> ece_stderr;
};

struct Report {
  std::vector<MethodSummary> summary;  // one row per method, in first-seen order
  std::vector<CurvePoint> curves;
};

// Mean and standard error (sample standard deviation / sqrt(n)); the error is
// absent when n == 1.
std::pair<double, std::optional<double>> mean_stderr(const std::vector<double>& values);

// Runs are grouped by method. A method's best epoch is the one with the
// highest seed-averaged accuracy (earliest on ties).
Report make_report(const std::vector<std::vector<metatrain::EpochMetrics>>& runs);
std::string summary_table(const Report& report);
std::string curves_table(const Report& report);

}  // namespace abmll::cli
