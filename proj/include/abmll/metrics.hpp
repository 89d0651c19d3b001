#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "abmll/lm.hpp"
#include "abmll/lora.hpp"
#include "abmll/metatrain.hpp"
#include "abmll/tasks.hpp"

namespace abmll::metrics {

struct PredictionRecord {
  std::size_t example_id = 0;
  std::size_t chosen = 0;
  double confidence = 0.0;
  bool correct = false;
};

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

struct CalibrationTable {
  std::size_t n_bins = 0;
  std::vector<CalibrationBin> bins;

  // Tab-separated: lower, upper, count, mean_confidence, accuracy.
  std::string to_text() const;
};

// W0 + B_mu A_mu for every adapted layer of the posture.
lm::Overrides posterior_mean_overrides(const lora::Posture& posture);

// Softmax over the option scores; ties resolve to the lowest index.
PredictionRecord record_from_scores(std::size_t example_id, const std::vector<double>& scores,
                                    std::size_t answer);

// Posterior-mean prediction.
PredictionRecord predict(const lm::BaseWeights& base, const lm::Overrides& weights,
                         const tasks::Example& example);

// Averages option probabilities over `samples` weight draws from the posture.
PredictionRecord predict_sampled(const lm::BaseWeights& base, const lora::Posture& posture,
                                 const tasks::Example& example, std::size_t samples,
                                 std::uint64_t seed);

struct EvalAdaptation {
  lora::Posture posture;
  std::vector<std::size_t> adaptation_ids;
  std::vector<tasks::Example> evaluation;
};

// adapt_steps gradient steps on disjoint batches drawn from a seeded shuffle
// of the task; everything else is held out for evaluation. Stochastic
// postures train on the beta-weighted task loss against `global`, the others
// on plain NLL.
EvalAdaptation adapt_for_eval(const lm::BaseWeights& base, const lora::Posture& global,
                              const tasks::Task& task, const metatrain::TrainConfig& cfg,
                              std::size_t adapt_steps, std::uint64_t seed);

double accuracy(const std::vector<PredictionRecord>& records);

// Equal-width bins over confidence, top bin closed on the right.
std::pair<double, CalibrationTable> ece(const std::vector<PredictionRecord>& records,
                                        std::size_t n_bins = 10);

struct TaskEvaluation {
  std::string task_id;
  std::vector<PredictionRecord> records;
  double accuracy = 0.0;
  double ece = 0.0;
};

struct Evaluation {
  std::vector<TaskEvaluation> tasks;
  std::vector<PredictionRecord> records;  // pooled over tasks, in task order
  double accuracy = 0.0;
  double ece = 0.0;
  CalibrationTable table;
};

// Adapt-then-evaluate on each task; predictions are spread over cfg.jobs
// threads and merged in example order.
Evaluation evaluate_tasks(const lm::BaseWeights& base, const lora::Posture& global,
                          const std::vector<tasks::Task>& task_list,
                          const metatrain::TrainConfig& cfg, std::size_t adapt_steps);

}  // namespace abmll::metrics
