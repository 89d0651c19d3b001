#include "abmll/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include <fmt/format.h>

#include "abmll/errors.hpp"
#include "abmll/numerics/ops.hpp"
#include "abmll/rng.hpp"

namespace abmll::metrics {

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> workers;
  for (std::size_t j = 0; j < jobs; ++j) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

PredictionRecord record_from_probs(std::size_t example_id, const std::vector<double>& probs,
                                   std::size_t answer) {
  if (probs.empty()) throw ContractError("no options to choose from");
  if (answer >= probs.size()) throw IndexError("answer index out of range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return {example_id, best, probs[best], best == answer};
}

}  // namespace

std::string CalibrationTable::to_text() const {
  std::string out = "lower\tupper\tcount\tmean_confidence\taccuracy\n";
  for (const auto& b : bins) {
    out += fmt::format("{:.2f}\t{:.2f}\t{}\t{:.6f}\t{:.6f}\n", b.lower, b.upper, b.count,
                       b.mean_confidence, b.accuracy);
  }
  return out;
}

lm::Overrides posterior_mean_overrides(const lora::Posture& posture) {
  lm::Overrides out;
  for (const auto& layer : posture.layers()) out[layer.name] = lora::mean_weights(layer).detach();
  return out;
}

PredictionRecord record_from_scores(std::size_t example_id, const std::vector<double>& scores,
                                    std::size_t answer) {
  if (scores.empty()) throw ContractError("no options to choose from");
  return record_from_probs(example_id, num::softmax(scores), answer);
}

PredictionRecord predict(const lm::BaseWeights& base, const lm::Overrides& weights,
                         const tasks::Example& example) {
  return record_from_scores(example.id, lm::option_scores(example.prompt, example.options, base, weights),
                            example.answer);
}

PredictionRecord predict_sampled(const lm::BaseWeights& base, const lora::Posture& posture,
                                 const tasks::Example& example, std::size_t samples,
                                 std::uint64_t seed) {
  if (samples == 0 || !posture.stochastic()) {
    return predict(base, posterior_mean_overrides(posture), example);
  }
  std::vector<double> mean(example.options.size(), 0.0);
  const auto& layers = posture.layers();
  for (std::size_t s = 0; s < samples; ++s) {
    lm::Overrides weights;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::mt19937_64 rng(derive_seed(seed, {s, l}));
      weights[layers[l].name] =
          lora::sample_weights(layers[l], dist::standard_normal(layers[l].w0.shape(), rng)).detach();
    }
    auto probs = num::softmax(lm::option_scores(example.prompt, example.options, base, weights));
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += probs[i] / static_cast<double>(samples);
  }
  return record_from_probs(example.id, mean, example.answer);
}

EvalAdaptation adapt_for_eval(const lm::BaseWeights& base, const lora::Posture& global,
                              const tasks::Task& task, const metatrain::TrainConfig& cfg,
                              std::size_t adapt_steps, std::uint64_t seed) {
  const std::size_t n_adapt = adapt_steps * cfg.batch_size;
  if (task.examples.size() < n_adapt + 1) {
    throw DataError(fmt::format("task {} has {} examples; adaptation needs {} plus at least one held out",
                                task.id, task.examples.size(), n_adapt));
  }
  std::vector<std::size_t> order(task.examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {0x5u}));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<tasks::Batch> batches(adapt_steps);
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < n_adapt; ++i) {
    const auto& ex = task.examples[order[i]];
    batches[i / cfg.batch_size].push_back(ex);
    ids.push_back(ex.id);
  }
  std::vector<tasks::Example> held_out;
  for (std::size_t i = n_adapt; i < order.size(); ++i) held_out.push_back(task.examples[order[i]]);
  std::sort(held_out.begin(), held_out.end(),
            [](const auto& x, const auto& y) { return x.id < y.id; });

  lora::Posture adapted = metatrain::inner_adapt(base, global, batches, cfg, derive_seed(seed, {0x6u}),
                                                 adapt_steps);
  return {std::move(adapted), std::move(ids), std::move(held_out)};
}

double accuracy(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw ContractError("accuracy of an empty prediction set");
  const auto hits = std::count_if(records.begin(), records.end(), [](const auto& r) { return r.correct; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

std::pair<double, CalibrationTable> ece(const std::vector<PredictionRecord>& records, std::size_t n_bins) {
  if (n_bins == 0) throw ContractError("ECE needs at least one bin");
  if (records.empty()) throw ContractError("ECE of an empty prediction set");
  CalibrationTable table;
  table.n_bins = n_bins;
  table.bins.resize(n_bins);
  std::vector<double> conf_sum(n_bins, 0.0), hit_sum(n_bins, 0.0);
  for (const auto& r : records) {
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) throw DomainError("confidence outside [0, 1]");
    const auto k = std::min(static_cast<std::size_t>(std::floor(r.confidence * static_cast<double>(n_bins))),
                            n_bins - 1);
    table.bins[k].count += 1;
    conf_sum[k] += r.confidence;
    hit_sum[k] += r.correct ? 1.0 : 0.0;
  }
  double total = 0.0;
  const double n = static_cast<double>(records.size());
  for (std::size_t k = 0; k < n_bins; ++k) {
    auto& b = table.bins[k];
    b.lower = static_cast<double>(k) / static_cast<double>(n_bins);
    b.upper = static_cast<double>(k + 1) / static_cast<double>(n_bins);
    if (b.count == 0) continue;
    const double cnt = static_cast<double>(b.count);
    b.mean_confidence = conf_sum[k] / cnt;
    b.accuracy = hit_sum[k] / cnt;
    total += cnt / n * std::abs(b.accuracy - b.mean_confidence);
  }
  return {total, std::move(table)};
}

Evaluation evaluate_tasks(const lm::BaseWeights& base, const lora::Posture& global,
                          const std::vector<tasks::Task>& task_list,
                          const metatrain::TrainConfig& cfg, std::size_t adapt_steps) {
  if (task_list.empty()) throw DataError("no tasks to evaluate");
  Evaluation out;
  for (std::size_t t = 0; t < task_list.size(); ++t) {
    const std::uint64_t seed = derive_seed(cfg.seed, {t, 0xE7u});
    EvalAdaptation adapted = adapt_for_eval(base, global, task_list[t], cfg, adapt_steps, seed);
    const lm::Overrides mean = posterior_mean_overrides(adapted.posture);

    TaskEvaluation te;
    te.task_id = task_list[t].id;
    te.records.resize(adapted.evaluation.size());
    parallel_for(adapted.evaluation.size(), cfg.jobs, [&](std::size_t i) {
      const auto& ex = adapted.evaluation[i];
      te.records[i] = cfg.predict_samples > 0
                          ? predict_sampled(base, adapted.posture, ex, cfg.predict_samples,
                                            derive_seed(seed, {0x8u, ex.id}))
                          : predict(base, mean, ex);
    });
    te.accuracy = accuracy(te.records);
    te.ece = ece(te.records, cfg.calibration_bins).first;
    out.records.insert(out.records.end(), te.records.begin(), te.records.end());
    out.tasks.push_back(std::move(te));
  }
  out.accuracy = accuracy(out.records);
  std::tie(out.ece, out.table) = ece(out.records, cfg.calibration_bins);
  return out;
}

}  // namespace abmll::metrics
