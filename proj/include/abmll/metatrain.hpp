#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "abmll/distributions.hpp"
#include "abmll/lm.hpp"
#include "abmll/lora.hpp"
#include "abmll/numerics/optim.hpp"
#include "abmll/tasks.hpp"

namespace abmll::metatrain {

using lora::Posture;
using num::Tensor;

enum class Method { kAbmll, kRegularLora, kStructuredLora, kReptile };

std::string method_name(Method method);
Method parse_method(const std::string& name);  // ConfigError listing valid names
const std::vector<std::string>& method_names();

// Every knob of a meta-training run. Defaults are the published settings;
// learning rates are given on the published scale and multiplied by
// lr_scale before use.
struct TrainConfig {
  Method method = Method::kAbmll;
  double beta = 5e-10;
  double gamma = 1e-6;
  double c = std::exp(-20.0);
  double a0 = 1.0;
  double b0 = 0.01;
  dist::PriorSpread prior_spread = dist::PriorSpread::kStandardDeviation;
  std::size_t inner_steps = 5;
  std::size_t batch_size = 2;
  std::size_t query_batches = 1;
  double inner_lr = 5e-5;
  double outer_lr = 5e-5;
  double lr_scale = 100.0;
  std::size_t mc_samples = 1;
  std::size_t epochs = 10;
  std::size_t tasks_per_epoch = 0;  // 0: one visit per seen task
  std::uint64_t seed = 0;
  double reptile_epsilon = 0.5;
  double adapter_init_std = 0.02;
  double grad_clip = 0.0;  // joint gradient-norm bound per step; 0 disables
  // Evaluation on unseen tasks.
  std::size_t adapt_steps = 10;
  std::size_t predict_samples = 0;  // 0: posterior-mean prediction
  std::size_t calibration_bins = 10;
  std::size_t jobs = 1;

  void validate() const;
  double effective_inner_lr() const { return inner_lr * lr_scale; }
  double effective_outer_lr() const { return outer_lr * lr_scale; }
  dist::GammaPrior gamma_prior() const { return {a0, b0}; }
};

// Gradient computations per task visit, used to align per-epoch reporting:
// ABMLL and Reptile spend inner_steps + 1, Structured LoRA inner_steps,
// Regular LoRA 1.
std::size_t gradient_steps_per_visit(Method method, const TrainConfig& cfg);
// Regular LoRA runs this many of its own epochs per reported epoch.
std::size_t regular_lora_epoch_stride(const TrainConfig& cfg);

// Fresh global posture over the model's adapted layers. Stochastic (four
// adapter pairs per layer) for ABMLL, mean-only for the baselines.
Posture init_posture(const lm::BaseWeights& base, Method method, const TrainConfig& cfg,
                     std::uint64_t seed);

struct LossParts {
  Tensor total;
  double nll = 0.0;  // −log-likelihood averaged over Monte Carlo samples
  double kl = 0.0;  // KL(task || global), unweighted
};

// −E_q[log p(batch | φ)] + beta·KL(q || p) with one shared φ draw per
// (sample, layer). Deterministic postures use their mean weights and carry
// no KL term.
LossParts task_loss(const lm::BaseWeights& base, const Posture& posture, const tasks::Batch& batch,
                    const Posture* global, double beta, std::uint64_t noise_seed,
                    std::size_t mc_samples = 1);

// Copy of the global adapters refined by plain gradient descent, one step per
// support batch. The global posture is not modified.
Posture inner_adapt(const lm::BaseWeights& base, const Posture& global,
                    std::span<const tasks::Batch> support, const TrainConfig& cfg,
                    std::uint64_t seed, std::size_t steps);
inline Posture inner_adapt(const lm::BaseWeights& base, const Posture& global,
                           std::span<const tasks::Batch> support, const TrainConfig& cfg,
                           std::uint64_t seed) {
  return inner_adapt(base, global, support, cfg, seed, cfg.inner_steps);
}

struct EpochMetrics {
  std::size_t epoch = 0;
  Method method = Method::kAbmll;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double ece = 0.0;
  double train_nll = 0.0;
  double kl_task = 0.0;
  double neg_log_prior = 0.0;
  double objective = 0.0;

  bool operator==(const EpochMetrics&) const = default;
};

struct RunState {
  Method method = Method::kAbmll;
  Posture global;
  num::AdamState adam;
  std::size_t epoch = 0;  // completed reported epochs
  std::uint64_t rng_seed = 0;
  std::vector<EpochMetrics> history;
};

RunState init_state(const lm::BaseWeights& base, const TrainConfig& cfg);

// The three audited terms of one outer step, summed over the episode tasks.
struct OuterReport {
  double nll = 0.0;
  double kl_task = 0.0;  // Σ KL(task_i || global), unweighted
  double neg_log_prior = 0.0;  // −log p(theta)
  double objective = 0.0;  // nll + beta·kl_task + gamma·neg_log_prior
};

// One ABMLL update. For each task: adapt on the support batches, evaluate the
// query loss, and transport its task-side gradient onto the global adapters
// (first order). Adds the exact global-side gradients of the beta-weighted KL
// and the gamma-weighted −log p(theta), then takes one Adam step.
OuterReport outer_step_abmll(RunState& state, const lm::BaseWeights& base,
                             std::span<const tasks::Episode> episodes, const TrainConfig& cfg,
                             std::uint64_t seed);

// Objective of the global posture on a fixed episode without updating
// anything: Σ_i [nll_i + beta·KL_i] + gamma·(−log p(theta)).
OuterReport abmll_objective(const RunState& state, const lm::BaseWeights& base,
                            std::span<const tasks::Episode> episodes, const TrainConfig& cfg,
                            std::uint64_t seed);

// Runs one reported epoch of the configured method. Returns the training-side
// terms; held-out metrics are filled in by train().
EpochMetrics train_epoch(RunState& state, const lm::BaseWeights& base,
                         const tasks::MetaDataset& data, const TrainConfig& cfg);

using EpochCallback = std::function<void(const RunState&)>;

// Trains until state.epoch == cfg.epochs, evaluating on the unseen tasks after
// every reported epoch and appending to state.history.
void train(RunState& state, const lm::BaseWeights& base, const tasks::MetaDataset& data,
           const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace abmll::metatrain
