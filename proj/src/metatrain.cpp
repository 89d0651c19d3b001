#include "abmll/metatrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "abmll/errors.hpp"
#include "abmll/metrics.hpp"
#include "abmll/numerics/ops.hpp"
#include "abmll/rng.hpp"

namespace abmll::metatrain {

namespace {

using GradList = std::vector<std::vector<double>>;

void accumulate(GradList& total, std::span<const Tensor> params) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) continue;
    auto g = params[k].grad();
    for (std::size_t j = 0; j < g.size(); ++j) total[k][j] += g[j];
  }
}

GradList zeros_like(std::span<const Tensor> params) {
  GradList out;
  for (const auto& p : params) out.emplace_back(p.numel(), 0.0);
  return out;
}

void clear_grads(std::span<Tensor> params) {
  for (auto& p : params) p.clear_grad();
}

// Shared by outer_step_abmll and abmll_objective. When `grads` is non-null
// the global-parameter gradient of the objective (first-order transport) is
// accumulated into it.
OuterReport outer_terms(const Posture& global, const lm::BaseWeights& base,
                        std::span<const tasks::Episode> episodes, const TrainConfig& cfg,
                        std::uint64_t seed, GradList* grads) {
  if (episodes.empty()) throw ContractError("outer step needs at least one task");
  if (!global.stochastic()) throw ConfigError("ABMLL requires a stochastic global posture");
  auto gp = global.parameters();
  OuterReport report;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    const auto& ep = episodes[i];
    if (ep.query.empty()) throw ContractError("episode has no query batches");
    Posture task = inner_adapt(base, global, ep.support, cfg, derive_seed(seed, {i, 0}),
                               ep.support.size());
    auto tp = task.parameters();
    clear_grads(gp);
    num::Tape tape;
    Tensor loss = Tensor::scalar(0.0);
    for (std::size_t q = 0; q < ep.query.size(); ++q) {
      auto parts = task_loss(base, task, ep.query[q], &global, cfg.beta,
                             derive_seed(seed, {i, 1, q}), cfg.mc_samples);
      loss = num::add(loss, parts.total);
      report.nll += parts.nll;
      report.kl_task += parts.kl;
    }
    if (grads) {
      tape.backward(loss);
      accumulate(*grads, tp);  // (a) task-side gradient transported to the global adapters
      accumulate(*grads, gp);  // (b) global side of beta·KL
    }
  }
  clear_grads(gp);
  num::Tape tape;
  Tensor neg_log_prior =
      num::scale(lora::posture_log_prior(global, cfg.gamma_prior(), cfg.prior_spread), -1.0);
  report.neg_log_prior = neg_log_prior.item();
  if (grads) {
    tape.backward(num::scale(neg_log_prior, cfg.gamma));
    accumulate(*grads, gp);  // (c) gamma·(−log p(theta))
  }
  report.objective = report.nll + cfg.beta * report.kl_task + cfg.gamma * report.neg_log_prior;
  return report;
}

tasks::Batch regular_batch(const tasks::MetaDataset& data, std::size_t global_step,
                           std::size_t batch_size, std::uint64_t seed,
                           std::vector<std::pair<std::size_t, std::size_t>>& order,
                           std::size_t& order_pass) {
  std::size_t pool = 0;
  for (const auto& t : data.seen_tasks) pool += t.examples.size();
  tasks::Batch batch;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::size_t flat = global_step * batch_size + i;
    const std::size_t pass = flat / pool;
    if (order.empty() || order_pass != pass) {
      order.clear();
      for (std::size_t t = 0; t < data.seen_tasks.size(); ++t)
        for (std::size_t e = 0; e < data.seen_tasks[t].examples.size(); ++e) order.emplace_back(t, e);
      std::mt19937_64 rng(derive_seed(seed, {pass, 0x7u}));
      std::shuffle(order.begin(), order.end(), rng);
      order_pass = pass;
    }
    const auto [t, e] = order[flat % pool];
    batch.push_back(data.seen_tasks[t].examples[e]);
  }
  return batch;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::string method_name(Method method) {
  switch (method) {
    case Method::kAbmll: return "abmll";
    case Method::kRegularLora: return "regular_lora";
    case Method::kStructuredLora: return "structured_lora";
    case Method::kReptile: return "reptile";
  }
  return "?";
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"abmll", "regular_lora", "structured_lora", "reptile"};
  return names;
}

Method parse_method(const std::string& name) {
  for (auto m : {Method::kAbmll, Method::kRegularLora, Method::kStructuredLora, Method::kReptile}) {
    if (method_name(m) == name) return m;
  }
  std::string valid;
  for (const auto& n : method_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown method '" + name + "' (valid: " + valid + ")");
}

void TrainConfig::validate() const {
  if (!(beta >= 0.0) || !(gamma >= 0.0)) throw ConfigError("beta and gamma must be non-negative");
  if (inner_steps < 1) throw ConfigError("inner_steps must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (query_batches < 1) throw ConfigError("query_batches must be at least 1");
  if (!(inner_lr > 0.0 && inner_lr < 1.0) || !(outer_lr > 0.0 && outer_lr < 1.0)) {
    throw ConfigError("learning rates must lie in (0, 1)");
  }
  if (!(lr_scale > 0.0)) throw ConfigError("lr_scale must be positive");
  if (!(c > 0.0)) throw ConfigError("c must be positive");
  if (!(a0 > 0.0) || !(b0 > 0.0)) throw ConfigError("a0 and b0 must be positive");
  if (mc_samples < 1) throw ConfigError("mc_samples must be at least 1");
  if (!(reptile_epsilon >= 0.0 && reptile_epsilon <= 1.0)) {
    throw ConfigError("reptile_epsilon must lie in [0, 1]");
  }
  if (!(adapter_init_std > 0.0)) throw ConfigError("adapter_init_std must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
  if (calibration_bins < 1) throw ConfigError("calibration_bins must be at least 1");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
}

std::size_t gradient_steps_per_visit(Method method, const TrainConfig& cfg) {
  switch (method) {
    case Method::kAbmll:
    case Method::kReptile: return cfg.inner_steps + 1;
    case Method::kStructuredLora: return cfg.inner_steps;
    case Method::kRegularLora: return 1;
  }
  return 1;
}

std::size_t regular_lora_epoch_stride(const TrainConfig& cfg) {
  return gradient_steps_per_visit(Method::kAbmll, cfg) /
         gradient_steps_per_visit(Method::kRegularLora, cfg);
}

Posture init_posture(const lm::BaseWeights& base, Method method, const TrainConfig& cfg,
                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<lora::LayerAdapters> layers;
  for (const auto& name : lm::adapted_layer_names(base.config)) {
    const Tensor& w0 = base.tensor(name);
    lora::LayerAdapters layer{name, w0,
                              lora::AdapterPair::init(w0.dim(0), w0.dim(1), base.config.d_rank, rng,
                                                      cfg.adapter_init_std),
                              std::nullopt, cfg.c};
    if (method == Method::kAbmll) {
      layer.sigma = lora::AdapterPair::init(w0.dim(0), w0.dim(1), base.config.d_rank, rng,
                                            cfg.adapter_init_std);
    }
    layers.push_back(std::move(layer));
  }
  return Posture(lora::Role::kGlobal, std::move(layers));
}

LossParts task_loss(const lm::BaseWeights& base, const Posture& posture, const tasks::Batch& batch,
                    const Posture* global, double beta, std::uint64_t noise_seed,
                    std::size_t mc_samples) {
  if (batch.empty()) throw ContractError("task_loss on an empty batch");
  const bool stochastic = posture.stochastic();
  const std::size_t samples = stochastic ? std::max<std::size_t>(1, mc_samples) : 1;
  const auto& layers = posture.layers();

  Tensor nll = Tensor::scalar(0.0);
  for (std::size_t s = 0; s < samples; ++s) {
    lm::Overrides weights;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (stochastic) {
        std::mt19937_64 rng(derive_seed(noise_seed, {s, l}));
        weights[layers[l].name] =
            lora::sample_weights(layers[l], dist::standard_normal(layers[l].w0.shape(), rng));
      } else {
        weights[layers[l].name] = lora::mean_weights(layers[l]);
      }
    }
    for (const auto& ex : batch) {
      nll = num::sub(nll, lm::sequence_log_prob(ex.prompt, ex.correct(), base, weights));
    }
  }
  if (samples > 1) nll = num::scale(nll, 1.0 / static_cast<double>(samples));

  LossParts parts{nll, nll.item(), 0.0};
  if (!std::isfinite(parts.nll)) throw DomainError("task loss diverged to a non-finite value");
  if (stochastic && global) {
    Tensor kl = lora::posture_kl(posture, *global);
    parts.kl = kl.item();
    if (!std::isfinite(parts.kl)) throw DomainError("task KL diverged to a non-finite value");
    if (beta != 0.0) parts.total = num::add(nll, num::scale(kl, beta));
  }
  return parts;
}

Posture inner_adapt(const lm::BaseWeights& base, const Posture& global,
                    std::span<const tasks::Batch> support, const TrainConfig& cfg,
                    std::uint64_t seed, std::size_t steps) {
  if (support.size() != steps) {
    throw ContractError("inner_adapt expects " + std::to_string(steps) + " support batches, got " +
                        std::to_string(support.size()));
  }
  Posture task = global.clone(lora::Role::kTask);
  auto params = task.parameters();
  for (std::size_t s = 0; s < steps; ++s) {
    GradList grads;
    {
      num::Tape tape;
      auto parts = task_loss(base, task, support[s], &global, cfg.beta, derive_seed(seed, {s}),
                             cfg.mc_samples);
      tape.backward(parts.total);
      grads = num::collect_grads(params);
    }
    num::clip_grad_norm(grads, cfg.grad_clip);
    num::sgd_step(params, grads, cfg.effective_inner_lr());
  }
  return task;
}

RunState init_state(const lm::BaseWeights& base, const TrainConfig& cfg) {
  cfg.validate();
  Posture global = init_posture(base, cfg.method, cfg, derive_seed(cfg.seed, {0x1u}));
  auto params = global.parameters();
  auto adam = num::make_adam(params, cfg.effective_outer_lr());
  return RunState{cfg.method, std::move(global), std::move(adam), 0, cfg.seed, {}};
}

OuterReport outer_step_abmll(RunState& state, const lm::BaseWeights& base,
                             std::span<const tasks::Episode> episodes, const TrainConfig& cfg,
                             std::uint64_t seed) {
  auto gp = state.global.parameters();
  GradList grads = zeros_like(gp);
  OuterReport report = outer_terms(state.global, base, episodes, cfg, seed, &grads);
  num::clip_grad_norm(grads, cfg.grad_clip);
  num::adam_step(state.adam, gp, grads);
  return report;
}

OuterReport abmll_objective(const RunState& state, const lm::BaseWeights& base,
                            std::span<const tasks::Episode> episodes, const TrainConfig& cfg,
                            std::uint64_t seed) {
  return outer_terms(state.global, base, episodes, cfg, seed, nullptr);
}

EpochMetrics train_epoch(RunState& state, const lm::BaseWeights& base,
                         const tasks::MetaDataset& data, const TrainConfig& cfg) {
  if (data.seen_tasks.empty()) throw DataError("no seen tasks to train on");
  const std::size_t visits = cfg.tasks_per_epoch ? cfg.tasks_per_epoch : data.seen_tasks.size();
  const std::uint64_t epoch = state.epoch;
  const std::uint64_t seed = state.rng_seed;
  EpochMetrics m;
  m.epoch = state.epoch + 1;
  m.method = state.method;
  m.seed = cfg.seed;
  std::vector<double> nll, kl, nlp, objective;
  auto gp = state.global.parameters();

  switch (state.method) {
    case Method::kAbmll:
      for (std::size_t v = 0; v < visits; ++v) {
        const auto& task = data.seen_tasks[v % data.seen_tasks.size()];
        tasks::Episode ep = tasks::sample_episode(task, cfg.batch_size, cfg.inner_steps,
                                                  cfg.query_batches, derive_seed(seed, {epoch, v, 1}));
        auto r = outer_step_abmll(state, base, std::span(&ep, 1), cfg, derive_seed(seed, {epoch, v, 2}));
        nll.push_back(r.nll);
        kl.push_back(r.kl_task);
        nlp.push_back(r.neg_log_prior);
        objective.push_back(r.objective);
      }
      break;
    case Method::kReptile:
      for (std::size_t v = 0; v < visits; ++v) {
        const auto& task = data.seen_tasks[v % data.seen_tasks.size()];
        tasks::Episode ep = tasks::sample_episode(task, cfg.batch_size, cfg.inner_steps,
                                                  cfg.query_batches, derive_seed(seed, {epoch, v, 1}));
        std::vector<tasks::Batch> batches = ep.support;
        batches.insert(batches.end(), ep.query.begin(), ep.query.end());
        Posture adapted = inner_adapt(base, state.global, batches, cfg,
                                      derive_seed(seed, {epoch, v, 2}), batches.size());
        {
          // Report the adapted posture's loss on the last batch it saw.
          auto parts = task_loss(base, adapted, batches.back(), nullptr, 0.0, 0);
          nll.push_back(parts.nll);
        }
        auto ap = adapted.parameters();
        for (std::size_t k = 0; k < gp.size(); ++k) {
          auto w = gp[k].mutable_values();
          auto a = ap[k].values();
          for (std::size_t j = 0; j < w.size(); ++j) w[j] += cfg.reptile_epsilon * (a[j] - w[j]);
        }
      }
      break;
    case Method::kStructuredLora:
      for (std::size_t v = 0; v < visits; ++v) {
        const auto& task = data.seen_tasks[v % data.seen_tasks.size()];
        tasks::Episode ep = tasks::sample_episode(task, cfg.batch_size, cfg.inner_steps, 0,
                                                  derive_seed(seed, {epoch, v, 1}));
        for (const auto& batch : ep.support) {
          GradList grads;
          {
            num::Tape tape;
            auto parts = task_loss(base, state.global, batch, nullptr, 0.0, 0);
            tape.backward(parts.total);
            nll.push_back(parts.nll);
            grads = num::collect_grads(gp);
          }
          num::clip_grad_norm(grads, cfg.grad_clip);
          num::adam_step(state.adam, gp, grads);
        }
      }
      break;
    case Method::kRegularLora: {
      const std::size_t stride = regular_lora_epoch_stride(cfg);
      std::vector<std::pair<std::size_t, std::size_t>> order;
      std::size_t order_pass = 0;
      for (std::size_t r = 0; r < stride; ++r) {
        for (std::size_t v = 0; v < visits; ++v) {
          const std::size_t step = (epoch * stride + r) * visits + v;
          tasks::Batch batch = regular_batch(data, step, cfg.batch_size, seed, order, order_pass);
          GradList grads;
          {
            num::Tape tape;
            auto parts = task_loss(base, state.global, batch, nullptr, 0.0, 0);
            tape.backward(parts.total);
            nll.push_back(parts.nll);
            grads = num::collect_grads(gp);
          }
          num::clip_grad_norm(grads, cfg.grad_clip);
          num::adam_step(state.adam, gp, grads);
        }
      }
      break;
    }
  }
  m.train_nll = mean_of(nll);
  m.kl_task = mean_of(kl);
  m.neg_log_prior = mean_of(nlp);
  m.objective = state.method == Method::kAbmll ? mean_of(objective) : m.train_nll;
  ++state.epoch;
  return m;
}

void train(RunState& state, const lm::BaseWeights& base, const tasks::MetaDataset& data,
           const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (state.method != cfg.method) {
    throw ConfigError("run state was trained with " + method_name(state.method) +
                      ", config requests " + method_name(cfg.method));
  }
  if (data.unseen_tasks.empty()) throw DataError("no unseen tasks to evaluate on");
  while (state.epoch < cfg.epochs) {
    EpochMetrics m = train_epoch(state, base, data, cfg);
    auto eval = metrics::evaluate_tasks(base, state.global, data.unseen_tasks, cfg, cfg.adapt_steps);
    m.accuracy = eval.accuracy;
    m.ece = eval.ece;
    state.history.push_back(m);
    if (on_epoch) on_epoch(state);
  }
}

}  // namespace abmll::metatrain
