#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "abmll/distributions.hpp"
#include "abmll/numerics/tensor.hpp"

namespace abmll::lora {

using num::Tensor;

// Low-rank factor pair whose product B·A perturbs a frozen weight.
// B is d_out×rank, A is rank×d_in.
struct AdapterPair {
  Tensor b;
  Tensor a;

  // B = 0, A ~ N(0, a_std²): the product starts at exactly zero.
  static AdapterPair init(std::size_t d_out, std::size_t d_in, std::size_t rank,
                          std::mt19937_64& rng, double a_std = 0.02);

  std::size_t d_out() const { return b.dim(0); }
  std::size_t d_in() const { return a.dim(1); }
  std::size_t rank() const { return b.dim(1); }
  std::size_t parameter_count() const { return b.numel() + a.numel(); }
  AdapterPair clone() const { return {b.clone_parameter(), a.clone_parameter()}; }
};

Tensor adapter_delta(const AdapterPair& pair);

// sqrt((raw + c)² + floor²): |raw + c| kept strictly positive and smooth.
Tensor effective_scale(const Tensor& raw, double c);

// Adapters attached to one frozen weight W0. Stochastic layers carry a second
// pair producing the scale; deterministic (plain LoRA) layers do not.
struct LayerAdapters {
  std::string name;
  Tensor w0;
  AdapterPair mu;
  std::optional<AdapterPair> sigma;
  double c = 0.0;

  bool stochastic() const { return sigma.has_value(); }
};

// N(B_mu A_mu + W0, effective_scale(B_sigma A_sigma, c)²) over the layer's
// weight space.
dist::DiagonalGaussian layer_distribution(const LayerAdapters& layer);

// Same distribution without the W0 shift; KL terms are computed on it.
dist::DiagonalGaussian layer_delta_distribution(const LayerAdapters& layer);

// Reparameterized weight draw. Deterministic layers ignore the noise and
// return W0 + B_mu A_mu.
Tensor sample_weights(const LayerAdapters& layer, const Tensor& noise);

// Posterior-mean weight W0 + B_mu A_mu.
Tensor mean_weights(const LayerAdapters& layer);

enum class Role { kGlobal, kTask };

// The set of adapters for every adapted layer of the model, either the
// global parameters or one task's adapted copy.
//
// Postures are move-only; copies go through clone() so every live instance is
// accounted for by the instrumentation counters.
class Posture {
 public:
  Posture(Role role, std::vector<LayerAdapters> layers);
  Posture(Posture&& other) noexcept;
  Posture& operator=(Posture&& other) noexcept;
  Posture(const Posture&) = delete;
  Posture& operator=(const Posture&) = delete;
  ~Posture();

  // Value copy of all adapters (W0 shared), with a new role.
  Posture clone(Role role) const;

  Role role() const { return role_; }
  const std::vector<LayerAdapters>& layers() const { return layers_; }
  std::vector<LayerAdapters>& layers() { return layers_; }
  bool stochastic() const;

  // Trainable tensors in a fixed order: per layer mu.b, mu.a, then sigma.b,
  // sigma.a when present.
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  static int live_count();
  static int peak_count();
  static void reset_peak();

 private:
  void release();

  Role role_;
  std::vector<LayerAdapters> layers_;
  bool counted_ = false;
};

// Σ over layers of KL(task layer || global layer).
Tensor posture_kl(const Posture& task, const Posture& global);

// Σ over layers of log p(theta) with mu_theta = B_mu A_mu (zero-centered) and
// sigma_theta the layer's effective scale.
Tensor posture_log_prior(const Posture& global, const dist::GammaPrior& prior,
                         dist::PriorSpread spread = dist::PriorSpread::kStandardDeviation);

}  // namespace abmll::lora
