#pragma once

#include <random>

#include "abmll/numerics/tensor.hpp"

namespace abmll::dist {

using num::Tensor;

// Lower bound applied to every standard deviation.
inline constexpr double kScaleFloor = 1e-8;

// Independent Gaussian per element; `scale` is the standard deviation.
class DiagonalGaussian {
 public:
  DiagonalGaussian(Tensor mean, Tensor scale);

  const Tensor& mean() const { return mean_; }
  const Tensor& scale() const { return scale_; }

 private:
  Tensor mean_;
  Tensor scale_;
};

// Gamma(shape a0, rate b0).
struct GammaPrior {
  double a0 = 1.0;
  double b0 = 0.01;

  GammaPrior() = default;
  GammaPrior(double shape, double rate);
};

// How the spread constant c of the N(mu; 0, c) prior factor is read.
enum class PriorSpread { kStandardDeviation, kVariance };

// Closed-form KL(q || p) summed over elements.
Tensor kl_diag_gaussian(const DiagonalGaussian& q, const DiagonalGaussian& p);

// mean + scale ⊙ noise. Gradients reach mean and scale only.
Tensor reparam_sample(const DiagonalGaussian& d, const Tensor& noise);

// Σ log Gamma(x; a0, b0); every x must be positive.
Tensor gamma_log_density(const Tensor& x, const GammaPrior& prior);

// log N(mu_theta; 0, c) + log Gamma(1/sigma_theta²; a0, b0), summed per element.
Tensor log_prior_theta(const Tensor& mu_theta, const Tensor& sigma_theta, double c,
                       const GammaPrior& prior,
                       PriorSpread spread = PriorSpread::kStandardDeviation);

// Tensor of i.i.d. standard normals drawn from `rng`.
Tensor standard_normal(num::Shape shape, std::mt19937_64& rng);

}  // namespace abmll::dist
