#include "abmll/distributions.hpp"

#include <cmath>
#include <numbers>

#include "abmll/errors.hpp"
#include "abmll/numerics/ops.hpp"

namespace abmll::dist {

DiagonalGaussian::DiagonalGaussian(Tensor mean, Tensor scale)
    : mean_(std::move(mean)), scale_(std::move(scale)) {
  if (mean_.shape() != scale_.shape()) {
    throw DimensionError("DiagonalGaussian: mean " + num::shape_string(mean_.shape()) +
                         " vs scale " + num::shape_string(scale_.shape()));
  }
  for (double s : scale_.values()) {
    if (!(s >= kScaleFloor)) throw DomainError("DiagonalGaussian scale below floor: " + std::to_string(s));
  }
}

GammaPrior::GammaPrior(double shape, double rate) : a0(shape), b0(rate) {
  if (!(a0 > 0.0) || !(b0 > 0.0)) throw ConfigError("Gamma prior needs a0 > 0 and b0 > 0");
}

Tensor kl_diag_gaussian(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  if (q.mean().shape() != p.mean().shape()) {
    throw DimensionError("kl_diag_gaussian: q " + num::shape_string(q.mean().shape()) + " vs p " +
                         num::shape_string(p.mean().shape()));
  }
  using namespace num;
  Tensor log_ratio = sub(log(p.scale()), log(q.scale()));
  Tensor numer = add(square(q.scale()), square(sub(q.mean(), p.mean())));
  Tensor quad = div(numer, scale(square(p.scale()), 2.0));
  return sum(add_scalar(add(log_ratio, quad), -0.5));
}

Tensor reparam_sample(const DiagonalGaussian& d, const Tensor& noise) {
  if (noise.shape() != d.mean().shape()) {
    throw DimensionError("reparam_sample: noise " + num::shape_string(noise.shape()) + " vs mean " +
                         num::shape_string(d.mean().shape()));
  }
  return num::add(d.mean(), num::mul(d.scale(), noise.detach()));
}

Tensor gamma_log_density(const Tensor& x, const GammaPrior& prior) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw DomainError("gamma_log_density of non-positive value " + std::to_string(v));
  }
  using namespace num;
  const double normalizer = prior.a0 * std::log(prior.b0) - std::lgamma(prior.a0);
  Tensor per_element = sub(scale(log(x), prior.a0 - 1.0), scale(x, prior.b0));
  return add_scalar(sum(per_element), normalizer * static_cast<double>(x.numel()));
}

Tensor log_prior_theta(const Tensor& mu_theta, const Tensor& sigma_theta, double c,
                       const GammaPrior& prior, PriorSpread spread) {
  if (!(c > 0.0)) throw ConfigError("prior spread c must be positive");
  for (double s : sigma_theta.values()) {
    if (!(s > 0.0)) throw DomainError("log_prior_theta: non-positive sigma " + std::to_string(s));
  }
  using namespace num;
  const double variance = spread == PriorSpread::kStandardDeviation ? c * c : c;
  const double normalizer = -0.5 * std::log(2.0 * std::numbers::pi * variance);
  Tensor gaussian = add_scalar(scale(sum(square(mu_theta)), -0.5 / variance),
                               normalizer * static_cast<double>(mu_theta.numel()));
  Tensor precision = div(Tensor::scalar(1.0), square(sigma_theta));
  return add(gaussian, gamma_log_density(precision, prior));
}

Tensor standard_normal(num::Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> values(num::shape_numel(shape));
  for (auto& v : values) v = normal(rng);
  return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace abmll::dist
