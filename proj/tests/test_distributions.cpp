#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "abmll/distributions.hpp"
#include "abmll/errors.hpp"
#include "abmll/numerics/grad_check.hpp"
#include "abmll/numerics/ops.hpp"

using namespace abmll;
using num::Tensor;

namespace {

Tensor uniform(num::Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(num::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

double log_normal_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

// Gauss-Legendre 4-point rule on equal panels of [lo, hi].
template <typename F>
double integrate(F f, double lo, double hi, std::size_t panels) {
  static const double node[4] = {-0.8611363115940526, -0.3399810435848563, 0.3399810435848563,
                                 0.8611363115940526};
  static const double weight[4] = {0.3478548451374538, 0.6521451548625461, 0.6521451548625461,
                                   0.3478548451374538};
  const double h = (hi - lo) / static_cast<double>(panels);
  double total = 0.0;
  for (std::size_t p = 0; p < panels; ++p) {
    const double mid = lo + (static_cast<double>(p) + 0.5) * h;
    for (int k = 0; k < 4; ++k) total += weight[k] * f(mid + 0.5 * h * node[k]);
  }
  return 0.5 * h * total;
}

double gamma_density(double x, const dist::GammaPrior& prior) {
  return std::exp(dist::gamma_log_density(Tensor::scalar(x), prior).item());
}

}  // namespace

TEST(DiagonalGaussian, RejectsMismatchedShapesAndTinyScales) {
  EXPECT_THROW(dist::DiagonalGaussian(Tensor::zeros({2}), Tensor::full({3}, 1.0)), DimensionError);
  EXPECT_THROW(dist::DiagonalGaussian(Tensor::zeros({2}), Tensor::from({2}, {1.0, 1e-12})), DomainError);
  EXPECT_THROW(dist::GammaPrior(0.0, 1.0), ConfigError);
  EXPECT_THROW(dist::GammaPrior(1.0, -1.0), ConfigError);
}

TEST(KlDiagGaussian, ClosedFormCases) {
  dist::DiagonalGaussian q(Tensor::from({1}, {1.0}), Tensor::from({1}, {1.0}));
  dist::DiagonalGaussian p(Tensor::from({1}, {0.0}), Tensor::from({1}, {1.0}));
  EXPECT_NEAR(dist::kl_diag_gaussian(q, p).item(), 0.5, 1e-15);
  EXPECT_EQ(dist::kl_diag_gaussian(q, q).item(), 0.0);

  dist::DiagonalGaussian r(Tensor::zeros({3}), Tensor::full({3}, 1.0));
  EXPECT_THROW(dist::kl_diag_gaussian(q, r), DimensionError);
}

TEST(KlDiagGaussian, MatchesMonteCarloOnTenConfigurations) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 4;
    Tensor mq = uniform({n}, rng, -1.0, 1.0), mp = uniform({n}, rng, -1.0, 1.0);
    Tensor sq = uniform({n}, rng, 0.5, 1.5), sp = uniform({n}, rng, 0.5, 1.5);
    const double closed = dist::kl_diag_gaussian({mq, sq}, {mp, sp}).item();

    std::normal_distribution<double> z(0.0, 1.0);
    const std::size_t draws = 1'000'000;
    double total = 0.0;
    for (std::size_t d = 0; d < draws; ++d) {
      for (std::size_t i = 0; i < n; ++i) {
        const double x = mq[i] + sq[i] * z(rng);
        total += log_normal_pdf(x, mq[i], sq[i]) - log_normal_pdf(x, mp[i], sp[i]);
      }
    }
    const double mc = total / static_cast<double>(draws);
    EXPECT_NEAR(mc, closed, 0.01 * closed) << "seed " << seed;
  }
}

TEST(KlDiagGaussian, NonNegativeAndPermutationInvariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor mq = uniform({5}, rng, -2.0, 2.0), mp = uniform({5}, rng, -2.0, 2.0);
    Tensor sq = uniform({5}, rng, 0.1, 3.0), sp = uniform({5}, rng, 0.1, 3.0);
    const double kl = dist::kl_diag_gaussian({mq, sq}, {mp, sp}).item();
    EXPECT_GE(kl, 0.0);
    EXPECT_NEAR(dist::kl_diag_gaussian({mq, sq}, {mq, sq}).item(), 0.0, 1e-12);

    auto rev = [](const Tensor& t) {
      std::vector<double> v(t.values().rbegin(), t.values().rend());
      return Tensor::from(t.shape(), std::move(v));
    };
    EXPECT_NEAR(dist::kl_diag_gaussian({rev(mq), rev(sq)}, {rev(mp), rev(sp)}).item(), kl, 1e-12);
  }
}

TEST(KlDiagGaussian, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  Tensor mq = uniform({3}, rng, -1, 1), mp = uniform({3}, rng, -1, 1);
  Tensor sq = uniform({3}, rng, 0.5, 1.5), sp = uniform({3}, rng, 0.5, 1.5);
  EXPECT_LE(num::grad_check([&](const Tensor& x) { return dist::kl_diag_gaussian({x, sq}, {mp, sp}); }, mq), 1e-4);
  EXPECT_LE(num::grad_check([&](const Tensor& x) { return dist::kl_diag_gaussian({mq, x}, {mp, sp}); }, sq), 1e-4);
  EXPECT_LE(num::grad_check([&](const Tensor& x) { return dist::kl_diag_gaussian({mq, sq}, {x, sp}); }, mp), 1e-4);
  EXPECT_LE(num::grad_check([&](const Tensor& x) { return dist::kl_diag_gaussian({mq, sq}, {mp, x}); }, sp), 1e-4);
}

TEST(ReparamSample, ClosedFormCases) {
  dist::DiagonalGaussian d(Tensor::from({2}, {1.0, -3.0}), Tensor::from({2}, {0.5, 2.0}));
  Tensor at_zero = dist::reparam_sample(d, Tensor::zeros({2}));
  EXPECT_EQ(at_zero[0], 1.0);
  EXPECT_EQ(at_zero[1], -3.0);
  dist::DiagonalGaussian e(Tensor::zeros({1}), Tensor::full({1}, 2.0));
  EXPECT_EQ(dist::reparam_sample(e, Tensor::full({1}, 1.0)).item(), 2.0);
  EXPECT_THROW(dist::reparam_sample(d, Tensor::zeros({3})), DimensionError);
}

TEST(ReparamSample, GradientReachesMeanAndScaleOnly) {
  Tensor mean = Tensor::parameter({2}, {0.3, -0.2});
  Tensor scale = Tensor::parameter({2}, {1.5, 0.5});
  Tensor noise = Tensor::from({2}, {0.7, -1.1});
  num::Tape tape;
  tape.backward(num::sum(dist::reparam_sample({mean, scale}, noise)));
  EXPECT_DOUBLE_EQ(mean.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(scale.grad()[0], 0.7);
  EXPECT_DOUBLE_EQ(scale.grad()[1], -1.1);
  EXPECT_FALSE(noise.has_grad());
}

TEST(ReparamSample, LawOfLargeNumbers) {
  const double mu = 0.7, sigma = 1.3;
  std::mt19937_64 rng(5);
  for (std::size_t n : {1000u, 10000u, 100000u}) {
    Tensor noise = dist::standard_normal({n}, rng);
    dist::DiagonalGaussian wide(Tensor::full({n}, mu), Tensor::full({n}, sigma));
    const Tensor sample = dist::reparam_sample(wide, noise);
    auto v = sample.values();
    double mean = 0.0;
    for (double x : v) mean += x / static_cast<double>(n);
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean) / static_cast<double>(n - 1);
    const double se = sigma / std::sqrt(static_cast<double>(n));
    EXPECT_LE(std::abs(mean - mu), 3.0 * se) << n;
    if (n == 100000u) EXPECT_NEAR(var, sigma * sigma, 0.05 * sigma * sigma);
  }
  // Averaged over repeats, the error shrinks with n.
  double small = 0.0, large = 0.0;
  for (int r = 0; r < 200; ++r) {
    auto draw_err = [&](std::size_t n) {
      const Tensor draw = dist::standard_normal({n}, rng);
      auto v = draw.values();
      double m = 0.0;
      for (double x : v) m += x;
      return std::abs(m / static_cast<double>(n));
    };
    small += draw_err(100);
    large += draw_err(10000);
  }
  EXPECT_LT(large, small / 5.0);
}

TEST(GammaLogDensity, ClosedFormCases) {
  EXPECT_NEAR(dist::gamma_log_density(Tensor::scalar(1.0), {1.0, 0.01}).item(), std::log(0.01) - 0.01, 1e-12);
  EXPECT_NEAR(dist::gamma_log_density(Tensor::scalar(1.0), {2.0, 1.0}).item(), -1.0, 1e-12);
  EXPECT_THROW(dist::gamma_log_density(Tensor::from({2}, {1.0, 0.0}), {}), DomainError);
  EXPECT_THROW(dist::gamma_log_density(Tensor::scalar(-1.0), {}), DomainError);
}

TEST(GammaLogDensity, ExponentialCaseIsExact) {
  const dist::GammaPrior prior(1.0, 0.01);
  for (double x : {1e-3, 0.5, 1.0, 7.0, 250.0}) {
    EXPECT_NEAR(dist::gamma_log_density(Tensor::scalar(x), prior).item(), std::log(0.01) - 0.01 * x, 1e-12);
  }
}

TEST(GammaLogDensity, IntegratesToOne) {
  for (auto [a0, b0] : {std::pair{1.0, 0.01}, std::pair{2.0, 1.0}, std::pair{3.0, 0.5}}) {
    const dist::GammaPrior prior(a0, b0);
    const double upper = 60.0 / b0;
    const double z = integrate([&](double x) { return gamma_density(x, prior); }, 0.0, upper, 20000);
    EXPECT_NEAR(z, 1.0, 1e-4) << a0 << "," << b0;
    // Pointwise agreement with the quadrature-normalized density.
    for (double x = 0.25; x < 20.0; x += 0.5) {
      EXPECT_NEAR(gamma_density(x, prior), gamma_density(x, prior) / z, 1e-6);
    }
  }
}

TEST(GammaLogDensity, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  Tensor x = uniform({4}, rng, 0.5, 3.0);
  EXPECT_LE(num::grad_check([](const Tensor& t) { return dist::gamma_log_density(t, {2.5, 0.7}); }, x), 1e-4);
}

TEST(LogPriorTheta, ClosedFormCases) {
  const double expected = -0.5 * std::log(2.0 * std::numbers::pi) + std::log(0.01) - 0.01;
  EXPECT_NEAR(dist::log_prior_theta(Tensor::zeros({1}), Tensor::full({1}, 1.0), 1.0, {1.0, 0.01}).item(),
              expected, 1e-12);
  EXPECT_NEAR(expected, -5.534, 1e-3);

  // Zero mean: the Gaussian factor reduces to its normalizer.
  const double c = 0.3;
  Tensor sigma = Tensor::full({3}, 2.0);
  const double gamma_part = dist::gamma_log_density(Tensor::full({3}, 0.25), {}).item();
  EXPECT_NEAR(dist::log_prior_theta(Tensor::zeros({3}), sigma, c, {}).item() - gamma_part,
              -1.5 * std::log(2.0 * std::numbers::pi * c * c), 1e-12);

  EXPECT_THROW(dist::log_prior_theta(Tensor::zeros({1}), Tensor::full({1}, 1.0), 0.0, {}), ConfigError);
  EXPECT_THROW(dist::log_prior_theta(Tensor::zeros({1}), Tensor::zeros({1}), 1.0, {}), DomainError);
}

TEST(LogPriorTheta, VarianceReadingDiffersOnlyInSpread) {
  const double c = 0.25;
  Tensor mu = Tensor::from({2}, {0.1, -0.3});
  Tensor sigma = Tensor::from({2}, {0.8, 1.2});
  const double as_var =
      dist::log_prior_theta(mu, sigma, c, {}, dist::PriorSpread::kVariance).item();
  const double as_std = dist::log_prior_theta(mu, sigma, std::sqrt(c), {}).item();
  EXPECT_NEAR(as_var, as_std, 1e-12);
}

TEST(LogPriorTheta, StationaryAtZeroMean) {
  Tensor mu = Tensor::parameter({3}, {0.0, 0.0, 0.0});
  num::Tape tape;
  tape.backward(dist::log_prior_theta(mu, Tensor::full({3}, 1.0), 0.5, {}));
  for (double g : mu.grad()) EXPECT_EQ(g, 0.0);

  std::mt19937_64 rng(4);
  Tensor s = uniform({3}, rng, 0.5, 2.0);
  Tensor m = uniform({3}, rng, -1.0, 1.0);
  EXPECT_LE(num::grad_check([&](const Tensor& x) { return dist::log_prior_theta(x, s, 0.7, {}); }, m), 1e-4);
  EXPECT_LE(num::grad_check([&](const Tensor& x) { return dist::log_prior_theta(m, x, 0.7, {}); }, s), 1e-4);
}

TEST(StandardNormal, SeededAndShaped) {
  std::mt19937_64 a(9), b(9);
  Tensor x = dist::standard_normal({2, 3}, a);
  Tensor y = dist::standard_normal({2, 3}, b);
  EXPECT_EQ(x.shape(), (num::Shape{2, 3}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(x[i], y[i]);
}
