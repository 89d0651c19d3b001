#include "abmll/numerics/optim.hpp"

#include <cmath>

#include "abmll/errors.hpp"

namespace abmll::num {

namespace {
void check_sizes(std::span<Tensor> params, std::span<const std::vector<double>> grads) {
  if (params.size() != grads.size()) throw ContractError("parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() != grads[i].size()) throw DimensionError("gradient size mismatch");
  }
}
}  // namespace

AdamState make_adam(std::span<const Tensor> params, double lr) {
  AdamState s;
  s.lr = lr;
  for (const auto& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

void adam_step(AdamState& state, std::span<Tensor> params,
               std::span<const std::vector<double>> grads) {
  check_sizes(params, grads);
  if (state.m.size() != params.size()) throw ContractError("Adam state does not match parameters");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      w[j] -= state.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

void sgd_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, double lr) {
  check_sizes(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_values();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * grads[i][j];
  }
}

double clip_grad_norm(std::vector<std::vector<double>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& g : grads) {
      for (double& x : g) x *= factor;
    }
  }
  return norm;
}

std::vector<std::vector<double>> collect_grads(std::span<const Tensor> params) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      grads.emplace_back(p.numel(), 0.0);
    }
  }
  return grads;
}

}  // namespace abmll::num
