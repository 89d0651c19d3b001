#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "abmll/numerics/tensor.hpp"

namespace abmll::num {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

AdamState make_adam(std::span<const Tensor> params, double lr);

// One bias-corrected Adam update of `params` using explicit gradients.
void adam_step(AdamState& state, std::span<Tensor> params,
               std::span<const std::vector<double>> grads);

// params -= lr * grads
void sgd_step(std::span<Tensor> params, std::span<const std::vector<double>> grads, double lr);

// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
// A non-positive bound disables clipping. Returns the norm before rescaling.
double clip_grad_norm(std::vector<std::vector<double>>& grads, double max_norm);

// Gradient vectors read from each tensor's grad slot (zeros when absent).
std::vector<std::vector<double>> collect_grads(std::span<const Tensor> params);

}  // namespace abmll::num
