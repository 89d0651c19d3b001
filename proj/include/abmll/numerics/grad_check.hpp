#pragma once

#include <functional>

#include "abmll/numerics/tensor.hpp"

namespace abmll::num {

using ScalarFunction = std::function<Tensor(const Tensor&)>;

// Largest relative disagreement between reverse-mode gradients and central
// differences, max_i |ad_i − fd_i| / (|fd_i| + 1e-12).
double grad_check(const ScalarFunction& f, const Tensor& point, double eps = 1e-5);

}  // namespace abmll::num
