#include "abmll/numerics/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "abmll/errors.hpp"

namespace abmll::num {

double grad_check(const ScalarFunction& f, const Tensor& point, double eps) {
  if (!(eps > 0.0)) throw ContractError("grad_check requires eps > 0");
  Tensor x = point.clone_parameter();
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor loss = f(x);
    tape.backward(loss);
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  if (analytic.empty()) analytic.assign(x.numel(), 0.0);

  std::vector<double> probe(point.values().begin(), point.values().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + eps;
    const double up = f(Tensor::from(point.shape(), probe)).item();
    probe[i] = saved - eps;
    const double down = f(Tensor::from(point.shape(), probe)).item();
    probe[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-12));
  }
  return worst;
}

}  // namespace abmll::num
