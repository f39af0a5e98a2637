#pragma once

#include "semstg/tensor.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace semstg
{

using ScalarFn = std::function<Tensor(const Tensor &)>;

struct GradCheckResult
{
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/**
 * @brief Compare reverse-mode gradients of a scalar function with central differences.
 *
 * Relative error per coordinate is |analytic - fd| / max(|analytic|, |fd|, 1e-8);
 * the maximum over coordinates is reported. Throws DomainError when f is not
 * finite at any probe point.
 */
inline GradCheckResult gradient_check_detail(const ScalarFn & f, const Tensor & x, double step = 1e-5)
{
  const std::vector<double> base(x.values().begin(), x.values().end());
  Tensor leaf = Tensor::from_values(x.shape(), base, true);
  const Tensor y = f(leaf);
  if (y.numel() != 1) {
    throw ContractError("gradient_check: function must be scalar-valued, got " + shape_str(y.shape()));
  }
  if (!std::isfinite(y.item())) {
    throw DomainError("gradient_check: non-finite value at the base point");
  }
  y.backward();
  const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());

  auto eval = [&](std::vector<double> probe) {
    NoGradGuard guard;
    const double v = f(Tensor::from_values(x.shape(), std::move(probe))).item();
    if (!std::isfinite(v)) {
      throw DomainError("gradient_check: non-finite value at a probe point");
    }
    return v;
  };

  GradCheckResult result;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base;
    auto minus = base;
    plus[i] += step;
    minus[i] -= step;
    const double fd = (eval(std::move(plus)) - eval(std::move(minus))) / (2.0 * step);
    const double a = analytic.empty() ? 0.0 : analytic[i];
    const double denom = std::max({std::fabs(a), std::fabs(fd), 1e-8});
    const double rel = std::fabs(a - fd) / denom;
    if (i == 0 || rel > result.max_rel_error) {
      result = {rel, i, a, fd};
    }
  }
  return result;
}

inline double gradient_check(const ScalarFn & f, const Tensor & x, double step = 1e-5)
{
  return gradient_check_detail(f, x, step).max_rel_error;
}

/**
 * @brief Smallest |input| over every prelu and abs node reachable from f(x).
 *
 * Finite differences straddling one of these kinks are meaningless, so probe
 * points should keep this well above the step size.
 */
inline double kink_distance(const ScalarFn & f, const Tensor & x)
{
  const Tensor leaf = Tensor::from_values(x.shape(), {x.values().begin(), x.values().end()}, true);
  const auto rec = ComputationRecord::trace(f(leaf));
  double closest = std::numeric_limits<double>::infinity();
  for (const auto & n : rec.nodes()) {
    if (n->op != "prelu" && n->op != "abs") continue;
    for (double v : n->inputs.front()->values) closest = std::min(closest, std::fabs(v));
  }
  return closest;
}

}  // namespace semstg
