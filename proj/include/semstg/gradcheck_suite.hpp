#pragma once

#include "semstg/gradcheck.hpp"
#include "semstg/graph.hpp"
#include "semstg/metrics.hpp"
#include "semstg/model.hpp"
#include "semstg/synth.hpp"
#include "semstg/tensor.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace semstg
{

/// A scalar function of one flat vector together with the probe point.
struct GradCheckCase
{
  std::string name;
  ScalarFn fn;
  Tensor point;
};

struct GradCheckOutcome
{
  std::string name;
  double max_rel_error = 0.0;
  bool passed = false;
  std::string error;  ///< non-empty when the check itself threw
};

namespace detail
{

/// Differentiable views of consecutive pieces of a flat vector.
inline std::vector<Tensor> split_flat(const Tensor & flat, const std::vector<Shape> & shapes)
{
  std::vector<Tensor> out;
  std::size_t offset = 0;
  for (const auto & s : shapes) {
    out.push_back(reshape(slice(flat, 0, offset, shape_numel(s)), s));
    offset += shape_numel(s);
  }
  return out;
}

inline std::size_t total_numel(const std::vector<Shape> & shapes)
{
  std::size_t n = 0;
  for (const auto & s : shapes) n += shape_numel(s);
  return n;
}

/// Values with magnitude in [lo, hi] and random sign (or positive only).
inline Tensor random_point(std::mt19937_64 & rng, std::size_t n, double lo, double hi, bool signed_values)
{
  std::uniform_real_distribution<double> mag(lo, hi);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> v(n);
  for (auto & x : v) x = (signed_values && coin(rng) ? -1.0 : 1.0) * mag(rng);
  return Tensor::from_values({n}, std::move(v));
}

inline Tensor random_tensor(std::mt19937_64 & rng, Shape shape)
{
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto & x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), std::move(v));
}

}  // namespace detail

/// Minimum distance of every PReLU/abs input from its kink at the model probe point (10 steps).
inline constexpr double kModelKinkMargin = 1e-4;

/// Smallest nonzero |gradient| allowed at the model probe point. Below this,
/// float64 rounding of a loss near 7 (ulp ~1e-15, step 1e-5) alone exceeds 1e-4 relative error.
inline constexpr double kModelGradFloor = 1e-6;

/// Smallest nonzero |df/dx_i| at x; exactly-zero coordinates (unused parameters) are ignored.
inline double smallest_gradient(const ScalarFn & f, const Tensor & x)
{
  const Tensor leaf = Tensor::from_values(x.shape(), {x.values().begin(), x.values().end()}, true);
  f(leaf).backward();
  double smallest = std::numeric_limits<double>::infinity();
  for (double g : leaf.grad()) {
    if (g != 0.0) smallest = std::min(smallest, std::fabs(g));
  }
  return smallest;
}

/// 3-object window used for whole-model checks.
inline Window gradcheck_window(std::uint64_t seed)
{
  auto cfg = SynthConfig::interaction_default();
  cfg.min_objects = 3;
  cfg.max_objects = 3;
  cfg.classes = {{"Pedestrian", 4.0, 0.8, 1.0}, {"Car", 6.0, 0.8, 1.0}, {"Biker", 5.0, 0.8, 1.0}};
  cfg.onset = 1;
  return synth_generate(seed, 1, cfg, ClassVocabulary())[0];
}

/**
 * @brief Gradient-check cases for every differentiable primitive plus the full model NLL.
 *
 * Each primitive is probed at `points_per_op` random points kept away from
 * its kinks and domain boundaries; outputs are contracted with fixed random
 * weights so every output coordinate matters.
 */
inline std::vector<GradCheckCase> gradcheck_cases(std::uint64_t seed, std::size_t points_per_op, bool include_model = true)
{
  std::mt19937_64 rng(seed);
  std::vector<GradCheckCase> cases;

  auto contract = [](const Tensor & y, const Tensor & r) { return sum(mul(y, r)); };

  auto add_case = [&](const std::string & name, std::vector<Shape> shapes, double lo, double hi, bool signed_values,
                      std::function<Tensor(const std::vector<Tensor> &)> body) {
    for (std::size_t p = 0; p < points_per_op; ++p) {
      const Tensor x = detail::random_point(rng, detail::total_numel(shapes), lo, hi, signed_values);
      // probe once to size the contraction weights
      Shape out_shape;
      {
        NoGradGuard g;
        out_shape = body(detail::split_flat(x, shapes)).shape();
      }
      const Tensor r = detail::random_tensor(rng, out_shape);
      cases.push_back({name, [=](const Tensor & flat) { return contract(body(detail::split_flat(flat, shapes)), r); }, x});
    }
  };

  add_case("add", {{2, 3}, {3}}, 0.1, 2.0, true, [](const auto & a) { return add(a[0], a[1]); });
  add_case("sub", {{2, 3}, {2, 1}}, 0.1, 2.0, true, [](const auto & a) { return sub(a[0], a[1]); });
  add_case("mul", {{2, 3}, {1, 3}}, 0.1, 2.0, true, [](const auto & a) { return mul(a[0], a[1]); });
  add_case("exp", {{5}}, 0.1, 2.0, true, [](const auto & a) { return exp(a[0]); });
  add_case("tanh", {{5}}, 0.1, 2.0, true, [](const auto & a) { return tanh(a[0]); });
  add_case("abs", {{5}}, 0.1, 2.0, true, [](const auto & a) { return abs(a[0]); });
  add_case("reciprocal", {{5}}, 0.5, 2.0, true, [](const auto & a) { return reciprocal(a[0]); });
  add_case("sqrt", {{5}}, 0.5, 2.0, false, [](const auto & a) { return sqrt(a[0]); });
  add_case("log", {{5}}, 0.5, 2.0, false, [](const auto & a) { return log(a[0]); });
  add_case("square", {{5}}, 0.1, 2.0, true, [](const auto & a) { return square(a[0]); });
  add_case("prelu", {{6}, {1}}, 0.1, 2.0, true, [](const auto & a) { return prelu(a[0], a[1]); });
  add_case("matmul", {{2, 3, 4}, {4, 2}}, 0.1, 2.0, true, [](const auto & a) { return matmul(a[0], a[1]); });
  add_case("conv_temporal", {{2, 5, 3}, {3, 2, 3}, {3}}, 0.1, 2.0, true,
           [](const auto & a) { return conv_temporal(a[0], a[1], a[2], 1); });
  add_case("sum_last", {{3, 4}}, 0.1, 2.0, true, [](const auto & a) { return sum_last(a[0]); });
  add_case("permute", {{2, 3, 4}}, 0.1, 2.0, true, [](const auto & a) { return permute(a[0], {2, 0, 1}); });
  add_case("concat", {{2, 3}, {2, 2}}, 0.1, 2.0, true, [](const auto & a) { return concat({a[0], a[1]}, 1); });
  add_case("slice", {{4, 3}}, 0.1, 2.0, true, [](const auto & a) { return slice(a[0], 0, 1, 2); });
  add_case("mean", {{7}}, 0.1, 2.0, true, [](const auto & a) { return mean(a[0]); });
  add_case("normalize_laplacian", {{3, 4, 4}}, 0.1, 2.0, false, [](const auto & a) { return normalize_laplacian(a[0]); });

  {
    // fuse_sam -> normalize_laplacian, differentiated w.r.t. LAM and SAM parameters
    const Tensor vam = build_vam(detail::random_tensor(rng, {4, 3, 2}));
    const Tensor onehot = Tensor::from_values({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
    const Tensor inter = build_intersection(onehot);
    add_case("lam_sam_laplacian", {{4, 1}, {1}, {2, 1}, {1}}, 0.2, 1.0, true, [vam, inter](const auto & a) {
      const Tensor lam = reduce_lam(inter, {a[0], a[1]});
      return normalize_laplacian(fuse_sam(vam, lam, {a[2], a[3]}));
    });
  }
  {
    const Tensor target = detail::random_tensor(rng, {3, 2, 2});
    const Tensor weights = Tensor::from_values({2}, {0.7, 1.6});
    add_case("bivariate_nll", {{3, 5, 2}}, 0.1, 0.9, true, [target, weights](const auto & a) {
      return bivariate_nll(output_head(a[0], {1.0}), target, weights, {0, 1});
    });
  }

  if (include_model) {
    ModelConfig cfg;
    const Tensor weights = Tensor::from_values({cfg.num_classes}, {1.3, 0.8, 1.1, 1.0, 1.0, 1.0});
    // redraw the initialisation until no activation sits near a PReLU or abs kink
    // and no gradient coordinate is accidentally close to zero
    for (std::uint64_t attempt = 0;; ++attempt) {
      const std::uint64_t s = seed + 7919 * attempt;
      const Window w = gradcheck_window(s);
      const ModelParams params = ModelParams::init(cfg, s);
      const auto flat = params.flat_values();
      const auto target = future_displacements(w);
      ScalarFn fn = [=](const Tensor & x) {
        return bivariate_nll(model_forward(w, cfg, params.view_of(x)).pred, target, weights, w.labels);
      };
      Tensor point = Tensor::from_values({flat.size()}, flat);
      if (attempt < 64 && (kink_distance(fn, point) < kModelKinkMargin || smallest_gradient(fn, point) < kModelGradFloor)) {
        continue;
      }
      cases.push_back({"model_nll", std::move(fn), std::move(point)});
      break;
    }
  }
  return cases;
}

inline GradCheckOutcome run_gradcheck_case(const GradCheckCase & c, double step, double threshold)
{
  GradCheckOutcome out{c.name, 0.0, false, {}};
  try {
    out.max_rel_error = gradient_check(c.fn, c.point, step);
    out.passed = out.max_rel_error < threshold;
  } catch (const std::exception & e) {
    out.error = e.what();
  }
  return out;
}

/// Worst outcome per distinct case name, in first-seen order.
inline std::vector<GradCheckOutcome> run_gradcheck_suite(
  const std::vector<GradCheckCase> & cases, double step = 1e-5, double threshold = 1e-4)
{
  std::vector<GradCheckOutcome> merged;
  for (const auto & c : cases) {
    auto o = run_gradcheck_case(c, step, threshold);
    auto it = std::find_if(merged.begin(), merged.end(), [&](const auto & m) { return m.name == o.name; });
    if (it == merged.end()) {
      merged.push_back(o);
      continue;
    }
    it->max_rel_error = std::max(it->max_rel_error, o.max_rel_error);
    it->passed = it->passed && o.passed;
    if (!o.error.empty()) it->error = o.error;
  }
  return merged;
}

}  // namespace semstg
