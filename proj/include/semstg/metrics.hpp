#pragma once

#include "semstg/data.hpp"
#include "semstg/model.hpp"
#include "semstg/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace semstg
{

// ---------------------------------------------------------------------------
// Loss

/**
 * @brief Class-weighted bi-variate Gaussian negative log-likelihood.
 *
 * target is [T_pred, N, 2] (same units as pred.mu); class_weights is [C] and
 * labels index into it. Returns the mean over steps and nodes of
 * w * (log(2 pi sx sy sqrt(1 - r^2)) + z / (2 (1 - r^2))).
 */
inline Tensor bivariate_nll(
  const GaussianParams & pred, const Tensor & target, const Tensor & class_weights,
  const std::vector<std::size_t> & labels)
{
  pred.validate();
  const std::size_t t = pred.t_pred();
  const std::size_t n = pred.num_nodes();
  if (target.shape() != pred.mu.shape()) {
    throw ShapeError("bivariate_nll: target " + shape_str(target.shape()) + " vs mu " + shape_str(pred.mu.shape()));
  }
  if (labels.size() != n) throw ShapeError("bivariate_nll: label count does not match node count");
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= class_weights.numel()) throw ContractError("bivariate_nll: label outside class weights");
    w[i] = class_weights.values()[labels[i]];
  }
  auto channel = [&](const Tensor & x, std::size_t c) { return reshape(slice(x, 2, c, 1), {t, n}); };
  const Tensor dx = sub(channel(target, 0), channel(pred.mu, 0));
  const Tensor dy = sub(channel(target, 1), channel(pred.mu, 1));
  const Tensor sx = channel(pred.sigma, 0);
  const Tensor sy = channel(pred.sigma, 1);
  const Tensor nx = mul(dx, reciprocal(sx));
  const Tensor ny = mul(dy, reciprocal(sy));
  const Tensor one_minus_r2 = add_scalar(-square(pred.rho), 1.0);
  const Tensor z = sub(add(square(nx), square(ny)), mul_scalar(mul(pred.rho, mul(nx, ny)), 2.0));
  const Tensor log_norm = add_scalar(add(add(log(sx), log(sy)), mul_scalar(log(one_minus_r2), 0.5)),
                                     std::log(2.0 * std::numbers::pi));
  const Tensor nll = add(log_norm, mul(z, reciprocal(mul_scalar(one_minus_r2, 2.0))));
  return mean(mul(nll, Tensor::from_values({1, n}, std::move(w))));
}

// ---------------------------------------------------------------------------
// Sampling

/// samples is [S, N, T_pred, 2] in absolute pixels.
struct SampledTrajectories
{
  Tensor samples;
  std::uint64_t seed = 0;

  std::size_t num_samples() const { return samples.size(0); }
  std::size_t num_nodes() const { return samples.size(1); }
  std::size_t t_pred() const { return samples.size(2); }
};

/**
 * @brief Draw S trajectories from per-step Gaussians and accumulate them from the last observation.
 *
 * Each step's displacement is mu + L z with L the Cholesky factor of
 * [[sx^2, r sx sy], [r sx sy, sy^2]]; steps are drawn independently.
 * last_obs is [N, 2].
 */
inline SampledTrajectories sample_trajectories(
  const GaussianParams & pred, std::size_t num_samples, std::uint64_t seed, const Tensor & last_obs)
{
  if (num_samples < 1) throw ContractError("sample_trajectories needs S >= 1");
  const std::size_t t_len = pred.t_pred();
  const std::size_t n = pred.num_nodes();
  if (last_obs.shape() != Shape{n, 2}) {
    throw ShapeError("sample_trajectories: last_obs must be [N, 2], got " + shape_str(last_obs.shape()));
  }
  const auto mu = pred.mu.values();
  const auto sg = pred.sigma.values();
  const auto rho = pred.rho.values();
  const auto start = last_obs.values();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> out(num_samples * n * t_len * 2);
  for (std::size_t s = 0; s < num_samples; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      double x = start[i * 2];
      double y = start[i * 2 + 1];
      for (std::size_t t = 0; t < t_len; ++t) {
        const std::size_t k = (t * n + i) * 2;
        const double z1 = gauss(rng);
        const double z2 = gauss(rng);
        const double r = rho[t * n + i];
        x += mu[k] + sg[k] * z1;
        y += mu[k + 1] + sg[k + 1] * (r * z1 + std::sqrt(1.0 - r * r) * z2);
        const std::size_t o = ((s * n + i) * t_len + t) * 2;
        out[o] = x;
        out[o + 1] = y;
      }
    }
  }
  return {Tensor::from_values({num_samples, n, t_len, 2}, std::move(out)), seed};
}

/// Absolute positions of the mean trajectory, [N, T_pred, 2].
inline Tensor mean_trajectory(const GaussianParams & pred, const Tensor & last_obs)
{
  const std::size_t t_len = pred.t_pred();
  const std::size_t n = pred.num_nodes();
  const auto mu = pred.mu.values();
  std::vector<double> out(n * t_len * 2);
  for (std::size_t i = 0; i < n; ++i) {
    double x = last_obs.values()[i * 2];
    double y = last_obs.values()[i * 2 + 1];
    for (std::size_t t = 0; t < t_len; ++t) {
      x += mu[(t * n + i) * 2];
      y += mu[(t * n + i) * 2 + 1];
      out[(i * t_len + t) * 2] = x;
      out[(i * t_len + t) * 2 + 1] = y;
    }
  }
  return Tensor::from_values({n, t_len, 2}, std::move(out));
}

/// Last observed position of every object, [N, 2].
inline Tensor last_observed(const Window & w)
{
  std::vector<double> v;
  for (std::size_t i = 0; i < w.num_objects(); ++i) {
    v.push_back(w.x(i, w.t_obs - 1));
    v.push_back(w.y(i, w.t_obs - 1));
  }
  return Tensor::from_values({w.num_objects(), 2}, std::move(v));
}

/// Ground-truth future positions, [N, T_pred, 2].
inline Tensor future_positions(const Window & w)
{
  std::vector<double> v;
  for (std::size_t i = 0; i < w.num_objects(); ++i) {
    for (std::size_t t = 0; t < w.t_pred; ++t) {
      v.push_back(w.x(i, w.t_obs + t));
      v.push_back(w.y(i, w.t_obs + t));
    }
  }
  return Tensor::from_values({w.num_objects(), w.t_pred, 2}, std::move(v));
}

// ---------------------------------------------------------------------------
// Displacement metrics

/// Per-object errors over one sample set.
struct ObjectErrors
{
  double ade_min = 0;   ///< min over samples of time-averaged error
  double fde_min = 0;   ///< min over samples of final-step error
  double ade_mean = 0;  ///< mean over samples and time
  double fde_mean = 0;  ///< mean over samples of final-step error
};

inline std::vector<ObjectErrors> object_errors(const SampledTrajectories & st, const Tensor & truth)
{
  const auto & s = st.samples;
  if (s.dim() != 4 || s.size(0) == 0) throw ContractError("metrics need at least one sample");
  const std::size_t ns = s.size(0);
  const std::size_t n = s.size(1);
  const std::size_t t_len = s.size(2);
  if (truth.shape() != Shape{n, t_len, 2}) {
    throw ShapeError("metrics: truth " + shape_str(truth.shape()) + " vs samples " + shape_str(s.shape()));
  }
  const auto sv = s.values();
  const auto tv = truth.values();
  std::vector<ObjectErrors> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double best_ade = std::numeric_limits<double>::infinity();
    double best_fde = std::numeric_limits<double>::infinity();
    double sum_ade = 0;
    double sum_fde = 0;
    for (std::size_t k = 0; k < ns; ++k) {
      double ade = 0;
      double last = 0;
      for (std::size_t t = 0; t < t_len; ++t) {
        const std::size_t a = ((k * n + i) * t_len + t) * 2;
        const std::size_t b = (i * t_len + t) * 2;
        last = std::hypot(sv[a] - tv[b], sv[a + 1] - tv[b + 1]);
        ade += last;
      }
      ade /= static_cast<double>(t_len);
      best_ade = std::min(best_ade, ade);
      best_fde = std::min(best_fde, last);
      sum_ade += ade;
      sum_fde += last;
    }
    out[i] = {best_ade, best_fde, sum_ade / static_cast<double>(ns), sum_fde / static_cast<double>(ns)};
  }
  return out;
}

/// Best-of-K displacement errors (mADE, mFDE), averaged over objects.
inline std::pair<double, double> made_mfde(const SampledTrajectories & st, const Tensor & truth)
{
  const auto errs = object_errors(st, truth);
  double a = 0;
  double f = 0;
  for (const auto & e : errs) {
    a += e.ade_min;
    f += e.fde_min;
  }
  const auto n = static_cast<double>(errs.size());
  return {a / n, f / n};
}

/// Sample-averaged displacement errors (aADE, aFDE), averaged over objects.
inline std::pair<double, double> aade_afde(const SampledTrajectories & st, const Tensor & truth)
{
  const auto errs = object_errors(st, truth);
  double a = 0;
  double f = 0;
  for (const auto & e : errs) {
    a += e.ade_mean;
    f += e.fde_mean;
  }
  const auto n = static_cast<double>(errs.size());
  return {a / n, f / n};
}

struct MetricValues
{
  double made = 0, mfde = 0, aade = 0, afde = 0;
  std::size_t count = 0;
};

struct MetricsReport
{
  MetricValues overall;        ///< object-weighted
  MetricValues class_average;  ///< equal weight per present class; count = number of classes
  std::vector<std::pair<std::string, MetricValues>> per_class;  ///< vocabulary order, present classes only
  std::size_t samples = 0;
  std::uint64_t seed = 0;

  const MetricValues * find_class(const std::string & name) const
  {
    for (const auto & [k, v] : per_class) {
      if (k == name) return &v;
    }
    return nullptr;
  }
};

/// Collects per-object errors across windows and folds them into a report.
class MetricsAccumulator
{
public:
  explicit MetricsAccumulator(const ClassVocabulary & vocab) : vocab_(vocab), sums_(vocab.size()) {}

  void add(const std::vector<ObjectErrors> & errs, const std::vector<std::size_t> & labels)
  {
    if (errs.size() != labels.size()) throw ShapeError("metrics: label count does not match object count");
    for (std::size_t i = 0; i < errs.size(); ++i) {
      if (labels[i] >= sums_.size()) throw ContractError("metrics: label outside vocabulary");
      accumulate(total_, errs[i]);
      accumulate(sums_[labels[i]], errs[i]);
    }
  }

  MetricsReport finish(std::size_t samples, std::uint64_t seed) const
  {
    MetricsReport r;
    r.samples = samples;
    r.seed = seed;
    r.overall = averaged(total_);
    for (std::size_t c = 0; c < sums_.size(); ++c) {
      if (sums_[c].count == 0) continue;
      const auto v = averaged(sums_[c]);
      r.per_class.emplace_back(vocab_.name(c), v);
      r.class_average.made += v.made;
      r.class_average.mfde += v.mfde;
      r.class_average.aade += v.aade;
      r.class_average.afde += v.afde;
      ++r.class_average.count;
    }
    if (r.class_average.count > 0) {
      const auto k = static_cast<double>(r.class_average.count);
      r.class_average.made /= k;
      r.class_average.mfde /= k;
      r.class_average.aade /= k;
      r.class_average.afde /= k;
    }
    return r;
  }

private:
  static void accumulate(MetricValues & m, const ObjectErrors & e)
  {
    m.made += e.ade_min;
    m.mfde += e.fde_min;
    m.aade += e.ade_mean;
    m.afde += e.fde_mean;
    ++m.count;
  }

  static MetricValues averaged(MetricValues m)
  {
    if (m.count == 0) return m;
    const auto n = static_cast<double>(m.count);
    m.made /= n;
    m.mfde /= n;
    m.aade /= n;
    m.afde /= n;
    return m;
  }

  ClassVocabulary vocab_;
  std::vector<MetricValues> sums_;
  MetricValues total_;
};

inline MetricsReport per_class_report(
  const SampledTrajectories & st, const Tensor & truth, const std::vector<std::size_t> & labels,
  const ClassVocabulary & vocab)
{
  MetricsAccumulator acc(vocab);
  acc.add(object_errors(st, truth), labels);
  return acc.finish(st.num_samples(), st.seed);
}

inline nlohmann::json metric_values_json(const MetricValues & m)
{
  return {{"made", m.made}, {"mfde", m.mfde}, {"aade", m.aade}, {"afde", m.afde}, {"count", m.count}};
}

inline nlohmann::json report_to_json(const MetricsReport & r)
{
  nlohmann::json j{{"made", r.overall.made},       {"mfde", r.overall.mfde},
                   {"aade", r.overall.aade},       {"afde", r.overall.afde},
                   {"objects", r.overall.count},   {"class_average", metric_values_json(r.class_average)},
                   {"samples", r.samples},         {"seed", r.seed}};
  j["per_class"] = nlohmann::json::object();
  for (const auto & [name, v] : r.per_class) j["per_class"][name] = metric_values_json(v);
  return j;
}

/**
 * @brief Wide per-class table: one row, Average pair first, then each vocabulary class.
 *
 * Classes without objects leave their cells empty.
 */
inline void write_per_class_table(
  std::ostream & out, const std::vector<std::pair<std::string, MetricsReport>> & rows, const ClassVocabulary & vocab)
{
  out << "Class,Average mADE,Average mFDE";
  for (const auto & c : vocab.names()) out << ',' << c << " mADE," << c << " mFDE";
  out << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto & [label, r] : rows) {
    out << label << ',' << r.class_average.made << ',' << r.class_average.mfde;
    for (const auto & c : vocab.names()) {
      if (const auto * v = r.find_class(c)) {
        out << ',' << v->made << ',' << v->mfde;
      } else {
        out << ",,";
      }
    }
    out << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

/// Long table with all four metrics for each class and both averaging conventions.
inline void write_metrics_long(std::ostream & out, const MetricsReport & r)
{
  out << "class,mADE,mFDE,aADE,aFDE,count\n";
  auto row = [&](const std::string & name, const MetricValues & v) {
    out << name << ',' << v.made << ',' << v.mfde << ',' << v.aade << ',' << v.afde << ',' << v.count << '\n';
  };
  out << std::setprecision(10);
  for (const auto & [name, v] : r.per_class) row(name, v);
  row("Average (class-weighted)", r.class_average);
  row("Overall (object-weighted)", r.overall);
}

}  // namespace semstg
