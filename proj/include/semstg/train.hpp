#pragma once

#include "semstg/data.hpp"
#include "semstg/metrics.hpp"
#include "semstg/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace semstg
{

struct AdamState
{
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;  ///< one entry per parameter, same order as ModelParams
  std::vector<std::vector<double>> v;

  static AdamState for_params(const ModelParams & p)
  {
    AdamState s;
    for (const auto & prm : p.all()) {
      s.m.emplace_back(prm.tensor.numel(), 0.0);
      s.v.emplace_back(prm.tensor.numel(), 0.0);
    }
    return s;
  }
};

/**
 * @brief One Adam update from the gradients currently stored on the parameters.
 *
 * Throws DomainError naming the parameter, without touching any state, when a
 * gradient is not finite.
 */
inline void adam_step(ModelParams & params, AdamState & state, double lr)
{
  auto & all = params.all();
  if (state.m.size() != all.size() || state.v.size() != all.size()) {
    throw ContractError("adam_step: optimizer state does not match parameter list");
  }
  for (const auto & p : all) {
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw DomainError("adam_step: non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < all.size(); ++k) {
    auto values = all[k].tensor.mutable_values();
    const auto grad = all[k].tensor.grad();
    auto & m = state.m[k];
    auto & v = state.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = grad.empty() ? 0.0 : grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

struct TrainConfig
{
  double learning_rate = 1e-4;
  std::size_t effective_batch = 512;
  std::size_t epochs = 70;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  std::size_t eval_samples = 20;
  /// Max global gradient norm; 0 disables clipping.
  double clip_norm = 0.0;

  void validate() const
  {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (effective_batch < 1) throw ConfigError("effective_batch must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    if (eval_samples < 1) throw ConfigError("eval_samples must be >= 1");
    if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
  }
};

inline void to_json(nlohmann::json & j, const TrainConfig & c)
{
  j = {{"learning_rate", c.learning_rate}, {"effective_batch", c.effective_batch}, {"epochs", c.epochs},
       {"seed", c.seed},                   {"eval_every", c.eval_every},           {"eval_samples", c.eval_samples},
       {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json & j, TrainConfig & c)
{
  c = TrainConfig{};
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.effective_batch = j.value("effective_batch", c.effective_batch);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.eval_samples = j.value("eval_samples", c.eval_samples);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
}

/// SplitMix64 finalizer; derives independent stream seeds from (seed, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index)
{
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Loss of one window; gradients flow into `params`.
inline Tensor window_loss(
  const Window & w, const ModelConfig & cfg, const ModelParams & params, const Tensor & weights,
  const NormalizationSpec & spec)
{
  const auto fwd = model_forward(w, cfg, params, spec);
  return bivariate_nll(fwd.pred, future_displacements(w), weights, w.labels);
}

inline void clip_gradients(ModelParams & params, double max_norm)
{
  double sq = 0.0;
  for (const auto & p : params.all()) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double s = max_norm / norm;
  for (auto & p : params.all()) {
    for (double & g : p.tensor.mutable_grad()) g *= s;
  }
}

struct EpochStats
{
  double loss = 0.0;          ///< mean per-window loss over processed windows
  std::size_t windows = 0;
  std::size_t steps = 0;
  std::size_t skipped = 0;    ///< windows whose forward or loss failed
};

/**
 * @brief One pass over the data in a seeded per-epoch order.
 *
 * Gradients of `effective_batch` windows are summed, divided by the number of
 * windows and applied as one Adam step; a trailing partial group is flushed.
 */
inline EpochStats train_epoch(
  const std::vector<Window> & data, const ModelConfig & cfg, ModelParams & params, AdamState & state,
  const TrainConfig & tc, const Tensor & weights, std::size_t epoch, const NormalizationSpec & spec = {},
  const std::function<void(const std::string &)> & warn = {})
{
  if (data.empty()) throw ContractError("train_epoch: empty dataset");
  tc.validate();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(tc.seed, epoch));
  std::shuffle(order.begin(), order.end(), rng);

  EpochStats stats;
  std::size_t pending = 0;
  params.zero_grad();
  auto flush = [&] {
    if (pending == 0) return;
    const double inv = 1.0 / static_cast<double>(pending);
    for (auto & p : params.all()) {
      for (double & g : p.tensor.mutable_grad()) g *= inv;
    }
    if (tc.clip_norm > 0.0) clip_gradients(params, tc.clip_norm);
    adam_step(params, state, tc.learning_rate);
    params.zero_grad();
    ++stats.steps;
    pending = 0;
  };
  for (std::size_t idx : order) {
    try {
      const Tensor loss = window_loss(data[idx], cfg, params, weights, spec);
      if (!std::isfinite(loss.item())) throw DomainError("non-finite loss");
      loss.backward();
      stats.loss += loss.item();
      ++stats.windows;
      ++pending;
    } catch (const Error & e) {
      ++stats.skipped;
      if (warn) warn("skipping window " + data[idx].scene_id + "@" + std::to_string(data[idx].start_frame) + ": " + e.what());
      continue;
    }
    if (pending == tc.effective_batch) flush();
  }
  flush();
  if (stats.windows > 0) stats.loss /= static_cast<double>(stats.windows);
  return stats;
}

/**
 * @brief Sample S trajectories per window and report displacement metrics.
 *
 * Window i is sampled with seed mix_seed(seed, i), independent of evaluation order.
 */
inline MetricsReport evaluate(
  const std::vector<Window> & data, const ModelConfig & cfg, const ModelParams & params,
  const ClassVocabulary & vocab, std::size_t samples, std::uint64_t seed, const NormalizationSpec & spec = {})
{
  NoGradGuard no_grad;
  MetricsAccumulator acc(vocab);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto & w = data[i];
    const auto fwd = model_forward(w, cfg, params, spec);
    const auto st = sample_trajectories(fwd.pred, samples, mix_seed(seed, i), last_observed(w));
    acc.add(object_errors(st, future_positions(w)), w.labels);
  }
  return acc.finish(samples, seed);
}

}  // namespace semstg
