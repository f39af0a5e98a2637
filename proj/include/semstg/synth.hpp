#pragma once

#include "semstg/data.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace semstg
{

struct ClassDynamics
{
  std::string name;
  double base_speed = 4.0;  ///< px per sampled frame
  double noise = 0.3;       ///< std-dev of per-frame displacement noise, px
  double weight = 1.0;      ///< relative frequency when drawing labels
};

/// `reactor` steers its velocity toward `source` objects with the given gain per frame.
struct ClassInteraction
{
  std::string reactor;
  std::string source;
  double gain = 0.0;
};

/**
 * @brief Synthetic multi-class scene generator configuration.
 *
 * Each scene yields one window. Objects start at uniform positions in an
 * `arena`-sized square with uniform headings and move at their class base
 * speed. From frame `onset` on, every object's velocity v_i moves toward each
 * neighbour's velocity v_j by gain(class_i, class_j) * (v_j - v_i) per frame.
 * Observed displacement is velocity plus Gaussian noise.
 */
struct SynthConfig
{
  std::vector<ClassDynamics> classes;
  std::vector<ClassInteraction> interactions;
  bool interaction_enabled = true;
  std::size_t min_objects = 2;
  std::size_t max_objects = 4;
  std::size_t t_obs = 8;
  std::size_t t_pred = 12;
  std::size_t onset = 8;
  double arena = 400.0;

  /// Pedestrians align with cars once the prediction horizon starts; all classes share one speed.
  static SynthConfig interaction_default()
  {
    SynthConfig cfg;
    cfg.classes = {{"Pedestrian", 4.0, 0.3, 2.0}, {"Car", 4.0, 0.3, 1.0}, {"Biker", 4.0, 0.3, 1.0}};
    cfg.interactions = {{"Pedestrian", "Car", 0.35}};
    return cfg;
  }

  static SynthConfig null_default()
  {
    auto cfg = interaction_default();
    cfg.interaction_enabled = false;
    return cfg;
  }

  void validate(const ClassVocabulary & vocab) const
  {
    if (classes.empty()) throw ConfigError("synthetic config needs at least one class");
    if (min_objects < 1 || max_objects < min_objects) throw ConfigError("invalid object-count range");
    if (t_obs < 2 || t_pred < 1) throw ConfigError("need t_obs >= 2 and t_pred >= 1");
    double total = 0.0;
    for (const auto & c : classes) {
      vocab.index_of(c.name);
      if (c.base_speed < 0 || c.noise < 0 || c.weight < 0) throw ConfigError("negative class dynamics for " + c.name);
      total += c.weight;
    }
    if (!(total > 0)) throw ConfigError("class weights sum to zero");
    for (const auto & i : interactions) {
      class_slot(i.reactor);
      class_slot(i.source);
    }
  }

  std::size_t class_slot(const std::string & name) const
  {
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i].name == name) return i;
    }
    throw ConfigError("interaction refers to unconfigured class '" + name + "'");
  }
};

inline void to_json(nlohmann::json & j, const SynthConfig & c)
{
  j = nlohmann::json{{"interaction_enabled", c.interaction_enabled},
                     {"min_objects", c.min_objects},
                     {"max_objects", c.max_objects},
                     {"t_obs", c.t_obs},
                     {"t_pred", c.t_pred},
                     {"onset", c.onset},
                     {"arena", c.arena}};
  for (const auto & k : c.classes) {
    j["classes"].push_back({{"name", k.name}, {"base_speed", k.base_speed}, {"noise", k.noise}, {"weight", k.weight}});
  }
  j["interactions"] = nlohmann::json::array();
  for (const auto & i : c.interactions) {
    j["interactions"].push_back({{"reactor", i.reactor}, {"source", i.source}, {"gain", i.gain}});
  }
}

inline void from_json(const nlohmann::json & j, SynthConfig & c)
{
  c = SynthConfig{};
  for (const auto & k : j.at("classes")) {
    c.classes.push_back(
      {k.at("name").get<std::string>(), k.value("base_speed", 4.0), k.value("noise", 0.3), k.value("weight", 1.0)});
  }
  if (j.contains("interactions")) {
    for (const auto & i : j.at("interactions")) {
      c.interactions.push_back(
        {i.at("reactor").get<std::string>(), i.at("source").get<std::string>(), i.value("gain", 0.0)});
    }
  }
  c.interaction_enabled = j.value("interaction_enabled", true);
  c.min_objects = j.value("min_objects", std::size_t{2});
  c.max_objects = j.value("max_objects", std::size_t{4});
  c.t_obs = j.value("t_obs", std::size_t{8});
  c.t_pred = j.value("t_pred", std::size_t{12});
  c.onset = j.value("onset", c.t_obs);
  c.arena = j.value("arena", 400.0);
}

/**
 * @brief Deterministic synthetic corpus; labels and motion use separate random streams.
 *
 * With interactions disabled and equal class speeds, relabeling leaves the
 * trajectories bit-identical.
 */
inline std::vector<Window> synth_generate(
  std::uint64_t seed, std::size_t n_scenes, const SynthConfig & cfg, const ClassVocabulary & vocab)
{
  cfg.validate(vocab);
  const std::size_t nc = cfg.classes.size();
  std::vector<double> gain(nc * nc, 0.0);
  if (cfg.interaction_enabled) {
    for (const auto & i : cfg.interactions) gain[cfg.class_slot(i.reactor) * nc + cfg.class_slot(i.source)] += i.gain;
  }
  std::vector<double> class_w;
  for (const auto & c : cfg.classes) class_w.push_back(c.weight);

  std::seed_seq label_seq{seed, std::uint64_t{0x6c61626c}};
  std::seed_seq motion_seq{seed, std::uint64_t{0x6d6f7665}};
  std::mt19937_64 label_rng(label_seq);
  std::mt19937_64 motion_rng(motion_seq);
  std::discrete_distribution<std::size_t> pick_class(class_w.begin(), class_w.end());
  std::uniform_int_distribution<std::size_t> pick_count(cfg.min_objects, cfg.max_objects);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const std::size_t frames = cfg.t_obs + cfg.t_pred;
  std::vector<Window> out;
  out.reserve(n_scenes);
  for (std::size_t s = 0; s < n_scenes; ++s) {
    const std::size_t n = pick_count(motion_rng);
    std::vector<std::size_t> slot(n);
    for (auto & k : slot) k = pick_class(label_rng);

    std::vector<double> px(n), py(n), vx(n), vy(n);
    for (std::size_t i = 0; i < n; ++i) {
      px[i] = unit(motion_rng) * cfg.arena;
      py[i] = unit(motion_rng) * cfg.arena;
      const double heading = unit(motion_rng) * 2.0 * std::numbers::pi;
      vx[i] = cfg.classes[slot[i]].base_speed * std::cos(heading);
      vy[i] = cfg.classes[slot[i]].base_speed * std::sin(heading);
    }

    Window w;
    w.scene_id = "synth-" + std::to_string(seed) + "-" + std::to_string(s);
    w.start_frame = 0;
    w.t_obs = cfg.t_obs;
    w.t_pred = cfg.t_pred;
    w.positions.assign(n * frames * 2, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      w.labels.push_back(vocab.index_of(cfg.classes[slot[i]].name));
      w.track_ids.push_back(static_cast<std::int64_t>(i));
    }
    for (std::size_t t = 0; t < frames; ++t) {
      if (t >= 1 && t >= cfg.onset) {
        std::vector<double> nvx = vx, nvy = vy;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double g = gain[slot[i] * nc + slot[j]];
            if (i == j || g == 0.0) continue;
            nvx[i] += g * (vx[j] - vx[i]);
            nvy[i] += g * (vy[j] - vy[i]);
          }
        }
        vx = std::move(nvx);
        vy = std::move(nvy);
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (t >= 1) {
          const double sigma = cfg.classes[slot[i]].noise;
          px[i] += vx[i] + sigma * gauss(motion_rng);
          py[i] += vy[i] + sigma * gauss(motion_rng);
        }
        w.positions[(i * frames + t) * 2] = px[i];
        w.positions[(i * frames + t) * 2 + 1] = py[i];
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace semstg
