#pragma once

#include "semstg/checkpoint.hpp"
#include "semstg/data.hpp"
#include "semstg/train.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

/**
 * @file session.hpp
 * @brief Multi-epoch training with validation-based model selection,
 * checkpoint files and resume support.
 */

namespace semstg
{

struct FitOptions
{
  /// Directory for latest/best/periodic checkpoints and log.jsonl; empty keeps everything in memory.
  std::string out_dir;
  bool resume = false;
  /// Keep an epoch_NNNN checkpoint every this many epochs; 0 disables.
  std::size_t checkpoint_every = 0;
  std::function<void(const std::string &)> warn;
  /// Called after every epoch with its log record.
  std::function<void(const nlohmann::json &)> on_epoch;
};

struct FitResult
{
  Checkpoint last;
  Checkpoint best;
  std::vector<nlohmann::json> history;  ///< log records of the epochs run in this call
  std::size_t start_epoch = 0;
};

namespace detail
{

inline void write_atomically(const std::filesystem::path & path, const Checkpoint & c)
{
  const auto tmp = path.string() + ".tmp";
  save_checkpoint(tmp, c);
  std::filesystem::rename(tmp, path);
}

inline std::string epoch_name(std::size_t epoch)
{
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%04zu.ckpt", epoch);
  return buf;
}

}  // namespace detail

/**
 * @brief Train for tc.epochs epochs, evaluating every tc.eval_every epochs.
 *
 * The selection score is validation aADE, or the epoch training loss when
 * `val` is empty; the best-scoring state is kept as `best`. With
 * opts.resume and an existing latest.ckpt in opts.out_dir, training continues
 * from the stored epoch and reproduces an uninterrupted run.
 */
inline FitResult fit(
  const std::vector<Window> & train, const std::vector<Window> & val, const ModelConfig & cfg, const TrainConfig & tc,
  const ClassVocabulary & vocab, std::uint64_t init_seed, const NormalizationSpec & spec = {},
  const FitOptions & opts = {})
{
  namespace fs = std::filesystem;
  tc.validate();
  cfg.validate();
  if (cfg.num_classes != vocab.size()) {
    throw ConfigError(
      "model num_classes " + std::to_string(cfg.num_classes) + " does not match vocabulary size " +
      std::to_string(vocab.size()));
  }
  if (train.empty()) throw ContractError("fit: training split is empty");
  const Tensor weights = class_weights(train, vocab);

  FitResult r;
  Checkpoint & cur = r.last;
  cur.model = cfg;
  cur.normalization = spec;
  cur.vocabulary = vocab.names();
  double best_score = std::numeric_limits<double>::infinity();

  const fs::path dir = opts.out_dir;
  const bool on_disk = !opts.out_dir.empty();
  if (on_disk) fs::create_directories(dir / "checkpoints");
  const fs::path latest = dir / "checkpoints" / "latest.ckpt";
  const fs::path best_path = dir / "checkpoints" / "best.ckpt";

  if (on_disk && opts.resume && fs::exists(latest)) {
    cur = load_checkpoint(latest.string());
    if (!(cur.model == cfg)) throw ConfigError("resume: checkpoint model config differs from the requested one");
    if (cur.vocabulary != vocab.names()) throw ConfigError("resume: checkpoint vocabulary differs from the dataset's");
    r.start_epoch = cur.train_state.at("epoch").get<std::size_t>();
    best_score = cur.train_state.value("best_score", best_score);
    r.best = fs::exists(best_path) ? load_checkpoint(best_path.string()) : cur;
    if (!fs::exists(best_path)) r.best.params = cur.params.clone();
  } else {
    cur.params = ModelParams::init(cfg, init_seed);
    cur.adam = AdamState::for_params(cur.params);
    cur.train_state = {{"epoch", 0}, {"init_seed", init_seed}, {"train", tc}};
    r.best = cur;
    r.best.params = cur.params.clone();
  }

  std::ofstream log;
  if (on_disk) log.open(dir / "log.jsonl", r.start_epoch > 0 ? std::ios::app : std::ios::trunc);

  for (std::size_t epoch = r.start_epoch; epoch < tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto stats = train_epoch(train, cfg, cur.params, cur.adam, tc, weights, epoch, spec, opts.warn);
    if (stats.windows == 0) throw DomainError("epoch " + std::to_string(epoch + 1) + ": no window produced a finite loss");

    nlohmann::json rec{{"epoch", epoch + 1},       {"loss", stats.loss},       {"windows", stats.windows},
                       {"skipped", stats.skipped}, {"steps", stats.steps},     {"seed", tc.seed}};
    const bool eval_now = (epoch + 1) % tc.eval_every == 0 || epoch + 1 == tc.epochs;
    std::optional<double> score;
    if (eval_now) {
      if (!val.empty()) {
        const auto rep = evaluate(val, cfg, cur.params, vocab, tc.eval_samples, tc.seed, spec);
        rec["val_made"] = rep.overall.made;
        rec["val_mfde"] = rep.overall.mfde;
        rec["val_aade"] = rep.overall.aade;
        rec["val_afde"] = rep.overall.afde;
        score = rep.overall.aade;
      } else {
        score = stats.loss;
      }
    }
    const bool improved = score && *score < best_score;
    if (improved) best_score = *score;
    cur.train_state = {{"epoch", epoch + 1},
                       {"init_seed", init_seed},
                       {"train", tc},
                       {"best_score", best_score},
                       {"selection", val.empty() ? "train_loss" : "val_aade"}};
    if (improved) {
      r.best = cur;
      r.best.params = cur.params.clone();
      rec["best"] = true;
      if (on_disk) detail::write_atomically(best_path, r.best);
    }
    if (on_disk) {
      detail::write_atomically(latest, cur);
      if (opts.checkpoint_every > 0 && (epoch + 1) % opts.checkpoint_every == 0) {
        save_checkpoint((dir / "checkpoints" / detail::epoch_name(epoch + 1)).string(), cur);
      }
    }
    rec["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (log.is_open()) log << rec.dump() << '\n' << std::flush;
    if (opts.on_epoch) opts.on_epoch(rec);
    r.history.push_back(std::move(rec));
  }
  return r;
}

}  // namespace semstg
