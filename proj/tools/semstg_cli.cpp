// semstg command-line tool: synth, prepare, train, eval, predict, plot, gradcheck.
//
// Every verb reads an optional JSON run config, applies command-line overrides,
// and writes the resolved config next to its outputs under
// <output_root>/<run>/<verb>/.

#include "semstg/semstg.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace semstg;

namespace
{

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

/// Missing or unusable input data.
struct DataError : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

/// "file:line: message" for a parse error raised while reading `file`.
DataError located(const std::string & file, const ParseError & e)
{
  std::string msg = e.what();
  const std::string prefix = "line " + std::to_string(e.line()) + ": ";
  if (msg.rfind(prefix, 0) == 0) msg.erase(0, prefix.size());
  return DataError(file + ":" + std::to_string(e.line()) + ": " + msg);
}

/// A check that ran to completion but failed a numerical threshold.
struct NumericalFailure : std::runtime_error
{
  using std::runtime_error::runtime_error;
};

json default_config()
{
  TrainConfig tc;
  json train = tc;
  train.erase("seed");
  train["checkpoint_every"] = 10;
  return {
    {"output_root", "runs"},
    {"run", "default"},
    {"seed", 0},
    {"data",
     {{"annotations", json::array()},
      {"vocabulary", ClassVocabulary::default_names()},
      {"frame_stride", 12},
      {"t_obs", 8},
      {"t_pred", 12},
      {"train_fraction", 0.7},
      {"val_fraction", 0.1}}},
    {"normalization", {{"scale", NormalizationSpec{}.scale}}},
    {"model", ModelConfig{}},
    {"train", train},
    {"eval", {{"samples", 20}, {"split", "test"}}},
    {"synth", {{"scenes", 40}, {"preset", "interaction"}}},
  };
}

json read_json_file(const std::string & path)
{
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception & e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
}

void write_json_file(const fs::path & path, const json & j)
{
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + path.string());
}

void write_text_file(const fs::path & path, const std::string & text)
{
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

std::string read_text_file(const fs::path & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <class T>
T get_or(const json & j, const char * key, const T & fallback)
{
  try {
    return j.value(key, fallback);
  } catch (const json::exception & e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

/// Resolved configuration shared by all verbs.
struct Run
{
  json config;
  fs::path root;

  fs::path dir() const { return root / config.at("run").get<std::string>(); }
  fs::path stage(const std::string & name) const { return dir() / name; }
  std::uint64_t seed() const { return config.at("seed").get<std::uint64_t>(); }

  ClassVocabulary vocabulary() const
  {
    try {
      return ClassVocabulary(config.at("data").at("vocabulary").get<std::vector<std::string>>());
    } catch (const ContractError & e) {
      throw ConfigError(e.what());
    }
  }

  NormalizationSpec normalization() const
  {
    NormalizationSpec spec;
    spec.scale = get_or(config.at("normalization"), "scale", spec.scale);
    try {
      spec.validate();
    } catch (const ContractError & e) {
      throw ConfigError(e.what());
    }
    return spec;
  }

  std::size_t t_obs() const { return get_or<std::size_t>(config.at("data"), "t_obs", 8); }
  std::size_t t_pred() const { return get_or<std::size_t>(config.at("data"), "t_pred", 12); }

  /// Persist the resolved config for a stage.
  void record(const std::string & stage_name) const { write_json_file(stage(stage_name) / "config.json", config); }
};

struct GlobalOptions
{
  std::string config_path;
  std::string output_root;
  std::string run;
  std::optional<std::uint64_t> seed;
};

Run resolve(const GlobalOptions & g, const std::function<void(json &)> & overrides)
{
  Run r;
  r.config = default_config();
  if (!g.config_path.empty()) {
    const json file = read_json_file(g.config_path);
    if (!file.is_object()) throw ConfigError("config '" + g.config_path + "' must hold a JSON object");
    r.config.merge_patch(file);
  }
  if (!g.run.empty()) r.config["run"] = g.run;
  if (g.seed) r.config["seed"] = *g.seed;
  overrides(r.config);

  // output root: flag, then environment, then config file
  if (!g.output_root.empty()) {
    r.config["output_root"] = g.output_root;
  } else if (const char * env = std::getenv("SEMSTG_OUTPUT_ROOT"); env && *env) {
    r.config["output_root"] = env;
  }
  try {
    r.root = r.config.at("output_root").get<std::string>();
    r.seed();
    if (r.config.at("run").get<std::string>().empty()) throw ConfigError("run name must not be empty");
  } catch (const json::exception & e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// synth

SynthConfig synth_config_for(const Run & run)
{
  const json & s = run.config.at("synth");
  SynthConfig sc;
  if (s.contains("config") && !s.at("config").is_null()) {
    try {
      sc = s.at("config").get<SynthConfig>();
    } catch (const json::exception & e) {
      throw ConfigError(std::string("synth.config: ") + e.what());
    }
  } else {
    const auto preset = get_or<std::string>(s, "preset", "interaction");
    if (preset == "interaction") {
      sc = SynthConfig::interaction_default();
    } else if (preset == "null") {
      sc = SynthConfig::null_default();
    } else {
      throw ConfigError("synth.preset must be 'interaction' or 'null', got '" + preset + "'");
    }
  }
  sc.t_obs = run.t_obs();
  sc.t_pred = run.t_pred();
  return sc;
}

int cmd_synth(const Run & run)
{
  const auto vocab = run.vocabulary();
  const SynthConfig sc = synth_config_for(run);
  const auto scenes = get_or<std::size_t>(run.config.at("synth"), "scenes", 40);
  if (scenes < 1) throw ConfigError("synth.scenes must be >= 1");
  const auto stride = get_or<std::int64_t>(run.config.at("data"), "frame_stride", 12);
  if (stride < 1) throw ConfigError("data.frame_stride must be >= 1");
  try {
    sc.validate(vocab);
  } catch (const VocabularyError & e) {
    throw ConfigError(std::string("synth classes: ") + e.what());
  }

  const auto windows = synth_generate(run.seed(), scenes, sc, vocab);
  const fs::path dir = run.stage("synth") / "annotations";
  fs::remove_all(dir);
  fs::create_directories(dir);
  constexpr double half_box = 5.0;
  for (const auto & w : windows) {
    std::vector<RawAnnotation> rows;
    for (std::size_t i = 0; i < w.num_objects(); ++i) {
      for (std::size_t t = 0; t < w.num_frames(); ++t) {
        RawAnnotation a;
        a.track_id = w.track_ids.empty() ? static_cast<std::int64_t>(i) : w.track_ids[i];
        a.xmin = w.x(i, t) - half_box;
        a.xmax = w.x(i, t) + half_box;
        a.ymin = w.y(i, t) - half_box;
        a.ymax = w.y(i, t) + half_box;
        a.frame = static_cast<std::int64_t>(t) * stride;
        a.label = vocab.name(w.labels[i]);
        rows.push_back(a);
      }
    }
    std::ostringstream os;
    write_sdd_annotations(os, rows);
    write_text_file(dir / (w.scene_id + ".txt"), os.str());
  }
  write_json_file(run.stage("synth") / "synth_config.json", json{{"seed", run.seed()}, {"scenes", scenes}, {"config", sc}});
  run.record("synth");
  std::cout << "synth: wrote " << windows.size() << " scenes to " << dir.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// prepare

struct AnnotationFile
{
  fs::path path;
  std::string scene;
};

std::string scene_name(const fs::path & rel)
{
  fs::path p = rel;
  p.replace_extension();
  return p.generic_string();
}

std::vector<AnnotationFile> find_annotation_files(const std::vector<std::string> & inputs)
{
  std::vector<AnnotationFile> files;
  for (const auto & in : inputs) {
    const fs::path p(in);
    if (!fs::exists(p)) throw DataError("annotation path '" + in + "' does not exist");
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto & e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() == ".txt") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      for (const auto & f : found) files.push_back({f, scene_name(fs::relative(f, p))});
    } else {
      files.push_back({p, scene_name(p.filename())});
    }
  }
  if (files.empty()) throw DataError("no annotation files found");
  return files;
}

int cmd_prepare(const Run & run, bool force)
{
  const auto vocab = run.vocabulary();
  const json & data = run.config.at("data");
  auto inputs = get_or<std::vector<std::string>>(data, "annotations", {});
  if (inputs.empty()) {
    const fs::path synth_dir = run.stage("synth") / "annotations";
    if (!fs::exists(synth_dir)) {
      throw DataError("no annotation inputs given and " + synth_dir.string() + " does not exist (run 'synth' first)");
    }
    inputs.push_back(synth_dir.string());
  }
  const auto stride = get_or<std::int64_t>(data, "frame_stride", 12);
  if (stride < 1) throw ConfigError("data.frame_stride must be >= 1");
  const std::size_t t_obs = run.t_obs(), t_pred = run.t_pred();
  if (t_obs < 2 || t_pred < 1) throw ConfigError("data needs t_obs >= 2 and t_pred >= 1");

  const auto files = find_annotation_files(inputs);
  std::vector<std::string> contents;
  json key{{"frame_stride", stride}, {"t_obs", t_obs}, {"t_pred", t_pred}, {"vocabulary", vocab.names()}};
  key["files"] = json::array();
  for (const auto & f : files) {
    contents.push_back(read_text_file(f.path));
    key["files"].push_back({{"scene", f.scene}, {"fnv1a64", hex64(fnv1a64(contents.back()))}});
  }

  const fs::path out = run.stage("prepare");
  const fs::path cache_path = out / "windows.jsonl";
  run.record("prepare");
  if (!force && fs::exists(cache_path)) {
    try {
      const auto cached = load_window_cache(cache_path.string());
      if (cached.key == key) {
        std::cout << "prepare: cache hit (" << cached.windows.size() << " windows) " << cache_path.string() << '\n';
        return kOk;
      }
    } catch (const Error &) {
      // unreadable cache: rebuild it
    }
  }

  WindowCache cache{key, vocab.names(), {}};
  json per_scene = json::object();
  std::vector<std::size_t> per_class(vocab.size(), 0);
  std::size_t objects = 0;
  for (std::size_t k = 0; k < files.size(); ++k) {
    std::vector<RawAnnotation> rows;
    try {
      rows = parse_sdd_annotations(contents[k], vocab);
    } catch (const ParseError & e) {
      throw located(files[k].path.string(), e);
    } catch (const VocabularyError & e) {
      throw VocabularyError(files[k].path.string() + ": " + e.what());
    }
    auto windows = build_windows(rows, vocab, files[k].scene, stride, t_obs, t_pred);
    per_scene[files[k].scene] = windows.size();
    for (auto & w : windows) {
      for (auto l : w.labels) ++per_class[l];
      objects += w.num_objects();
      cache.windows.push_back(std::move(w));
    }
  }
  if (cache.windows.empty()) throw DataError("annotations produced no complete windows");

  save_window_cache(cache_path.string(), cache);
  json classes = json::object();
  for (std::size_t c = 0; c < vocab.size(); ++c) classes[vocab.name(c)] = per_class[c];
  write_json_file(
    out / "summary.json", {{"seed", run.seed()},
                           {"files", files.size()},
                           {"windows", cache.windows.size()},
                           {"objects", objects},
                           {"windows_per_scene", per_scene},
                           {"objects_per_class", classes},
                           {"cache_key", key}});
  std::cout << "prepare: " << cache.windows.size() << " windows from " << files.size() << " files -> "
            << cache_path.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train / eval / predict

WindowCache load_prepared(const Run & run)
{
  const fs::path p = run.stage("prepare") / "windows.jsonl";
  if (!fs::exists(p)) throw DataError("window cache " + p.string() + " not found (run 'prepare' first)");
  auto cache = load_window_cache(p.string());
  if (cache.vocabulary != run.vocabulary().names()) {
    throw VocabularyError("window cache vocabulary differs from the configured vocabulary");
  }
  return cache;
}

DatasetSplit split_for(const Run & run, const std::vector<Window> & windows)
{
  const json & data = run.config.at("data");
  const double tf = get_or(data, "train_fraction", 0.7), vf = get_or(data, "val_fraction", 0.1);
  if (tf < 0 || vf < 0 || tf + vf > 1.0) throw ConfigError("data split fractions must be >= 0 and sum to <= 1");
  return split_by_scene(windows, run.seed(), tf, vf);
}

std::vector<Window> select_split(const Run & run, const std::vector<Window> & windows, const std::string & name)
{
  if (name == "all") return windows;
  auto s = split_for(run, windows);
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("split must be train, val, test or all; got '" + name + "'");
}

int cmd_train(const Run & run, bool resume)
{
  const auto vocab = run.vocabulary();
  const auto cache = load_prepared(run);
  const auto split = split_for(run, cache.windows);
  if (split.train.empty()) throw DataError("training split is empty");

  ModelConfig cfg;
  TrainConfig tc;
  std::size_t checkpoint_every = 0;
  try {
    cfg = run.config.at("model").get<ModelConfig>();
    tc = run.config.at("train").get<TrainConfig>();
    checkpoint_every = run.config.at("train").value("checkpoint_every", std::size_t{0});
  } catch (const json::exception & e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.num_classes = vocab.size();
  cfg.t_obs = run.t_obs();
  cfg.t_pred = run.t_pred();
  tc.seed = run.seed();

  const fs::path out = run.stage("train");
  run.record("train");
  json scenes{{"train", json::array()}, {"val", json::array()}, {"test", json::array()}};
  for (const auto & [name, part] : {std::pair{"train", &split.train}, {"val", &split.val}, {"test", &split.test}}) {
    std::vector<std::string> ids;
    for (const auto & w : *part) ids.push_back(w.scene_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    scenes[name] = ids;
  }
  write_json_file(out / "split.json", {{"seed", run.seed()}, {"scenes", scenes}});
  if (split.val.empty()) std::cerr << "train: validation split is empty; selecting the best epoch by training loss\n";

  FitOptions opts;
  opts.out_dir = out.string();
  opts.resume = resume;
  opts.checkpoint_every = checkpoint_every;
  opts.warn = [](const std::string & m) { std::cerr << "warning: " << m << '\n'; };
  opts.on_epoch = [&](const json & rec) {
    std::cout << "epoch " << rec.at("epoch") << "/" << tc.epochs << " loss " << rec.at("loss").get<double>();
    if (rec.contains("val_aade")) std::cout << " val_aade " << rec.at("val_aade").get<double>();
    if (rec.contains("best")) std::cout << " *";
    std::cout << '\n';
  };
  const auto result = fit(split.train, split.val, cfg, tc, vocab, run.seed(), run.normalization(), opts);
  write_json_file(
    out / "summary.json", {{"seed", run.seed()},
                           {"epochs", tc.epochs},
                           {"start_epoch", result.start_epoch},
                           {"train_windows", split.train.size()},
                           {"val_windows", split.val.size()},
                           {"parameters", param_count(result.last.params)},
                           {"semantic", cfg.semantic},
                           {"best", result.best.train_state}});
  std::cout << "train: checkpoints in " << (out / "checkpoints").string() << '\n';
  return kOk;
}

Checkpoint load_checkpoint_for(const Run & run, const std::string & path)
{
  const fs::path p = path.empty() ? run.stage("train") / "checkpoints" / "best.ckpt" : fs::path(path);
  if (!fs::exists(p)) throw DataError("checkpoint " + p.string() + " not found");
  auto ck = load_checkpoint(p.string());
  if (ck.vocabulary != run.vocabulary().names()) {
    throw VocabularyError("checkpoint vocabulary differs from the dataset vocabulary");
  }
  return ck;
}

std::uint64_t eval_seed(const Run & run)
{
  return get_or<std::uint64_t>(run.config.at("eval"), "seed", run.seed());
}

std::size_t eval_samples(const Run & run)
{
  const auto s = get_or<std::size_t>(run.config.at("eval"), "samples", 20);
  if (s < 1) throw ConfigError("eval.samples must be >= 1");
  return s;
}

int cmd_eval(const Run & run, const std::string & checkpoint)
{
  const auto vocab = run.vocabulary();
  const auto ck = load_checkpoint_for(run, checkpoint);
  const auto cache = load_prepared(run);
  const auto split_name = get_or<std::string>(run.config.at("eval"), "split", "test");
  const auto data = select_split(run, cache.windows, split_name);
  if (data.empty()) throw DataError("split '" + split_name + "' has no windows");

  const std::size_t samples = eval_samples(run);
  const std::uint64_t seed = eval_seed(run);
  const auto report = evaluate(data, ck.model, ck.params, vocab, samples, seed, ck.normalization);

  const fs::path out = run.stage("eval");
  run.record("eval");
  json j = report_to_json(report);
  j["split"] = split_name;
  j["windows"] = data.size();
  j["checkpoint"] = checkpoint.empty() ? "best" : checkpoint;
  j["checkpoint_epoch"] = ck.train_state.value("epoch", 0);
  write_json_file(out / "metrics.json", j);
  std::ostringstream wide, lng;
  write_per_class_table(wide, {{ck.model.semantic ? "semantic" : "label-blind", report}}, vocab);
  write_metrics_long(lng, report);
  write_text_file(out / "per_class.csv", wide.str());
  write_text_file(out / "metrics_long.csv", lng.str());
  std::cout << "eval (" << split_name << ", " << data.size() << " windows, S=" << samples << ", seed " << seed
            << "): mADE " << report.overall.made << " mFDE " << report.overall.mfde << " aADE " << report.overall.aade
            << " aFDE " << report.overall.afde << '\n';
  return kOk;
}

std::size_t resolve_selector(const std::string & sel, const std::vector<Window> & windows)
{
  const auto at = sel.find('@');
  if (at == std::string::npos) {
    std::size_t idx = 0;
    const auto [ptr, ec] = std::from_chars(sel.data(), sel.data() + sel.size(), idx);
    if (ec == std::errc() && ptr == sel.data() + sel.size() && idx < windows.size()) return idx;
  } else {
    const std::string scene = sel.substr(0, at), frame = sel.substr(at + 1);
    for (std::size_t i = 0; i < windows.size(); ++i) {
      if (windows[i].scene_id == scene && std::to_string(windows[i].start_frame) == frame) return i;
    }
  }
  std::ostringstream msg;
  msg << "window selector '" << sel << "' matches nothing; available windows (index scene@start_frame):";
  constexpr std::size_t kListed = 50;
  for (std::size_t i = 0; i < std::min(windows.size(), kListed); ++i) {
    msg << "\n  " << i << ' ' << windows[i].scene_id << '@' << windows[i].start_frame;
  }
  if (windows.size() > kListed) msg << "\n  ... " << windows.size() - kListed << " more";
  throw DataError(msg.str());
}

void write_graph_dump(const fs::path & path, const Window & w, const Checkpoint & ck)
{
  NoGradGuard g;
  const Tensor vam = build_vam(to_velocities(w, ck.normalization));
  Tensor lam, sam;
  if (ck.model.semantic) {
    lam = reduce_lam(
      build_intersection(one_hot_labels(w, ck.model.num_classes)),
      {ck.params.get("lam.reduce.weight"), ck.params.get("lam.reduce.bias")});
    sam = fuse_sam(vam, lam, {ck.params.get("sam.fuse.weight"), ck.params.get("sam.fuse.bias")});
  }
  const Tensor a_hat = window_graph(w, ck.model, ck.params, ck.normalization);
  const std::size_t n = w.num_objects();
  std::ostringstream os;
  os << "t,i,j,vam,lam,sam,a_hat\n" << std::setprecision(17);
  for (std::size_t t = 0; t < w.t_obs; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t k = (t * n + i) * n + j;
        os << t << ',' << i << ',' << j << ',' << vam.values()[k] << ',';
        if (lam.defined()) os << lam.values()[i * n + j] << ',' << sam.values()[k];
        else os << ',';
        os << ',' << a_hat.values()[k] << '\n';
      }
    }
  }
  write_text_file(path, os.str());
}

int cmd_predict(const Run & run, const std::string & checkpoint, std::vector<std::string> selectors, bool dump_graph)
{
  const auto vocab = run.vocabulary();
  const auto ck = load_checkpoint_for(run, checkpoint);
  const auto cache = load_prepared(run);
  if (selectors.empty()) selectors.push_back("0");
  std::vector<std::size_t> picked;
  for (const auto & s : selectors) picked.push_back(resolve_selector(s, cache.windows));

  const std::size_t samples = eval_samples(run);
  const std::uint64_t seed = eval_seed(run);
  const fs::path out = run.stage("predict");
  run.record("predict");
  NoGradGuard no_grad;
  for (const auto idx : picked) {
    const Window & w = cache.windows[idx];
    const auto fwd = model_forward(w, ck.model, ck.params, ck.normalization);
    const auto st = sample_trajectories(fwd.pred, samples, mix_seed(seed, idx), last_observed(w));
    auto dump = make_prediction_dump(w, fwd.pred, st, vocab, idx);
    dump.meta.emplace_back("run_seed", std::to_string(run.seed()));
    std::ostringstream os;
    write_prediction_dump(os, dump);
    const fs::path p = out / ("window_" + std::to_string(idx) + ".csv");
    write_text_file(p, os.str());
    if (dump_graph) write_graph_dump(out / ("window_" + std::to_string(idx) + "_graph.csv"), w, ck);
    std::cout << "predict: " << p.string() << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// plot / gradcheck

int cmd_plot(const Run & run, std::vector<std::string> dumps, bool samples)
{
  if (dumps.empty()) {
    const fs::path dir = run.stage("predict");
    if (fs::exists(dir)) {
      for (const auto & e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("window_", 0) == 0 && e.path().extension() == ".csv" && name.find("_graph") == std::string::npos) {
          dumps.push_back(e.path().string());
        }
      }
    }
    std::sort(dumps.begin(), dumps.end());
    if (dumps.empty()) throw DataError("no prediction dumps found in " + dir.string() + " (run 'predict' first)");
  }
  const fs::path out = run.stage("plot");
  run.record("plot");
  for (const auto & d : dumps) {
    std::ifstream in(d);
    if (!in) throw DataError("cannot read prediction dump " + d);
    PredictionDump dump;
    try {
      dump = read_prediction_dump(in);
    } catch (const ParseError & e) {
      throw located(d, e);
    }
    const fs::path p = out / fs::path(d).filename().replace_extension(".svg");
    write_text_file(p, render_svg(dump, samples));
    std::cout << "plot: " << p.string() << '\n';
  }
  return kOk;
}

/// Test fixture: a unary op whose backward rule is off by 10%.
GradCheckCase corrupted_case(const std::string & op, std::uint64_t seed)
{
  static const std::map<std::string, std::pair<std::function<double(double)>, std::function<double(double, double)>>>
    ops{
      {"exp", {[](double x) { return std::exp(x); }, [](double, double y) { return y; }}},
      {"tanh", {[](double x) { return std::tanh(x); }, [](double, double y) { return 1 - y * y; }}},
      {"square", {[](double x) { return x * x; }, [](double x, double) { return 2 * x; }}},
      {"log", {[](double x) { return std::log(x); }, [](double x, double) { return 1 / x; }}},
      {"sqrt", {[](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; }}},
    };
  const auto it = ops.find(op);
  if (it == ops.end()) throw ConfigError("--corrupt-op supports exp, tanh, square, log, sqrt; got '" + op + "'");
  const auto [fn, df] = it->second;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  std::vector<double> pt(5);
  for (double & v : pt) v = u(rng);
  ScalarFn f = [op, fn, df](const Tensor & x) {
    return sum(map_unary(x, op, fn, [df](double a, double y) { return 1.1 * df(a, y); }));
  };
  return {op, f, Tensor::from_values({5}, pt)};
}

int cmd_gradcheck(const Run & run, std::size_t points, const std::string & corrupt_op, bool include_model)
{
  constexpr double kStep = 1e-5;
  constexpr double kThreshold = 1e-4;
  if (points < 1) throw ConfigError("--points must be >= 1");
  const auto t0 = std::chrono::steady_clock::now();
  auto cases = gradcheck_cases(run.seed(), points, include_model);
  if (!corrupt_op.empty()) {
    auto fault = corrupted_case(corrupt_op, run.seed());
    std::erase_if(cases, [&](const GradCheckCase & c) { return c.name == fault.name; });
    cases.push_back(std::move(fault));
  }
  const auto outcomes = run_gradcheck_suite(cases, kStep, kThreshold);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json ops = json::array();
  std::vector<std::string> failed;
  for (const auto & o : outcomes) {
    json e{{"op", o.name}, {"max_rel_error", o.max_rel_error}, {"passed", o.passed}};
    if (!o.error.empty()) e["error"] = o.error;
    ops.push_back(e);
    std::cout << (o.passed ? "ok   " : "FAIL ") << o.name << " max_rel_error " << o.max_rel_error;
    if (!o.error.empty()) std::cout << " (" << o.error << ")";
    std::cout << '\n';
    if (!o.passed) failed.push_back(o.name);
  }
  run.record("gradcheck");
  write_json_file(
    run.stage("gradcheck") / "report.json", {{"seed", run.seed()},
                                             {"step", kStep},
                                             {"threshold", kThreshold},
                                             {"points_per_op", points},
                                             {"corrupt_op", corrupt_op},
                                             {"passed", failed.empty()},
                                             {"runtime_s", secs},
                                             {"ops", ops}});
  if (!failed.empty()) {
    std::string names;
    for (const auto & n : failed) names += (names.empty() ? "" : ", ") + n;
    throw NumericalFailure("gradient check failed for: " + names);
  }
  std::cout << "gradcheck: all " << outcomes.size() << " ops pass (" << secs << " s)\n";
  return kOk;
}

int exit_code_for(const std::exception & e)
{
  if (dynamic_cast<const ConfigError *>(&e) || dynamic_cast<const ContractError *>(&e)) return kUsage;
  if (dynamic_cast<const DomainError *>(&e) || dynamic_cast<const NumericalFailure *>(&e)) return kNumerical;
  if (dynamic_cast<const ParseError *>(&e) || dynamic_cast<const VocabularyError *>(&e) ||
      dynamic_cast<const FormatError *>(&e) || dynamic_cast<const ShapeError *>(&e) ||
      dynamic_cast<const DataError *>(&e) || dynamic_cast<const fs::filesystem_error *>(&e)) {
    return kData;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"Semantic spatio-temporal graph trajectory predictor"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  std::uint64_t seed_value = 0;
  app.add_option("-c,--config", g.config_path, "JSON run config");
  app.add_option("--output-root", g.output_root, "Output root (overrides SEMSTG_OUTPUT_ROOT and the config)");
  app.add_option("--run", g.run, "Run name; outputs go to <output-root>/<run>");
  auto * seed_opt = app.add_option("--seed", seed_value, "Seed for data split, init, training and sampling");

  // synth
  auto * synth = app.add_subcommand("synth", "Generate a synthetic annotation corpus");
  std::optional<std::size_t> synth_scenes;
  std::string synth_preset, synth_config;
  synth->add_option("--scenes", synth_scenes, "Number of scenes (one window each)");
  synth->add_option("--preset", synth_preset, "interaction or null")->check(CLI::IsMember({"interaction", "null"}));
  synth->add_option("--synth-config", synth_config, "JSON synthetic dynamics config")->check(CLI::ExistingFile);

  // prepare
  auto * prepare = app.add_subcommand("prepare", "Parse annotations into a window cache");
  std::vector<std::string> prep_inputs;
  std::optional<std::int64_t> prep_stride;
  bool prep_force = false;
  prepare->add_option("inputs", prep_inputs, "Annotation files or directories");
  prepare->add_option("--stride", prep_stride, "Frame stride between sampled frames");
  prepare->add_flag("--force", prep_force, "Rebuild the cache even if inputs are unchanged");

  // train
  auto * train = app.add_subcommand("train", "Train a model on the prepared cache");
  std::optional<std::size_t> tr_epochs, tr_batch, tr_ckpt_every;
  std::optional<double> tr_lr, tr_clip;
  std::string tr_ablation;
  bool tr_resume = false;
  train->add_option("--epochs", tr_epochs);
  train->add_option("--lr", tr_lr, "Learning rate");
  train->add_option("--batch", tr_batch, "Effective batch size (windows per update)");
  train->add_option("--clip-norm", tr_clip, "Max global gradient norm (0 disables)");
  train->add_option("--checkpoint-every", tr_ckpt_every, "Keep a periodic checkpoint every N epochs (0 disables)");
  train->add_option("--ablation", tr_ablation, "label-blind trains the velocity-graph-only model")
    ->check(CLI::IsMember({"none", "label-blind"}));
  train->add_flag("--resume", tr_resume, "Continue from checkpoints/latest.ckpt");

  // eval / predict
  auto * eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_split;
  std::optional<std::size_t> ev_samples;
  eval->add_option("--checkpoint", ev_ckpt, "Checkpoint path (default: <run>/train/checkpoints/best.ckpt)");
  eval->add_option("--split", ev_split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval->add_option("--samples", ev_samples, "Samples per object (S)");

  auto * predict = app.add_subcommand("predict", "Write prediction dumps for selected windows");
  std::string pr_ckpt;
  std::vector<std::string> pr_windows;
  std::optional<std::size_t> pr_samples;
  bool pr_graph = false;
  predict->add_option("--checkpoint", pr_ckpt, "Checkpoint path (default: best.ckpt of the run)");
  predict->add_option("-w,--window", pr_windows, "Window index or scene@start_frame (repeatable)");
  predict->add_option("--samples", pr_samples, "Samples per object (S)");
  predict->add_flag("--dump-graph", pr_graph, "Also write VAM/LAM/SAM/A_hat per window as CSV");

  // plot / gradcheck
  auto * plot = app.add_subcommand("plot", "Render prediction dumps as SVG");
  std::vector<std::string> pl_dumps;
  bool pl_no_samples = false;
  plot->add_option("dumps", pl_dumps, "Prediction dump CSV files (default: all dumps of the run)");
  plot->add_flag("--no-samples", pl_no_samples, "Omit sampled paths");

  auto * gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  std::size_t gc_points = 3;
  std::string gc_corrupt;
  bool gc_no_model = false;
  gradcheck->add_option("--points", gc_points, "Random points per op");
  gradcheck->add_option("--corrupt-op", gc_corrupt, "Test fixture: replace OP with a copy whose backward is wrong");
  gradcheck->add_flag("--no-model", gc_no_model, "Skip the full-model NLL check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError & e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    auto overrides = [&](json & c) {
      if (synth_scenes) c["synth"]["scenes"] = *synth_scenes;
      if (!synth_preset.empty()) {
        c["synth"]["preset"] = synth_preset;
        c["synth"].erase("config");
      }
      if (!synth_config.empty()) c["synth"]["config"] = read_json_file(synth_config);
      if (!prep_inputs.empty()) c["data"]["annotations"] = prep_inputs;
      if (prep_stride) c["data"]["frame_stride"] = *prep_stride;
      if (tr_epochs) c["train"]["epochs"] = *tr_epochs;
      if (tr_lr) c["train"]["learning_rate"] = *tr_lr;
      if (tr_batch) c["train"]["effective_batch"] = *tr_batch;
      if (tr_clip) c["train"]["clip_norm"] = *tr_clip;
      if (tr_ckpt_every) c["train"]["checkpoint_every"] = *tr_ckpt_every;
      if (!tr_ablation.empty()) c["model"]["semantic"] = tr_ablation != "label-blind";
      if (!ev_split.empty()) c["eval"]["split"] = ev_split;
      if (ev_samples) c["eval"]["samples"] = *ev_samples;
      if (pr_samples) c["eval"]["samples"] = *pr_samples;
    };
    const Run run = resolve(g, overrides);

    if (synth->parsed()) return cmd_synth(run);
    if (prepare->parsed()) return cmd_prepare(run, prep_force);
    if (train->parsed()) return cmd_train(run, tr_resume);
    if (eval->parsed()) return cmd_eval(run, ev_ckpt);
    if (predict->parsed()) return cmd_predict(run, pr_ckpt, pr_windows, pr_graph);
    if (plot->parsed()) return cmd_plot(run, pl_dumps, !pl_no_samples);
    if (gradcheck->parsed()) return cmd_gradcheck(run, gc_points, gc_corrupt, !gc_no_model);
    return kUsage;
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}
