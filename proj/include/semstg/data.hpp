#pragma once

#include "semstg/errors.hpp"
#include "semstg/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace semstg
{

/**
 * @brief Ordered class names; the one-hot index of a class is its position.
 */
class ClassVocabulary
{
public:
  ClassVocabulary() : ClassVocabulary(default_names()) {}

  explicit ClassVocabulary(std::vector<std::string> names) : names_(std::move(names))
  {
    if (names_.empty()) {
      throw ContractError("class vocabulary must hold at least one class");
    }
    std::set<std::string> folded;
    for (const auto & n : names_) {
      if (!folded.insert(fold(n)).second) {
        throw ContractError("duplicate class name '" + n + "' in vocabulary");
      }
    }
  }

  static std::vector<std::string> default_names()
  {
    return {"Biker", "Pedestrian", "Car", "Bus", "Skater", "Cart"};
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string> & names() const noexcept { return names_; }
  const std::string & name(std::size_t index) const { return names_.at(index); }

  /// Case-insensitive lookup; throws VocabularyError for unknown labels.
  std::size_t index_of(std::string_view label) const
  {
    const auto key = fold(label);
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (fold(names_[i]) == key) return i;
    }
    throw VocabularyError("unknown class label '" + std::string(label) + "'");
  }

  /// Canonical spelling of a label.
  const std::string & canonical(std::string_view label) const { return names_[index_of(label)]; }

  bool operator==(const ClassVocabulary & other) const { return names_ == other.names_; }

private:
  static std::string fold(std::string_view s)
  {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
  }

  std::vector<std::string> names_;
};

/// One row of an SDD-style annotations.txt.
struct RawAnnotation
{
  std::int64_t track_id = 0;
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
  std::int64_t frame = 0;
  bool lost = false;
  bool occluded = false;
  bool generated = false;
  std::string label;

  bool operator==(const RawAnnotation &) const = default;
};

struct NormalizationSpec
{
  double scale = 10.0;

  void validate() const
  {
    if (!(scale > 0.0) || !std::isfinite(scale)) {
      throw ContractError("normalization scale must be positive and finite");
    }
  }
};

/**
 * @brief One sample: N objects tracked over t_obs + t_pred sampled frames.
 *
 * positions is row-major [N, t_obs + t_pred, 2] in pixels; labels are class
 * indices into the vocabulary the window was built with.
 */
struct Window
{
  std::vector<double> positions;
  std::vector<std::size_t> labels;
  std::vector<std::int64_t> track_ids;
  std::string scene_id;
  std::int64_t start_frame = 0;
  std::size_t t_obs = 8;
  std::size_t t_pred = 12;

  std::size_t num_objects() const noexcept { return labels.size(); }
  std::size_t num_frames() const noexcept { return t_obs + t_pred; }

  double x(std::size_t n, std::size_t t) const { return positions[(n * num_frames() + t) * 2]; }
  double y(std::size_t n, std::size_t t) const { return positions[(n * num_frames() + t) * 2 + 1]; }

  void validate() const
  {
    if (labels.empty()) throw ContractError("window has no objects");
    if (t_obs < 2 || t_pred < 1) throw ContractError("window needs t_obs >= 2 and t_pred >= 1");
    if (positions.size() != labels.size() * num_frames() * 2) {
      throw ShapeError(
        "window positions hold " + std::to_string(positions.size()) + " values, expected " +
        std::to_string(labels.size() * num_frames() * 2));
    }
    if (!track_ids.empty() && track_ids.size() != labels.size()) {
      throw ShapeError("window track_ids do not match object count");
    }
    for (double v : positions) {
      if (!std::isfinite(v)) throw DomainError("non-finite position in window");
    }
  }

  bool operator==(const Window &) const = default;
};

namespace detail
{

inline std::vector<std::string_view> split_ws(std::string_view line)
{
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    if (line[i] == '"') {
      j = line.find('"', i + 1);
      j = j == std::string_view::npos ? line.size() : j + 1;
    } else {
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    }
    out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <class T>
T parse_number(std::string_view tok, std::size_t line, const char * field)
{
  T value{};
  const auto * end = tok.data() + tok.size();
  const auto [ptr, ec] = std::from_chars(tok.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ParseError(line, std::string("invalid ") + field + " '" + std::string(tok) + "'");
  }
  return value;
}

inline bool parse_flag(std::string_view tok, std::size_t line, const char * field)
{
  const auto v = parse_number<int>(tok, line, field);
  if (v != 0 && v != 1) {
    throw ParseError(line, std::string(field) + " must be 0 or 1, got '" + std::string(tok) + "'");
  }
  return v == 1;
}

inline std::string format_double(double v)
{
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

/**
 * @brief Parse SDD annotations: `track xmin ymin xmax ymax frame lost occluded generated "label"`.
 *
 * Blank lines are skipped. Labels are unquoted and canonicalized against the
 * vocabulary (case-insensitive).
 */
inline std::vector<RawAnnotation> parse_sdd_annotations(std::istream & in, const ClassVocabulary & vocab)
{
  std::vector<RawAnnotation> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto fields = detail::split_ws(line);
    if (fields.empty()) continue;
    if (fields.size() != 10) {
      throw ParseError(lineno, "expected 10 fields, got " + std::to_string(fields.size()));
    }
    RawAnnotation a;
    a.track_id = detail::parse_number<std::int64_t>(fields[0], lineno, "track_id");
    a.xmin = detail::parse_number<double>(fields[1], lineno, "xmin");
    a.ymin = detail::parse_number<double>(fields[2], lineno, "ymin");
    a.xmax = detail::parse_number<double>(fields[3], lineno, "xmax");
    a.ymax = detail::parse_number<double>(fields[4], lineno, "ymax");
    a.frame = detail::parse_number<std::int64_t>(fields[5], lineno, "frame");
    a.lost = detail::parse_flag(fields[6], lineno, "lost");
    a.occluded = detail::parse_flag(fields[7], lineno, "occluded");
    a.generated = detail::parse_flag(fields[8], lineno, "generated");
    const auto & q = fields[9];
    if (q.size() < 2 || q.front() != '"' || q.back() != '"') {
      throw ParseError(lineno, "label must be double-quoted, got " + std::string(q));
    }
    if (a.xmin > a.xmax || a.ymin > a.ymax) {
      throw ParseError(lineno, "bounding box has min > max");
    }
    try {
      a.label = vocab.canonical(q.substr(1, q.size() - 2));
    } catch (const VocabularyError & e) {
      throw VocabularyError("line " + std::to_string(lineno) + ": " + e.what());
    }
    rows.push_back(std::move(a));
  }
  return rows;
}

inline std::vector<RawAnnotation> parse_sdd_annotations(const std::string & text, const ClassVocabulary & vocab)
{
  std::istringstream in(text);
  return parse_sdd_annotations(in, vocab);
}

inline void write_sdd_annotations(std::ostream & out, const std::vector<RawAnnotation> & rows)
{
  for (const auto & a : rows) {
    out << a.track_id << ' ' << detail::format_double(a.xmin) << ' ' << detail::format_double(a.ymin) << ' '
        << detail::format_double(a.xmax) << ' ' << detail::format_double(a.ymax) << ' ' << a.frame << ' '
        << int(a.lost) << ' ' << int(a.occluded) << ' ' << int(a.generated) << " \"" << a.label << "\"\n";
  }
}

/**
 * @brief Slide fixed-length windows over the sampled frames of one scene.
 *
 * Sampled frames are first_frame + k * frame_stride. Consecutive windows start
 * one sampled frame apart. An object enters a window only if it has a
 * non-lost annotation at every sampled frame of it; its position is the
 * bounding-box center. Windows without objects are dropped.
 */
inline std::vector<Window> build_windows(
  const std::vector<RawAnnotation> & rows, const ClassVocabulary & vocab, const std::string & scene_id,
  std::int64_t frame_stride, std::size_t t_obs = 8, std::size_t t_pred = 12)
{
  if (frame_stride < 1) throw ContractError("frame_stride must be >= 1");
  if (t_obs < 2 || t_pred < 1) throw ContractError("need t_obs >= 2 and t_pred >= 1");
  std::vector<Window> windows;
  if (rows.empty()) return windows;

  std::int64_t first = rows.front().frame;
  std::int64_t last = rows.front().frame;
  for (const auto & a : rows) {
    first = std::min(first, a.frame);
    last = std::max(last, a.frame);
  }
  // track -> sampled index -> center, for visible rows on the sampling grid
  struct Track
  {
    std::size_t label;
    std::map<std::int64_t, std::pair<double, double>> at;
  };
  std::map<std::int64_t, Track> tracks;
  for (const auto & a : rows) {
    if (a.lost || (a.frame - first) % frame_stride != 0) continue;
    auto & tr = tracks[a.track_id];
    tr.label = vocab.index_of(a.label);
    tr.at[(a.frame - first) / frame_stride] = {(a.xmin + a.xmax) / 2.0, (a.ymin + a.ymax) / 2.0};
  }
  const std::int64_t num_sampled = (last - first) / frame_stride + 1;
  const auto span = static_cast<std::int64_t>(t_obs + t_pred);
  for (std::int64_t s = 0; s + span <= num_sampled; ++s) {
    Window w;
    w.scene_id = scene_id;
    w.start_frame = first + s * frame_stride;
    w.t_obs = t_obs;
    w.t_pred = t_pred;
    for (const auto & [id, tr] : tracks) {
      bool present = true;
      for (std::int64_t k = s; k < s + span && present; ++k) present = tr.at.count(k) > 0;
      if (!present) continue;
      w.labels.push_back(tr.label);
      w.track_ids.push_back(id);
      for (std::int64_t k = s; k < s + span; ++k) {
        const auto & p = tr.at.at(k);
        w.positions.push_back(p.first);
        w.positions.push_back(p.second);
      }
    }
    if (!w.labels.empty()) windows.push_back(std::move(w));
  }
  return windows;
}

/**
 * @brief Observed per-frame displacements divided by the scale, shape [N, t_obs, 2].
 *
 * Entry t = 0 has no predecessor and is zero.
 */
inline Tensor to_velocities(const Window & w, const NormalizationSpec & spec = {})
{
  spec.validate();
  const std::size_t n = w.num_objects();
  std::vector<double> v(n * w.t_obs * 2, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 1; t < w.t_obs; ++t) {
      v[(i * w.t_obs + t) * 2] = (w.x(i, t) - w.x(i, t - 1)) / spec.scale;
      v[(i * w.t_obs + t) * 2 + 1] = (w.y(i, t) - w.y(i, t - 1)) / spec.scale;
    }
  }
  return Tensor::from_values({n, w.t_obs, 2}, std::move(v));
}

/// Ground-truth future per-step displacements in pixels, shape [t_pred, N, 2].
inline Tensor future_displacements(const Window & w)
{
  const std::size_t n = w.num_objects();
  std::vector<double> d(w.t_pred * n * 2);
  for (std::size_t t = 0; t < w.t_pred; ++t) {
    const std::size_t f = w.t_obs + t;
    for (std::size_t i = 0; i < n; ++i) {
      d[(t * n + i) * 2] = w.x(i, f) - w.x(i, f - 1);
      d[(t * n + i) * 2 + 1] = w.y(i, f) - w.y(i, f - 1);
    }
  }
  return Tensor::from_values({w.t_pred, n, 2}, std::move(d));
}

inline Tensor one_hot_labels(const Window & w, std::size_t c)
{
  const std::size_t n = w.num_objects();
  std::vector<double> v(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (w.labels[i] >= c) {
      throw ContractError(
        "label index " + std::to_string(w.labels[i]) + " outside vocabulary of size " + std::to_string(c));
    }
    v[i * c + w.labels[i]] = 1.0;
  }
  return Tensor::from_values({n, c}, std::move(v));
}

inline Tensor one_hot_labels(const Window & w, const ClassVocabulary & vocab) { return one_hot_labels(w, vocab.size()); }

/**
 * @brief Inverse-frequency loss weights: total / (present_classes * count_c); absent classes get 0.
 */
inline Tensor class_weights(const std::vector<Window> & train, const ClassVocabulary & vocab)
{
  std::vector<double> counts(vocab.size(), 0.0);
  double total = 0.0;
  for (const auto & w : train) {
    for (auto l : w.labels) {
      if (l >= vocab.size()) throw ContractError("label index outside vocabulary");
      counts[l] += 1.0;
      total += 1.0;
    }
  }
  if (total == 0.0) throw ContractError("class_weights: empty training set");
  const auto present = static_cast<double>(std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0; }));
  std::vector<double> weights(vocab.size(), 0.0);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] > 0) weights[c] = total / (present * counts[c]);
  }
  return Tensor::from_values({vocab.size()}, std::move(weights));
}

struct DatasetSplit
{
  std::vector<Window> train, val, test;
};

/// Scene-level split; fractions apply to the shuffled list of distinct scene ids.
inline DatasetSplit split_by_scene(
  const std::vector<Window> & windows, std::uint64_t seed, double train_frac = 0.7, double val_frac = 0.1)
{
  std::vector<std::string> scenes;
  for (const auto & w : windows) scenes.push_back(w.scene_id);
  std::sort(scenes.begin(), scenes.end());
  scenes.erase(std::unique(scenes.begin(), scenes.end()), scenes.end());
  std::mt19937_64 rng(seed);
  std::shuffle(scenes.begin(), scenes.end(), rng);
  const auto n = static_cast<double>(scenes.size());
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * n));
  const auto n_val = std::min(scenes.size() - n_train, static_cast<std::size_t>(std::llround(val_frac * n)));
  std::map<std::string, int> bucket;
  for (std::size_t i = 0; i < scenes.size(); ++i) bucket[scenes[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
  DatasetSplit split;
  for (const auto & w : windows) {
    const int b = bucket[w.scene_id];
    (b == 0 ? split.train : b == 1 ? split.val : split.test).push_back(w);
  }
  return split;
}

// ---------------------------------------------------------------------------
// Window cache (JSON lines: one header object, then one object per window)

/// 64-bit FNV-1a, used as a stable content hash for cache keys.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL)
{
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v)
{
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline nlohmann::json window_to_json(const Window & w)
{
  return {{"scene", w.scene_id}, {"start_frame", w.start_frame}, {"t_obs", w.t_obs},     {"t_pred", w.t_pred},
          {"labels", w.labels},  {"track_ids", w.track_ids},     {"positions", w.positions}};
}

inline Window window_from_json(const nlohmann::json & j)
{
  Window w;
  j.at("scene").get_to(w.scene_id);
  j.at("start_frame").get_to(w.start_frame);
  j.at("t_obs").get_to(w.t_obs);
  j.at("t_pred").get_to(w.t_pred);
  j.at("labels").get_to(w.labels);
  j.at("track_ids").get_to(w.track_ids);
  j.at("positions").get_to(w.positions);
  w.validate();
  return w;
}

struct WindowCache
{
  nlohmann::json key;
  std::vector<std::string> vocabulary;
  std::vector<Window> windows;
};

inline void write_window_cache(std::ostream & out, const WindowCache & cache)
{
  nlohmann::json header{
    {"format", "semstg-windows"}, {"version", 1}, {"key", cache.key},
    {"vocabulary", cache.vocabulary}, {"count", cache.windows.size()}};
  out << header.dump() << '\n';
  for (const auto & w : cache.windows) out << window_to_json(w).dump() << '\n';
}

inline WindowCache read_window_cache(std::istream & in)
{
  std::string line;
  if (!std::getline(in, line)) throw FormatError("window cache is empty");
  WindowCache cache;
  std::size_t count = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "semstg-windows" || header.value("version", 0) != 1) {
      throw FormatError("not a semstg window cache (version 1)");
    }
    cache.key = header.at("key");
    header.at("vocabulary").get_to(cache.vocabulary);
    count = header.at("count").get<std::size_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      cache.windows.push_back(window_from_json(nlohmann::json::parse(line)));
    }
  } catch (const nlohmann::json::exception & e) {
    throw FormatError(std::string("window cache: ") + e.what());
  }
  if (cache.windows.size() != count) {
    throw FormatError(
      "window cache truncated: header announces " + std::to_string(count) + " windows, found " +
      std::to_string(cache.windows.size()));
  }
  return cache;
}

inline void save_window_cache(const std::string & path, const WindowCache & cache)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  write_window_cache(out, cache);
}

inline WindowCache load_window_cache(const std::string & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path);
  return read_window_cache(in);
}

}  // namespace semstg
