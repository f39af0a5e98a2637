#pragma once

#include "semstg/data.hpp"
#include "semstg/metrics.hpp"
#include "semstg/model.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

/**
 * @file plot.hpp
 * @brief Per-window prediction dumps (CSV) and their SVG rendering.
 *
 * A dump is line oriented. Lines starting with '#' are comments; every other
 * line starts with a record tag:
 *
 *   meta,<key>,<value>            window description (scene, start_frame, ...)
 *   vocab,<class>,<class>,...     class order used for colors
 *   obs,object,class,t,x,y
 *   pred,object,class,t,truth_x,truth_y,mu_x,mu_y,sigma_x,sigma_y,rho
 *   sample,sample,object,t,x,y
 *
 * Predicted means are absolute positions; sigma and rho are per-step values.
 */

namespace semstg
{

struct ObservedRow
{
  std::int64_t object = 0;
  std::string cls;
  std::size_t t = 0;
  double x = 0, y = 0;
  bool operator==(const ObservedRow &) const = default;
};

struct PredictionRow
{
  std::int64_t object = 0;
  std::string cls;
  std::size_t t = 0;
  double truth_x = 0, truth_y = 0, mu_x = 0, mu_y = 0, sigma_x = 0, sigma_y = 0, rho = 0;
  bool operator==(const PredictionRow &) const = default;
};

struct SampleRow
{
  std::size_t sample = 0;
  std::int64_t object = 0;
  std::size_t t = 0;
  double x = 0, y = 0;
  bool operator==(const SampleRow &) const = default;
};

struct PredictionDump
{
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<std::string> vocabulary;
  std::vector<ObservedRow> observed;
  std::vector<PredictionRow> predicted;
  std::vector<SampleRow> samples;

  std::string meta_value(const std::string & key, const std::string & fallback = "") const
  {
    for (const auto & [k, v] : meta) {
      if (k == key) return v;
    }
    return fallback;
  }

  bool operator==(const PredictionDump &) const = default;
};

inline PredictionDump make_prediction_dump(
  const Window & w, const GaussianParams & pred, const SampledTrajectories & st, const ClassVocabulary & vocab,
  std::size_t window_index)
{
  PredictionDump d;
  d.meta = {{"window", std::to_string(window_index)}, {"scene", w.scene_id},
            {"start_frame", std::to_string(w.start_frame)}, {"t_obs", std::to_string(w.t_obs)},
            {"t_pred", std::to_string(w.t_pred)}, {"samples", std::to_string(st.num_samples())},
            {"seed", std::to_string(st.seed)}};
  d.vocabulary = vocab.names();
  const std::size_t n = w.num_objects();
  auto id = [&](std::size_t i) { return w.track_ids.empty() ? static_cast<std::int64_t>(i) : w.track_ids[i]; };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < w.t_obs; ++t) d.observed.push_back({id(i), vocab.name(w.labels[i]), t, w.x(i, t), w.y(i, t)});
  }
  const Tensor means = mean_trajectory(pred, last_observed(w));
  const auto mv = means.values();
  const auto sg = pred.sigma.values();
  const auto rho = pred.rho.values();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < w.t_pred; ++t) {
      const std::size_t k = (t * n + i) * 2;
      d.predicted.push_back({id(i), vocab.name(w.labels[i]), t, w.x(i, w.t_obs + t), w.y(i, w.t_obs + t),
                             mv[(i * w.t_pred + t) * 2], mv[(i * w.t_pred + t) * 2 + 1], sg[k], sg[k + 1],
                             rho[t * n + i]});
    }
  }
  const auto sv = st.samples.values();
  for (std::size_t s = 0; s < st.num_samples(); ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < w.t_pred; ++t) {
        const std::size_t o = ((s * n + i) * w.t_pred + t) * 2;
        d.samples.push_back({s, id(i), t, sv[o], sv[o + 1]});
      }
    }
  }
  return d;
}

inline void write_prediction_dump(std::ostream & out, const PredictionDump & d)
{
  using detail::format_double;
  out << "# semstg prediction dump v1\n";
  for (const auto & [k, v] : d.meta) out << "meta," << k << ',' << v << '\n';
  out << "vocab";
  for (const auto & c : d.vocabulary) out << ',' << c;
  out << '\n';
  out << "# obs,object,class,t,x,y\n";
  for (const auto & r : d.observed) {
    out << "obs," << r.object << ',' << r.cls << ',' << r.t << ',' << format_double(r.x) << ','
        << format_double(r.y) << '\n';
  }
  out << "# pred,object,class,t,truth_x,truth_y,mu_x,mu_y,sigma_x,sigma_y,rho\n";
  for (const auto & r : d.predicted) {
    out << "pred," << r.object << ',' << r.cls << ',' << r.t << ',' << format_double(r.truth_x) << ','
        << format_double(r.truth_y) << ',' << format_double(r.mu_x) << ',' << format_double(r.mu_y) << ','
        << format_double(r.sigma_x) << ',' << format_double(r.sigma_y) << ',' << format_double(r.rho) << '\n';
  }
  out << "# sample,sample,object,t,x,y\n";
  for (const auto & r : d.samples) {
    out << "sample," << r.sample << ',' << r.object << ',' << r.t << ',' << format_double(r.x) << ','
        << format_double(r.y) << '\n';
  }
}

inline PredictionDump read_prediction_dump(std::istream & in)
{
  PredictionDump d;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    auto num = [&](std::size_t i) { return detail::parse_number<double>(f.at(i), lineno, "number"); };
    auto integer = [&](std::size_t i) { return detail::parse_number<std::int64_t>(f.at(i), lineno, "integer"); };
    auto index = [&](std::size_t i) { return detail::parse_number<std::size_t>(f.at(i), lineno, "index"); };
    const std::string & tag = f.at(0);
    auto need = [&](std::size_t n) {
      if (f.size() != n) throw ParseError(lineno, tag + " record needs " + std::to_string(n) + " fields");
    };
    if (tag == "meta") {
      need(3);
      d.meta.emplace_back(f[1], f[2]);
    } else if (tag == "vocab") {
      d.vocabulary.assign(f.begin() + 1, f.end());
    } else if (tag == "obs") {
      need(6);
      d.observed.push_back({integer(1), f[2], index(3), num(4), num(5)});
    } else if (tag == "pred") {
      need(11);
      d.predicted.push_back({integer(1), f[2], index(3), num(4), num(5), num(6), num(7), num(8), num(9), num(10)});
    } else if (tag == "sample") {
      need(6);
      d.samples.push_back({index(1), integer(2), index(3), num(4), num(5)});
    } else {
      throw ParseError(lineno, "unknown record tag '" + tag + "'");
    }
  }
  return d;
}

/// Fixed palette indexed by vocabulary position.
inline const std::string & class_color(std::size_t index)
{
  static const std::array<std::string, 8> palette{"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                                   "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  return palette[index % palette.size()];
}

namespace detail
{

inline std::string xml_escape(const std::string & s)
{
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/**
 * @brief Render a dump as SVG.
 *
 * Observed paths are solid lines, ground-truth futures hollow circles,
 * predicted means a line with filled circles, samples faint lines.
 */
inline std::string render_svg(const PredictionDump & d, bool draw_samples = true, double size = 640.0)
{
  double xmin = std::numeric_limits<double>::infinity(), ymin = xmin;
  double xmax = -xmin, ymax = -xmin;
  auto extend = [&](double x, double y) {
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  };
  for (const auto & r : d.observed) extend(r.x, r.y);
  for (const auto & r : d.predicted) {
    extend(r.truth_x, r.truth_y);
    extend(r.mu_x, r.mu_y);
  }
  if (draw_samples) {
    for (const auto & r : d.samples) extend(r.x, r.y);
  }
  if (!std::isfinite(xmin)) xmin = ymin = 0, xmax = ymax = 1;
  const double span = std::max({xmax - xmin, ymax - ymin, 1.0});
  const double margin = 20.0;
  const double k = (size - 2 * margin) / span;
  auto px = [&](double x) { return detail::format_double(margin + (x - xmin) * k); };
  auto py = [&](double y) { return detail::format_double(margin + (y - ymin) * k); };
  auto color = [&](const std::string & cls) {
    const auto it = std::find(d.vocabulary.begin(), d.vocabulary.end(), cls);
    return class_color(static_cast<std::size_t>(it - d.vocabulary.begin()));
  };

  std::vector<std::int64_t> objects;
  for (const auto & r : d.observed) {
    if (std::find(objects.begin(), objects.end(), r.object) == objects.end()) objects.push_back(r.object);
  }
  for (const auto & r : d.predicted) {
    if (std::find(objects.begin(), objects.end(), r.object) == objects.end()) objects.push_back(r.object);
  }

  std::ostringstream svg;
  const std::string sz = detail::format_double(size);
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << sz << "\" height=\"" << sz << "\" viewBox=\"0 0 "
      << sz << ' ' << sz << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << sz << "\" height=\"" << sz << "\" fill=\"white\"/>\n";
  if (!d.meta.empty()) {
    svg << "<desc>";
    for (std::size_t i = 0; i < d.meta.size(); ++i) {
      svg << (i ? "; " : "") << detail::xml_escape(d.meta[i].first) << '=' << detail::xml_escape(d.meta[i].second);
    }
    svg << "</desc>\n";
  }
  for (const auto obj : objects) {
    std::string cls;
    std::string obs_pts, mean_pts;
    for (const auto & r : d.observed) {
      if (r.object != obj) continue;
      cls = r.cls;
      obs_pts += px(r.x) + "," + py(r.y) + " ";
    }
    std::string last_obs = obs_pts.empty() ? "" : obs_pts.substr(obs_pts.rfind(' ', obs_pts.size() - 2) + 1);
    for (const auto & r : d.predicted) {
      if (r.object == obj) cls = r.cls;
    }
    const std::string c = color(cls);
    svg << "<g class=\"object\" data-object=\"" << obj << "\" data-class=\"" << cls << "\">\n";
    if (draw_samples) {
      std::size_t current = std::numeric_limits<std::size_t>::max();
      std::string pts;
      auto flush = [&] {
        if (!pts.empty()) {
          svg << "<polyline points=\"" << last_obs << pts << "\" fill=\"none\" stroke=\"" << c
              << "\" stroke-opacity=\"0.15\" stroke-width=\"1\"/>\n";
        }
        pts.clear();
      };
      for (const auto & r : d.samples) {
        if (r.object != obj) continue;
        if (r.sample != current) {
          flush();
          current = r.sample;
        }
        pts += px(r.x) + "," + py(r.y) + " ";
      }
      flush();
    }
    if (!obs_pts.empty()) {
      svg << "<polyline points=\"" << obs_pts << "\" fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    }
    for (const auto & r : d.predicted) {
      if (r.object != obj) continue;
      mean_pts += px(r.mu_x) + "," + py(r.mu_y) + " ";
    }
    if (!mean_pts.empty()) {
      svg << "<polyline points=\"" << last_obs << mean_pts << "\" fill=\"none\" stroke=\"" << c
          << "\" stroke-width=\"1.5\"/>\n";
    }
    for (const auto & r : d.predicted) {
      if (r.object != obj) continue;
      svg << "<circle cx=\"" << px(r.truth_x) << "\" cy=\"" << py(r.truth_y) << "\" r=\"4\" fill=\"none\" stroke=\""
          << c << "\" stroke-width=\"1.5\"/>\n";
      svg << "<circle cx=\"" << px(r.mu_x) << "\" cy=\"" << py(r.mu_y) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
    }
    svg << "</g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace semstg
