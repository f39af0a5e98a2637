#pragma once

#include "semstg/data.hpp"
#include "semstg/model.hpp"
#include "semstg/train.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

/**
 * @file checkpoint.hpp
 * @brief Self-describing checkpoint container.
 *
 * Layout: 8-byte magic "SEMSTGCK", uint32 format version, uint64 header
 * length, UTF-8 JSON header, then the float64 payload. All integers and
 * floats are little-endian. The payload holds every parameter in header order,
 * followed by the Adam first and second moments in the same order.
 */

namespace semstg
{

inline constexpr char kCheckpointMagic[8] = {'S', 'E', 'M', 'S', 'T', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint
{
  ModelConfig model;
  NormalizationSpec normalization;
  std::vector<std::string> vocabulary;
  ModelParams params;
  AdamState adam;
  nlohmann::json train_state = nlohmann::json::object();
};

namespace detail
{

template <class T>
T to_little(T v)
{
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

template <class T>
void put(std::string & out, T v)
{
  v = to_little(v);
  out.append(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <class T>
T take(const std::string & in, std::size_t & pos)
{
  if (pos + sizeof(T) > in.size()) throw FormatError("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return to_little(v);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint & c)
{
  nlohmann::json header;
  header["model"] = c.model;
  header["normalization"] = {{"scale", c.normalization.scale}};
  header["vocabulary"] = c.vocabulary;
  header["train_state"] = c.train_state;
  header["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}, {"step", c.adam.step}};
  std::size_t total = 0;
  for (const auto & p : c.params.all()) {
    header["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", total}});
    total += p.tensor.numel();
  }
  const bool moments = c.adam.m.size() == c.params.all().size();
  header["adam"]["moments"] = moments;
  header["payload_values"] = moments ? 3 * total : total;

  const std::string text = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  detail::put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  for (const auto & p : c.params.all()) {
    for (double v : p.tensor.values()) detail::put(out, v);
  }
  if (moments) {
    for (const auto & m : c.adam.m) for (double v : m) detail::put(out, v);
    for (const auto & v2 : c.adam.v) for (double v : v2) detail::put(out, v);
  }
  return out;
}

/**
 * @brief Parse a checkpoint; the parameter layout must match the one its model config implies.
 */
inline Checkpoint deserialize_checkpoint(const std::string & bytes)
{
  if (bytes.size() < sizeof(kCheckpointMagic) || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("not a semstg checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const auto version = detail::take<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw FormatError(
      "checkpoint version mismatch: expected " + std::to_string(kCheckpointVersion) + ", found " +
      std::to_string(version));
  }
  const auto header_len = detail::take<std::uint64_t>(bytes, pos);
  if (header_len > bytes.size() - pos) throw FormatError("checkpoint truncated inside header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception & e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  pos += header_len;

  Checkpoint c;
  try {
    c.model = header.at("model").get<ModelConfig>();
    c.normalization.scale = header.at("normalization").at("scale").get<double>();
    c.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
    c.train_state = header.at("train_state");
    const auto & adam = header.at("adam");
    c.adam.beta1 = adam.at("beta1").get<double>();
    c.adam.beta2 = adam.at("beta2").get<double>();
    c.adam.eps = adam.at("eps").get<double>();
    c.adam.step = adam.at("step").get<std::uint64_t>();
    const bool moments = adam.at("moments").get<bool>();

    const ModelParams expected = ModelParams::init(c.model, 0);
    const auto & entries = header.at("params");
    if (entries.size() != expected.all().size()) {
      throw FormatError(
        "checkpoint holds " + std::to_string(entries.size()) + " parameters, model config expects " +
        std::to_string(expected.all().size()));
    }
    std::size_t total = 0;
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const auto name = entries[k].at("name").get<std::string>();
      const auto shape = entries[k].at("shape").get<Shape>();
      const auto & want = expected.all()[k];
      if (name != want.name || shape != want.tensor.shape()) {
        throw FormatError(
          "parameter " + std::to_string(k) + ": expected " + want.name + " " + shape_str(want.tensor.shape()) +
          ", found " + name + " " + shape_str(shape));
      }
      total += shape_numel(shape);
    }
    const std::size_t want_values = moments ? 3 * total : total;
    if (header.at("payload_values").get<std::size_t>() != want_values ||
        bytes.size() - pos != want_values * sizeof(double)) {
      throw FormatError(
        "checkpoint payload holds " + std::to_string((bytes.size() - pos) / sizeof(double)) +
        " values, expected " + std::to_string(want_values));
    }
    for (const auto & want : expected.all()) {
      std::vector<double> v(want.tensor.numel());
      for (auto & x : v) x = detail::take<double>(bytes, pos);
      c.params.add(want.name, Tensor::from_values(want.tensor.shape(), std::move(v), true));
    }
    c.adam.m.clear();
    c.adam.v.clear();
    if (moments) {
      for (auto * dst : {&c.adam.m, &c.adam.v}) {
        for (const auto & want : expected.all()) {
          std::vector<double> v(want.tensor.numel());
          for (auto & x : v) x = detail::take<double>(bytes, pos);
          dst->push_back(std::move(v));
        }
      }
    } else {
      c.adam = AdamState::for_params(c.params);
    }
  } catch (const nlohmann::json::exception & e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError & e) {
    throw FormatError(std::string("checkpoint model config: ") + e.what());
  } catch (const DomainError & e) {
    throw FormatError(std::string("checkpoint payload: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const std::string & path, const Checkpoint & c)
{
  const std::string bytes = serialize_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string & path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace semstg
