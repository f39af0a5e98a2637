#pragma once

#include "semstg/data.hpp"
#include "semstg/graph.hpp"
#include "semstg/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace semstg
{

struct ModelConfig
{
  std::size_t n_stgcnn = 1;
  std::size_t n_txpcnn = 5;
  std::size_t feat_channels = 5;
  std::size_t kernel_t = 3;
  std::size_t t_obs = 8;
  std::size_t t_pred = 12;
  std::size_t num_classes = 6;
  /// false selects the label-blind ablation: the graph is the velocity adjacency alone.
  bool semantic = true;

  void validate() const
  {
    if (n_stgcnn < 1) throw ConfigError("n_stgcnn must be >= 1");
    if (n_txpcnn < 1) throw ConfigError("n_txpcnn must be >= 1");
    if (feat_channels != 5) throw ConfigError("feat_channels must be 5 (mu_x, mu_y, s_x, s_y, r)");
    if (kernel_t < 1 || kernel_t % 2 == 0) throw ConfigError("kernel_t must be odd and >= 1");
    if (t_obs < 2 || t_pred < 1) throw ConfigError("need t_obs >= 2 and t_pred >= 1");
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  }

  bool operator==(const ModelConfig &) const = default;
};

inline void to_json(nlohmann::json & j, const ModelConfig & c)
{
  j = {{"n_stgcnn", c.n_stgcnn}, {"n_txpcnn", c.n_txpcnn}, {"feat_channels", c.feat_channels},
       {"kernel_t", c.kernel_t}, {"t_obs", c.t_obs},       {"t_pred", c.t_pred},
       {"num_classes", c.num_classes}, {"semantic", c.semantic}};
}

inline void from_json(const nlohmann::json & j, ModelConfig & c)
{
  c = ModelConfig{};
  c.n_stgcnn = j.value("n_stgcnn", c.n_stgcnn);
  c.n_txpcnn = j.value("n_txpcnn", c.n_txpcnn);
  c.feat_channels = j.value("feat_channels", c.feat_channels);
  c.kernel_t = j.value("kernel_t", c.kernel_t);
  c.t_obs = j.value("t_obs", c.t_obs);
  c.t_pred = j.value("t_pred", c.t_pred);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.semantic = j.value("semantic", c.semantic);
}

struct Parameter
{
  std::string name;
  Tensor tensor;
};

/**
 * @brief Ordered, uniquely named trainable tensors of one model.
 */
class ModelParams
{
public:
  ModelParams() = default;

  /// Weights and biases uniform in +-1/sqrt(fan_in); PReLU slopes start at 0.25.
  static ModelParams init(const ModelConfig & cfg, std::uint64_t seed)
  {
    cfg.validate();
    ModelParams p;
    std::mt19937_64 rng(seed);
    auto uniform = [&](Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      std::vector<double> v(shape_numel(shape));
      for (auto & x : v) x = dist(rng);
      return Tensor::from_values(std::move(shape), std::move(v), true);
    };
    auto slope = [] { return Tensor::from_values({1}, {0.25}, true); };
    const std::size_t f = cfg.feat_channels;
    const std::size_t kt = cfg.kernel_t;

    if (cfg.semantic) {
      const std::size_t c2 = 2 * cfg.num_classes;
      p.add("lam.reduce.weight", uniform({c2, 1}, c2));
      p.add("lam.reduce.bias", uniform({1}, c2));
      p.add("sam.fuse.weight", uniform({2, 1}, 2));
      p.add("sam.fuse.bias", uniform({1}, 2));
    }
    for (std::size_t l = 0; l < cfg.n_stgcnn; ++l) {
      const std::size_t cin = l == 0 ? 2 : f;
      const std::string pre = "stgcnn." + std::to_string(l) + ".";
      p.add(pre + "gcn.weight", uniform({f, cin, 1}, cin));
      p.add(pre + "gcn.bias", uniform({f}, cin));
      p.add(pre + "tcn.weight", uniform({f, f, kt}, f * kt));
      p.add(pre + "tcn.bias", uniform({f}, f * kt));
      if (cin != f) {
        p.add(pre + "residual.weight", uniform({f, cin, 1}, cin));
        p.add(pre + "residual.bias", uniform({f}, cin));
      }
      p.add(pre + "prelu", slope());
    }
    for (std::size_t l = 0; l < cfg.n_txpcnn; ++l) {
      const std::size_t cin = l == 0 ? cfg.t_obs : cfg.t_pred;
      const std::string pre = "txpcnn." + std::to_string(l) + ".";
      p.add(pre + "weight", uniform({cfg.t_pred, kNodeTaps * cin, kt}, kNodeTaps * cin * kt));
      p.add(pre + "bias", uniform({cfg.t_pred}, kNodeTaps * cin * kt));
      p.add(pre + "prelu", slope());
    }
    p.add("txpcnn.output.weight", uniform({cfg.t_pred, kNodeTaps * cfg.t_pred, kt}, kNodeTaps * cfg.t_pred * kt));
    p.add("txpcnn.output.bias", uniform({cfg.t_pred}, kNodeTaps * cfg.t_pred * kt));
    return p;
  }

  /// Node taps per TXP-CNN input channel: self, graph neighbourhood, scene mean.
  static constexpr std::size_t kNodeTaps = 3;

  void add(std::string name, Tensor t)
  {
    if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    params_.push_back({std::move(name), std::move(t)});
  }

  bool contains(const std::string & name) const
  {
    return std::any_of(params_.begin(), params_.end(), [&](const auto & p) { return p.name == name; });
  }

  const Tensor & get(const std::string & name) const
  {
    for (const auto & p : params_) {
      if (p.name == name) return p.tensor;
    }
    throw ContractError("no parameter named '" + name + "'");
  }

  Tensor & get(const std::string & name)
  {
    return const_cast<Tensor &>(static_cast<const ModelParams &>(*this).get(name));
  }

  /// Undefined tensor when absent.
  Tensor find(const std::string & name) const { return contains(name) ? get(name) : Tensor(); }

  std::vector<Parameter> & all() noexcept { return params_; }
  const std::vector<Parameter> & all() const noexcept { return params_; }

  std::size_t count() const
  {
    std::size_t n = 0;
    for (const auto & p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad()
  {
    for (auto & p : params_) p.tensor.zero_grad();
  }

  /// All values concatenated in declaration order.
  std::vector<double> flat_values() const
  {
    std::vector<double> v;
    v.reserve(count());
    for (const auto & p : params_) v.insert(v.end(), p.tensor.values().begin(), p.tensor.values().end());
    return v;
  }

  /**
   * @brief Same names and shapes, with every tensor a differentiable slice of `flat`.
   *
   * Lets a single vector drive the whole model (finite-difference checks).
   */
  ModelParams view_of(const Tensor & flat) const
  {
    if (flat.dim() != 1 || flat.numel() != count()) {
      throw ShapeError("view_of: flat vector " + shape_str(flat.shape()) + " vs " + std::to_string(count()));
    }
    ModelParams out;
    std::size_t offset = 0;
    for (const auto & p : params_) {
      out.params_.push_back({p.name, reshape(slice(flat, 0, offset, p.tensor.numel()), p.tensor.shape())});
      offset += p.tensor.numel();
    }
    return out;
  }

  /// Deep copy with fresh leaves.
  ModelParams clone() const
  {
    ModelParams out;
    for (const auto & p : params_) {
      out.params_.push_back(
        {p.name, Tensor::from_values(p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()},
                                     p.tensor.requires_grad())});
    }
    return out;
  }

private:
  std::vector<Parameter> params_;
};

inline std::size_t param_count(const ModelParams & p) { return p.count(); }

/**
 * @brief Per-node, per-future-step bi-variate Gaussian over step displacements.
 *
 * mu and sigma are [T_pred, N, 2] in pixels, rho is [T_pred, N]. Means are
 * relative to the previous step; absolute positions follow by cumulative sum
 * from the last observed position.
 */
struct GaussianParams
{
  Tensor mu;
  Tensor sigma;
  Tensor rho;

  std::size_t t_pred() const { return mu.size(0); }
  std::size_t num_nodes() const { return mu.size(1); }

  void validate() const
  {
    if (mu.dim() != 3 || sigma.shape() != mu.shape() || rho.dim() != 2 || rho.size(0) != mu.size(0) ||
        rho.size(1) != mu.size(1) || mu.size(2) != 2) {
      throw ShapeError("inconsistent GaussianParams shapes");
    }
    for (double s : sigma.values()) {
      if (!(s > 0.0) || !std::isfinite(s)) throw ContractError("sigma must be positive and finite");
    }
    for (double r : rho.values()) {
      if (!(std::fabs(r) < 1.0)) throw ContractError("|rho| must be < 1");
    }
    for (double m : mu.values()) {
      if (!std::isfinite(m)) throw ContractError("mu must be finite");
    }
  }
};

// ---------------------------------------------------------------------------
// Layers

struct StgcnnWeights
{
  Tensor gcn_weight;       ///< [F, Cin, 1]
  Tensor gcn_bias;         ///< [F]
  Tensor tcn_weight;       ///< [F, F, kT]
  Tensor tcn_bias;         ///< [F]
  Tensor residual_weight;  ///< [F, Cin, 1]; undefined means identity residual
  Tensor residual_bias;    ///< [F]
  Tensor prelu_slope;      ///< [1]
};

/**
 * @brief One spatial-temporal graph convolution block.
 *
 * V is [Cin, T, N] and A_hat is [T, N, N]. Per frame, features pass through a
 * 1x1 channel convolution and are mixed across nodes by A_hat[t]; a temporal
 * convolution (kernel kT, same padding) follows, plus a residual projection of
 * the input, then PReLU. Output is [F, T, N].
 */
inline Tensor stgcnn_forward(const Tensor & v, const Tensor & a_hat, const StgcnnWeights & w)
{
  if (v.dim() != 3 || a_hat.dim() != 3 || a_hat.size(0) != v.size(1) || a_hat.size(1) != v.size(2) ||
      a_hat.size(2) != v.size(2)) {
    throw ShapeError(
      "stgcnn_forward: features " + shape_str(v.shape()) + " incompatible with adjacency " +
      shape_str(a_hat.shape()));
  }
  const Tensor projected = conv_temporal(v, w.gcn_weight, w.gcn_bias, 0);            // [F, T, N]
  const Tensor per_frame = permute(projected, {1, 0, 2});                          // [T, F, N]
  const Tensor mixed = permute(matmul(per_frame, transpose(a_hat)), {1, 0, 2});    // [F, T, N]
  const std::size_t pad = w.tcn_weight.size(2) / 2;
  const Tensor temporal = conv_temporal(mixed, w.tcn_weight, w.tcn_bias, pad);
  const Tensor residual = w.residual_weight.defined() ? conv_temporal(v, w.residual_weight, w.residual_bias, 0) : v;
  return prelu(add(temporal, residual), w.prelu_slope);
}

struct TxpLayer
{
  Tensor weight;  ///< [C_out, 3 * C_in, kT]
  Tensor bias;    ///< [C_out]
  Tensor prelu;   ///< [1]; undefined on the output projection
};

/**
 * @brief Stack node taps along the channel axis: x, x mixed by `graph`, scene mean of x.
 *
 * x is [C, F, N]; graph is [N, N]. Every tap commutes with node permutations.
 */
inline Tensor node_taps(const Tensor & x, const Tensor & graph)
{
  const std::size_t n = x.size(2);
  const Tensor scene_mean = Tensor::full({n, n}, 1.0 / static_cast<double>(n));
  return concat({x, matmul(x, transpose(graph)), matmul(x, scene_mean)}, 0);
}

/**
 * @brief Time-extrapolator: maps [T_obs, F, N] feature frames to [T_pred, F, N].
 *
 * Time acts as the channel axis and kernels slide along the feature axis.
 * Layer 0 maps T_obs -> T_pred with PReLU; middle layers are residual,
 * out = PReLU(conv(in)) + in; the last entry is a plain projection.
 */
inline Tensor txpcnn_forward(const Tensor & h, const Tensor & graph, const std::vector<TxpLayer> & layers)
{
  if (layers.size() < 2) {
    throw ContractError("txpcnn_forward needs an input layer and an output projection");
  }
  if (h.dim() != 3 || graph.dim() != 2 || graph.size(0) != h.size(2) || graph.size(1) != h.size(2)) {
    throw ShapeError("txpcnn_forward: features " + shape_str(h.shape()) + " vs graph " + shape_str(graph.shape()));
  }
  auto conv = [&](const Tensor & x, const TxpLayer & l) {
    return conv_temporal(node_taps(x, graph), l.weight, l.bias, l.weight.size(2) / 2);
  };
  Tensor x = prelu(conv(h, layers.front()), layers.front().prelu);
  for (std::size_t i = 1; i + 1 < layers.size(); ++i) {
    x = add(prelu(conv(x, layers[i]), layers[i].prelu), x);
  }
  return conv(x, layers.back());
}

/**
 * @brief Channels (mu_x, mu_y, s_x, s_y, r) of raw [T_pred, 5, N] to a Gaussian.
 *
 * mu = raw * scale, sigma = exp(raw) * scale, rho = kRhoBound * tanh(raw).
 * tanh rounds to exactly 1 in double precision once |raw| exceeds about 19;
 * the bound keeps |rho| < 1 for every input.
 */
inline constexpr double kRhoBound = 1.0 - 1e-9;

inline GaussianParams output_head(const Tensor & raw, const NormalizationSpec & spec = {})
{
  spec.validate();
  if (raw.dim() != 3 || raw.size(1) != 5) {
    throw ShapeError("output_head expects [T_pred, 5, N], got " + shape_str(raw.shape()));
  }
  const std::size_t t = raw.size(0);
  const std::size_t n = raw.size(2);
  GaussianParams g;
  g.mu = mul_scalar(permute(slice(raw, 1, 0, 2), {0, 2, 1}), spec.scale);
  g.sigma = mul_scalar(exp(permute(slice(raw, 1, 2, 2), {0, 2, 1})), spec.scale);
  g.rho = mul_scalar(tanh(reshape(slice(raw, 1, 4, 1), {t, n})), kRhoBound);
  return g;
}

inline StgcnnWeights stgcnn_weights(const ModelParams & p, std::size_t layer)
{
  const std::string pre = "stgcnn." + std::to_string(layer) + ".";
  return {p.get(pre + "gcn.weight"),        p.get(pre + "gcn.bias"),          p.get(pre + "tcn.weight"),
          p.get(pre + "tcn.bias"),          p.find(pre + "residual.weight"), p.find(pre + "residual.bias"),
          p.get(pre + "prelu")};
}

inline std::vector<TxpLayer> txpcnn_layers(const ModelParams & p, const ModelConfig & cfg)
{
  std::vector<TxpLayer> layers;
  for (std::size_t l = 0; l < cfg.n_txpcnn; ++l) {
    const std::string pre = "txpcnn." + std::to_string(l) + ".";
    layers.push_back({p.get(pre + "weight"), p.get(pre + "bias"), p.get(pre + "prelu")});
  }
  layers.push_back({p.get("txpcnn.output.weight"), p.get("txpcnn.output.bias"), Tensor()});
  return layers;
}

/// Normalized graph stack [T_obs, N, N] for a window (SAM, or VAM in the ablation).
inline Tensor window_graph(const Window & w, const ModelConfig & cfg, const ModelParams & p, const NormalizationSpec & spec)
{
  const Tensor vam = build_vam(to_velocities(w, spec));
  if (!cfg.semantic) {
    return normalize_laplacian(vam);
  }
  const Tensor lam = reduce_lam(
    build_intersection(one_hot_labels(w, cfg.num_classes)), {p.get("lam.reduce.weight"), p.get("lam.reduce.bias")});
  return normalize_laplacian(fuse_sam(vam, lam, {p.get("sam.fuse.weight"), p.get("sam.fuse.bias")}));
}

struct ForwardResult
{
  GaussianParams pred;
  Tensor raw;    ///< [T_pred, 5, N]
  Tensor a_hat;  ///< [T_obs, N, N]
};

/**
 * @brief Full pipeline: velocities, graph construction, ST-GCNN, TXP-CNN, Gaussian head.
 */
inline ForwardResult model_forward(
  const Window & w, const ModelConfig & cfg, const ModelParams & p, const NormalizationSpec & spec = {})
{
  w.validate();
  if (w.t_obs != cfg.t_obs || w.t_pred != cfg.t_pred) {
    throw ShapeError(
      "window horizon " + std::to_string(w.t_obs) + "/" + std::to_string(w.t_pred) + " does not match model " +
      std::to_string(cfg.t_obs) + "/" + std::to_string(cfg.t_pred));
  }
  ForwardResult r;
  r.a_hat = window_graph(w, cfg, p, spec);
  const std::size_t n = w.num_objects();

  Tensor h = permute(to_velocities(w, spec), {2, 1, 0});  // [2, T_obs, N]
  for (std::size_t l = 0; l < cfg.n_stgcnn; ++l) h = stgcnn_forward(h, r.a_hat, stgcnn_weights(p, l));

  // time-averaged graph for the decoder's neighbourhood tap
  const Tensor frames_mean = Tensor::full({1, cfg.t_obs}, 1.0 / static_cast<double>(cfg.t_obs));
  const Tensor graph = reshape(matmul(frames_mean, reshape(r.a_hat, {cfg.t_obs, n * n})), {n, n});

  r.raw = txpcnn_forward(permute(h, {1, 0, 2}), graph, txpcnn_layers(p, cfg));
  r.pred = output_head(r.raw, spec);
  return r;
}

}  // namespace semstg
