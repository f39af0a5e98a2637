#pragma once

#include "semstg/tensor.hpp"

#include <cmath>
#include <vector>

/**
 * @file graph.hpp
 * @brief Velocity adjacency (VAM), label adjacency (LAM), their fusion (SAM)
 * and symmetric Laplacian normalization.
 *
 * Adjacency stacks are stored time-major, [T_obs, N, N].
 */

namespace semstg
{

/**
 * @brief Inverse Euclidean distance between node velocities, per frame.
 *
 * velocities is [N, T, 2]; the result is a constant [T, N, N] tensor with
 * A[t, i, j] = 1 / |v_i - v_j| when the distance is non-zero and 0 otherwise.
 */
inline Tensor build_vam(const Tensor & velocities)
{
  if (velocities.dim() != 3 || velocities.size(2) != 2) {
    throw ShapeError("build_vam expects [N, T, 2], got " + shape_str(velocities.shape()));
  }
  const std::size_t n = velocities.size(0);
  const std::size_t t_len = velocities.size(1);
  const auto v = velocities.values();
  std::vector<double> a(t_len * n * n, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = v[(i * t_len + t) * 2] - v[(j * t_len + t) * 2];
        const double dy = v[(i * t_len + t) * 2 + 1] - v[(j * t_len + t) * 2 + 1];
        const double d = std::hypot(dx, dy);
        const double w = d != 0.0 ? 1.0 / d : 0.0;
        a[(t * n + i) * n + j] = w;
        a[(t * n + j) * n + i] = w;
      }
    }
  }
  return Tensor::from_values({t_len, n, n}, std::move(a));
}

/**
 * @brief Pairwise label tensor [N, N, 2C]: entry (i, j) = concat(onehot[j], onehot[i]).
 *
 * The first C entries carry the column object's class, the last C the row object's.
 */
inline Tensor build_intersection(const Tensor & onehot)
{
  if (onehot.dim() != 2) {
    throw ShapeError("build_intersection expects [N, C], got " + shape_str(onehot.shape()));
  }
  const std::size_t n = onehot.size(0);
  const std::size_t c = onehot.size(1);
  const auto l = onehot.values();
  std::vector<double> out(n * n * 2 * c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double * e = out.data() + (i * n + j) * 2 * c;
      std::copy_n(l.begin() + static_cast<std::ptrdiff_t>(j * c), c, e);
      std::copy_n(l.begin() + static_cast<std::ptrdiff_t>(i * c), c, e + c);
    }
  }
  return Tensor::from_values({n, n, 2 * c}, std::move(out));
}

/// Trainable reduction of the intersection tensor to one similarity per pair.
struct LamParams
{
  Tensor reduce_weight;  ///< [2C, 1]
  Tensor reduce_bias;    ///< [1]
};

/// Trainable 2 -> 1 fusion of (VAM entry, LAM entry).
struct SamParams
{
  Tensor fuse_weight;  ///< [2, 1]
  Tensor fuse_bias;    ///< [1]
};

/// A^l[i, j] = intersection[i, j] . w + b, shape [N, N].
inline Tensor reduce_lam(const Tensor & intersection, const LamParams & p)
{
  if (intersection.dim() != 3 || p.reduce_weight.dim() != 2 || p.reduce_weight.size(0) != intersection.size(2) ||
      p.reduce_weight.size(1) != 1 || p.reduce_bias.numel() != 1) {
    throw ShapeError(
      "reduce_lam: intersection " + shape_str(intersection.shape()) + " vs weight " +
      shape_str(p.reduce_weight.shape()) + ", bias " + shape_str(p.reduce_bias.shape()));
  }
  const std::size_t n = intersection.size(0);
  return reshape(add(matmul(intersection, p.reduce_weight), reshape(p.reduce_bias, {1})), {n, n});
}

/**
 * @brief A^s[t, i, j] = | w0 * vam[t, i, j] + w1 * lam[i, j] + b |.
 *
 * The label term is shared across all frames. The absolute value keeps the
 * degree matrix of the subsequent normalization real.
 */
inline Tensor fuse_sam(const Tensor & vam, const Tensor & lam, const SamParams & p)
{
  if (vam.dim() != 3 || lam.dim() != 2 || vam.size(1) != lam.size(0) || vam.size(2) != lam.size(1)) {
    throw ShapeError("fuse_sam: vam " + shape_str(vam.shape()) + " vs lam " + shape_str(lam.shape()));
  }
  if (p.fuse_weight.numel() != 2 || p.fuse_bias.numel() != 1) {
    throw ShapeError("fuse_sam: weight must hold 2 values and bias 1");
  }
  const Tensor w_velo = reshape(slice(p.fuse_weight, 0, 0, 1), {1});
  const Tensor w_label = reshape(slice(p.fuse_weight, 0, 1, 1), {1});
  const Tensor label_term = add(mul(lam, w_label), reshape(p.fuse_bias, {1}));
  return abs(add(mul(vam, w_velo), label_term));
}

inline constexpr double kDegreeFloor = 1e-8;

/**
 * @brief Lambda^{-1/2} (A + I) Lambda^{-1/2} with Lambda = diag(row sums of A + I).
 *
 * Accepts [N, N] or a stack [..., N, N]; differentiable in A.
 */
inline Tensor normalize_laplacian(const Tensor & adj)
{
  if (adj.dim() < 2 || adj.size(-1) != adj.size(-2)) {
    throw ShapeError("normalize_laplacian expects [..., N, N], got " + shape_str(adj.shape()));
  }
  const std::size_t n = adj.size(-1);
  const Tensor a_hat = add(adj, Tensor::eye(n));
  const Tensor degree = clamp_min(sum_last(a_hat), kDegreeFloor);  // [..., N, 1]
  const Tensor inv_sqrt = reciprocal(sqrt(degree));
  // scaling by the outer product s_i * s_j keeps symmetric inputs exactly symmetric
  return mul(a_hat, matmul(inv_sqrt, transpose(inv_sqrt)));
}

}  // namespace semstg
