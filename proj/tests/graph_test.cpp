#include "semstg/data.hpp"
#include "semstg/gradcheck.hpp"
#include "semstg/graph.hpp"
#include "semstg/synth.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace semstg;

namespace
{

std::vector<double> vec(const Tensor & t) { return {t.values().begin(), t.values().end()}; }

Tensor onehots(const std::vector<std::size_t> & labels, std::size_t c)
{
  std::vector<double> v(labels.size() * c, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) v[i * c + labels[i]] = 1.0;
  return Tensor::from_values({labels.size(), c}, std::move(v));
}

/// Cyclic Jacobi rotations; returns the eigenvalues of a symmetric matrix.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n)
{
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::fabs(a[p * n + q]) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * a[p * n + q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
  return ev;
}

LamParams lam_params(std::vector<double> w, double b)
{
  const std::size_t k = w.size();
  return {Tensor::from_values({k, 1}, std::move(w)), Tensor::from_values({1}, {b})};
}

SamParams sam_params(double w0, double w1, double b)
{
  return {Tensor::from_values({2, 1}, {w0, w1}), Tensor::from_values({1}, {b})};
}

}  // namespace

TEST(Vam, ThreeFourFiveAndCoincidentVelocities)
{
  const Tensor v = Tensor::from_values({3, 1, 2}, {3, 4, 0, 0, 0, 0});
  const Tensor a = build_vam(v);
  ASSERT_EQ(a.shape(), (Shape{1, 3, 3}));
  EXPECT_DOUBLE_EQ(a.at({0, 0, 1}), 0.2);
  EXPECT_DOUBLE_EQ(a.at({0, 1, 0}), 0.2);
  EXPECT_EQ(a.at({0, 1, 2}), 0.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.at({0, i, i}), 0.0);
}

TEST(Vam, SymmetricZeroDiagonalNonNegativeOnSyntheticWindows)
{
  const auto ws = synth_generate(21, 100, SynthConfig::interaction_default(), ClassVocabulary());
  for (const auto & w : ws) {
    const Tensor a = build_vam(to_velocities(w));
    const std::size_t n = w.num_objects();
    for (std::size_t t = 0; t < w.t_obs; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        EXPECT_EQ(a.at({t, i, i}), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
          EXPECT_EQ(a.at({t, i, j}), a.at({t, j, i}));
          EXPECT_GE(a.at({t, i, j}), 0.0);
          EXPECT_TRUE(std::isfinite(a.at({t, i, j})));
        }
      }
    }
  }
}

TEST(Intersection, ThreeObjectExample)
{
  // vocabulary [Biker, Pedestrian]; objects Ped1, Biker1, Ped2
  const Tensor it = build_intersection(onehots({1, 0, 1}, 2));
  ASSERT_EQ(it.shape(), (Shape{3, 3, 4}));
  auto entry = [&](std::size_t i, std::size_t j) {
    std::vector<double> e;
    for (std::size_t k = 0; k < 4; ++k) e.push_back(it.at({i, j, k}));
    return e;
  };
  const std::vector<double> pp{0, 1, 0, 1}, pb{1, 0, 0, 1}, bp{0, 1, 1, 0}, bb{1, 0, 1, 0};
  EXPECT_EQ(entry(0, 0), pp);
  EXPECT_EQ(entry(0, 1), pb);
  EXPECT_EQ(entry(0, 2), pp);
  EXPECT_EQ(entry(1, 0), bp);
  EXPECT_EQ(entry(1, 1), bb);
  EXPECT_EQ(entry(1, 2), bp);
  EXPECT_EQ(entry(2, 0), pp);
  EXPECT_EQ(entry(2, 1), pb);
  EXPECT_EQ(entry(2, 2), pp);
}

TEST(Intersection, SwappedHalvesAndTwoOnes)
{
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> cls(0, 5);
  std::vector<std::size_t> labels(7);
  for (auto & l : labels) l = cls(rng);
  const Tensor it = build_intersection(onehots(labels, 6));
  for (std::size_t i = 0; i < 7; ++i) {
    for (std::size_t j = 0; j < 7; ++j) {
      double total = 0.0;
      for (std::size_t k = 0; k < 6; ++k) {
        EXPECT_EQ(it.at({i, j, k}), it.at({j, i, k + 6}));
        total += it.at({i, j, k}) + it.at({i, j, k + 6});
      }
      EXPECT_EQ(total, 2.0);
    }
  }
}

TEST(Lam, ZeroAllOnesAndSameClassSymmetry)
{
  const Tensor it = build_intersection(onehots({1, 0, 1}, 2));
  for (double x : vec(reduce_lam(it, lam_params({0, 0, 0, 0}, 0.0)))) EXPECT_EQ(x, 0.0);
  for (double x : vec(reduce_lam(it, lam_params({1, 1, 1, 1}, 0.0)))) EXPECT_EQ(x, 2.0);
  const Tensor l = reduce_lam(it, lam_params({0.3, -0.7, 1.1, 0.2}, 0.05));
  EXPECT_EQ(l.at({0, 2}), l.at({2, 0}));
  EXPECT_THROW(reduce_lam(it, lam_params({1, 1, 1}, 0.0)), ShapeError);
}

TEST(Lam, PermutationEquivariant)
{
  const std::vector<std::size_t> labels{2, 0, 1, 2, 5};
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<std::size_t> permuted(labels.size());
  for (std::size_t i = 0; i < perm.size(); ++i) permuted[i] = labels[perm[i]];
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  std::vector<double> w(12);
  for (auto & x : w) x = g(rng);
  const auto p = lam_params(w, 0.4);
  const Tensor a = reduce_lam(build_intersection(onehots(labels, 6)), p);
  const Tensor b = reduce_lam(build_intersection(onehots(permuted, 6)), p);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(b.at({i, j}), a.at({perm[i], perm[j]}));
  }
}

TEST(Sam, ProjectionsAndAffineExample)
{
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-2, 2);
  std::vector<double> vel(4 * 3 * 2);
  for (auto & x : vel) x = u(rng);
  const Tensor vam = build_vam(Tensor::from_values({4, 3, 2}, vel));
  const Tensor lam = reduce_lam(build_intersection(onehots({0, 1, 1, 2}, 3)), lam_params({1, -2, 0.5, 0.3, 1, -1}, 0.1));

  EXPECT_EQ(vec(fuse_sam(vam, lam, sam_params(1, 0, 0))), vec(vam));

  const Tensor label_only = fuse_sam(vam, lam, sam_params(0, 1, 0));
  for (std::size_t t = 1; t < 3; ++t) {
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(label_only.at({t, i, j}), label_only.at({0, i, j}));
    }
  }
  for (double x : vec(fuse_sam(vam, lam, sam_params(-3, 2, -0.5)))) EXPECT_GE(x, 0.0);

  const Tensor one = fuse_sam(
    Tensor::from_values({1, 1, 1}, {0.2}), Tensor::from_values({1, 1}, {0.3}), sam_params(1, 1, 0));
  EXPECT_NEAR(one.at({0, 0, 0}), 0.5, 1e-15);
}

TEST(Sam, SymmetricWhenAllClassesMatch)
{
  const auto ws = synth_generate(8, 10, SynthConfig::null_default(), ClassVocabulary());
  for (const auto & w : ws) {
    const Tensor vam = build_vam(to_velocities(w));
    const std::size_t n = w.num_objects();
    const Tensor lam = reduce_lam(build_intersection(onehots(std::vector<std::size_t>(n, 2), 6)),
                                  lam_params({1, 2, 3, 4, 5, 6, -1, -2, -3, -4, -5, -6}, 0.2));
    const Tensor s = fuse_sam(vam, lam, sam_params(0.7, -1.3, 0.1));
    for (std::size_t t = 0; t < w.t_obs; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(s.at({t, i, j}), s.at({t, j, i}));
      }
    }
  }
}

TEST(Laplacian, ZeroGivesIdentityAndTwoNodeExample)
{
  EXPECT_EQ(vec(normalize_laplacian(Tensor::zeros({4, 4}))), vec(Tensor::eye(4)));
  const Tensor two = normalize_laplacian(Tensor::from_values({2, 2}, {0, 1, 1, 0}));
  for (double x : vec(two)) EXPECT_NEAR(x, 0.5, 1e-15);
}

TEST(Laplacian, StackMatchesPerFrame)
{
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 3);
  std::vector<double> v(3 * 4 * 4);
  for (auto & x : v) x = u(rng);
  const Tensor stack = normalize_laplacian(Tensor::from_values({3, 4, 4}, v));
  for (std::size_t t = 0; t < 3; ++t) {
    const Tensor one = normalize_laplacian(
      Tensor::from_values({4, 4}, std::vector<double>(v.begin() + t * 16, v.begin() + (t + 1) * 16)));
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(stack.at({t, i, j}), one.at({i, j}));
    }
  }
}

TEST(Laplacian, SymmetricWithSpectrumInUnitInterval)
{
  // entry-wise oracle plus eigenvalues from an independent Jacobi solver
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0, 2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(25, 0.0);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = i + 1; j < 5; ++j) a[i * 5 + j] = a[j * 5 + i] = u(rng);
    }
    const Tensor l = normalize_laplacian(Tensor::from_values({5, 5}, a));
    std::vector<double> deg(5, 1.0);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) deg[i] += a[i * 5 + j];
    }
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        const double expect = (a[i * 5 + j] + (i == j ? 1.0 : 0.0)) / std::sqrt(deg[i] * deg[j]);
        EXPECT_NEAR(l.at({i, j}), expect, 1e-14);
        EXPECT_EQ(l.at({i, j}), l.at({j, i}));
      }
    }
    for (double ev : jacobi_eigenvalues(vec(l), 5)) {
      EXPECT_LE(ev, 1.0 + 1e-12);
      EXPECT_GE(ev, -1.0 - 1e-12);
    }
  }
}

TEST(Laplacian, GradientThroughFusionPassesCheck)
{
  const Tensor vam = build_vam(Tensor::from_values({3, 2, 2}, {0.3, -0.1, 1.2, 0.4, -0.7, 0.9, 0.2, 0.2, 1.0, -1.0, 0.5, 0.8}));
  const Tensor it = build_intersection(onehots({0, 1, 0}, 2));
  auto f = [&](const Tensor & x) {
    const LamParams lp{reshape(slice(x, 0, 0, 4), {4, 1}), slice(x, 0, 4, 1)};
    const SamParams sp{reshape(slice(x, 0, 5, 2), {2, 1}), slice(x, 0, 7, 1)};
    const Tensor l = normalize_laplacian(fuse_sam(vam, reduce_lam(it, lp), sp));
    return sum(mul(l, l));
  };
  const Tensor x = Tensor::from_values({8}, {0.4, -0.3, 0.8, 0.5, 0.3, 0.9, 0.6, 0.7});
  EXPECT_LT(gradient_check(f, x), 1e-4);
}
