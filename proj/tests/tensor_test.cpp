#include "semstg/gradcheck.hpp"
#include "semstg/gradcheck_suite.hpp"
#include "semstg/tensor.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <limits>
#include <random>

using namespace semstg;

namespace
{

Tensor random_tensor(std::mt19937_64 & rng, Shape shape, bool grad = false)
{
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto & x : v) x = d(rng);
  return Tensor::from_values(std::move(shape), std::move(v), grad);
}

std::vector<double> vec(const Tensor & t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Tensor, RejectsNonFiniteLeafValues)
{
  EXPECT_THROW(Tensor::from_values({2}, {1.0, std::numeric_limits<double>::quiet_NaN()}), DomainError);
  EXPECT_THROW(Tensor::from_values({1}, {std::numeric_limits<double>::infinity()}), DomainError);
  EXPECT_THROW(Tensor::from_values({3}, {1.0, 2.0}), ShapeError);
}

TEST(Tensor, MatmulSmallExample)
{
  const Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from_values({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(vec(matmul(a, b)), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Tensor, MatmulMatchesTripleLoopWithBroadcastBatch)
{
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor(rng, {3, 4, 5});
  const Tensor b = random_tensor(rng, {5, 2});
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 4, 2}));
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        double ref = 0.0;
        for (std::size_t m = 0; m < 5; ++m) ref += a.at({k, i, m}) * b.at({m, j});
        EXPECT_NEAR(c.at({k, i, j}), ref, 1e-12);
      }
    }
  }
  EXPECT_THROW(matmul(a, Tensor::zeros({4, 2})), ShapeError);
}

TEST(Tensor, BroadcastAddAndShapeErrors)
{
  const Tensor a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from_values({3}, {10, 20, 30});
  EXPECT_EQ(vec(add(a, b)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_THROW(add(a, Tensor::zeros({2})), ShapeError);
}

TEST(Tensor, PreluExample)
{
  const Tensor x = Tensor::from_values({3}, {-2, 0, 3});
  const Tensor y = prelu(x, Tensor::from_values({1}, {0.25}));
  EXPECT_EQ(vec(y), (std::vector<double>{-0.5, 0.0, 3.0}));
}

TEST(Tensor, DomainErrors)
{
  EXPECT_THROW(reciprocal(Tensor::from_values({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(sqrt(Tensor::from_values({1}, {-1.0})), DomainError);
  EXPECT_THROW(log(Tensor::from_values({1}, {0.0})), DomainError);
  EXPECT_NO_THROW(sqrt(Tensor::from_values({1}, {4.0})));
}

TEST(Tensor, ConvTemporalMatchesSlidingWindowOracle)
{
  std::mt19937_64 rng(5);
  const std::size_t cin = 2, cout = 3, t = 6, n = 4, kt = 3;
  const Tensor x = random_tensor(rng, {cin, t, n});
  const Tensor k = random_tensor(rng, {cout, cin, kt});
  const Tensor b = random_tensor(rng, {cout});
  const Tensor y = conv_temporal(x, k, b, 1);
  ASSERT_EQ(y.shape(), (Shape{cout, t, n}));
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t tt = 0; tt < t; ++tt) {
      for (std::size_t v = 0; v < n; ++v) {
        double ref = b.at({o});
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t j = 0; j < kt; ++j) {
            const long src = static_cast<long>(tt + j) - 1;
            if (src < 0 || src >= static_cast<long>(t)) continue;
            ref += k.at({o, c, j}) * x.at({c, static_cast<std::size_t>(src), v});
          }
        }
        EXPECT_NEAR(y.at({o, tt, v}), ref, 1e-12);
      }
    }
  }
}

TEST(Tensor, ConvTemporalBoundaryUsesTwoTaps)
{
  // all-ones input and kernel: interior outputs sum 3 taps, the padded ends only 2
  const Tensor x = Tensor::full({1, 5, 1}, 1.0);
  const Tensor k = Tensor::full({1, 1, 3}, 1.0);
  EXPECT_EQ(vec(conv_temporal(x, k, 1)), (std::vector<double>{2, 3, 3, 3, 2}));
}

TEST(Backward, SumAndSquareExamples)
{
  const Tensor x = Tensor::from_values({3}, {1, 2, 3}, true);
  sum(x).backward();
  EXPECT_EQ(vec(Tensor::from_values({3}, {x.grad().begin(), x.grad().end()})), (std::vector<double>{1, 1, 1}));

  const Tensor y = Tensor::from_values({2}, {1, 2}, true);
  sum(mul(y, y)).backward();
  EXPECT_DOUBLE_EQ(y.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.grad()[1], 4.0);
}

TEST(Backward, NonScalarRootIsAContractError)
{
  const Tensor x = Tensor::from_values({2}, {1, 2}, true);
  EXPECT_THROW(mul_scalar(x, 2.0).backward(), ContractError);
}

TEST(Backward, UnreachableLeafKeepsZeroGrad)
{
  const Tensor x = Tensor::from_values({2}, {1, 2}, true);
  const Tensor unused = Tensor::from_values({2}, {3, 4}, true);
  sum(square(x)).backward();
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, LinearityOverSumOfLosses)
{
  std::mt19937_64 rng(9);
  Tensor x = random_tensor(rng, {4, 3}, true);
  const Tensor w = random_tensor(rng, {3, 2});
  auto l1 = [&] { return sum(tanh(matmul(x, w))); };
  auto l2 = [&] { return sum(exp(mul_scalar(x, 0.5))); };

  l1().backward();
  const auto g1 = vec(Tensor::from_values(x.shape(), {x.grad().begin(), x.grad().end()}));
  x.zero_grad();
  l2().backward();
  const std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.zero_grad();
  add(l1(), l2()).backward();
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(x.grad()[i], g1[i] + g2[i], 1e-12);
}

TEST(Backward, ReplayIsBitIdentical)
{
  std::mt19937_64 rng(11);
  Tensor x = random_tensor(rng, {3, 3}, true);
  const Tensor loss = sum(square(tanh(matmul(x, transpose(x)))));
  const auto rec = ComputationRecord::trace(loss);
  rec.backward();
  const std::vector<double> first(x.grad().begin(), x.grad().end());
  x.zero_grad();
  rec.backward();
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(x.grad()[i], first[i]);
}

TEST(ComputationRecord, InputsPrecedeConsumers)
{
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor(rng, {2, 2}, true);
  const Tensor h = tanh(x);
  const Tensor loss = sum(add(mul(h, h), exp(h)));
  const auto rec = ComputationRecord::trace(loss);
  std::unordered_map<const detail::Node *, std::size_t> pos;
  for (std::size_t i = 0; i < rec.nodes().size(); ++i) pos[rec.nodes()[i].get()] = i;
  for (const auto & n : rec.nodes()) {
    for (const auto & in : n->inputs) {
      if (pos.count(in.get())) {
        EXPECT_LT(pos[in.get()], pos[n.get()]);
      }
    }
  }
  EXPECT_EQ(rec.nodes().back().get(), loss.node().get());
  // the shared intermediate appears once
  const auto names = rec.op_names();
  EXPECT_EQ(std::count(names.begin(), names.end(), "tanh"), 1);
}

TEST(NoGrad, GuardSkipsRecording)
{
  const Tensor x = Tensor::from_values({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(square(x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(ComputationRecord::trace(y).size(), 0u);
}

TEST(Shapes, PermuteSliceConcatRoundTrip)
{
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor(rng, {2, 3, 4});
  const Tensor p = permute(x, {2, 0, 1});
  EXPECT_EQ(p.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(p.at({3, 1, 2}), x.at({1, 2, 3}));
  const Tensor joined = concat({slice(x, 1, 0, 1), slice(x, 1, 1, 2)}, 1);
  EXPECT_EQ(vec(joined), vec(x));
  EXPECT_THROW(slice(x, 1, 2, 2), ShapeError);
  EXPECT_THROW(reshape(x, {5, 5}), ShapeError);
}

TEST(GradCheck, SumOfSquaresIsExactToRoundoff)
{
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor(rng, {6});
  EXPECT_LT(gradient_check([](const Tensor & t) { return sum(square(t)); }, x), 1e-8);
}

TEST(GradCheck, PreluAwayFromZero)
{
  const Tensor x = Tensor::from_values({5}, {-1.5, -0.3, 0.4, 1.1, 2.0});
  const Tensor slope = Tensor::from_values({1}, {0.25});
  EXPECT_LT(gradient_check([&](const Tensor & t) { return sum(prelu(t, slope)); }, x), 1e-6);
}

TEST(GradCheck, NonFiniteEvaluationIsADomainError)
{
  const Tensor x = Tensor::from_values({1}, {1e-6});
  auto f = [](const Tensor & t) { return sum(log(t)); };
  EXPECT_THROW(gradient_check(f, x, 1e-5), DomainError);
}

TEST(GradCheck, DetectsAWrongDerivative)
{
  // a custom op whose backward is off by 10%
  auto f = [](const Tensor & t) {
    return sum(map_unary(
      t, "bad_cube", [](double v) { return v * v * v; }, [](double v, double) { return 3.3 * v * v; }));
  };
  const Tensor x = Tensor::from_values({3}, {0.5, -1.0, 1.5});
  EXPECT_GT(gradient_check(f, x), 0.05);
}

TEST(GradCheck, EveryPrimitiveAtTenRandomPoints)
{
  const auto cases = gradcheck_cases(2024, 10, false);
  for (const auto & o : run_gradcheck_suite(cases)) {
    EXPECT_TRUE(o.error.empty()) << o.name << ": " << o.error;
    EXPECT_LT(o.max_rel_error, 1e-4) << o.name;
  }
}
