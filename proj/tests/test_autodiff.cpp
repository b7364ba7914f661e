// Copyright (c) 2026, the elab authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "elab/adam.hpp"
#include "elab/autodiff.hpp"
#include "elab/rng.hpp"

using namespace elab;
using ad::Tape;
using ad::Var;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Matmul, IdentityIsNeutral) {
  Tape<float> tape;
  auto a = tape.constant({2, 2}, {1, 2, 3, 4});
  auto i2 = tape.constant({2, 2}, {1, 0, 0, 1});
  auto c = ad::matmul(a, i2);
  EXPECT_EQ(std::vector<float>(c.value().begin(), c.value().end()), (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, ZeroAnnihilates) {
  Tape<float> tape;
  auto z = tape.constant({2, 2}, {0, 0, 0, 0});
  auto b = tape.constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto c = ad::matmul(z, b);
  for (float v : c.value()) EXPECT_EQ(v, 0.0f);
}

TEST(Matmul, HandMultiplied) {
  // [[1,2],[3,4]] x [[5,6],[7,8]]: 1*5+2*7=19, 1*6+2*8=22, 3*5+4*7=43, 3*6+4*8=50
  Tape<float> tape;
  auto c = ad::matmul(tape.constant({2, 2}, {1, 2, 3, 4}), tape.constant({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(std::vector<float>(c.value().begin(), c.value().end()), (std::vector<float>{19, 22, 43, 50}));
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  Tape<float> tape;
  auto a = tape.constant({2, 3}, std::vector<float>(6, 1.0f));
  auto b = tape.constant({2, 2}, std::vector<float>(4, 1.0f));
  EXPECT_THROW(ad::matmul(a, b), DimensionError);
}

TEST(Matmul, AssociativeWithinTolerance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, "assoc");
    Tape<float> tape;
    auto mk = [&](std::size_t m, std::size_t n) {
      std::vector<float> v(m * n);
      for (auto& x : v) x = static_cast<float>(rng.normal());
      return tape.constant({m, n}, v);
    };
    auto a = mk(3, 4), b = mk(4, 5), c = mk(5, 2);
    auto left = ad::matmul(ad::matmul(a, b), c);
    auto right = ad::matmul(a, ad::matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) EXPECT_NEAR(left.value()[i], right.value()[i], 1e-4);
  }
}

TEST(Softmax, SymmetricRow) {
  Tape<double> tape;
  auto y = ad::softmax_rows(tape.constant({1, 2}, {0, 0}));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Softmax, AnalyticRow) {
  Tape<double> tape;
  auto y = ad::softmax_rows(tape.constant({1, 2}, {std::log(1.0), std::log(3.0)}));
  EXPECT_NEAR(y.value()[0], 0.25, 1e-12);
  EXPECT_NEAR(y.value()[1], 0.75, 1e-12);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Rng rng(3, "softmax");
  Tape<float> tape;
  std::vector<float> x(4 * 7), xs(4 * 7);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = static_cast<float>(5.0 * rng.normal());
    xs[i] = x[i] + 11.5f;
  }
  auto y = ad::softmax_rows(tape.constant({4, 7}, x));
  auto ys = ad::softmax_rows(tape.constant({4, 7}, xs));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_GE(y.value()[r * 7 + j], 0.0f);
      EXPECT_NEAR(y.value()[r * 7 + j], ys.value()[r * 7 + j], 1e-6);
      s += y.value()[r * 7 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  auto lp = ad::log_softmax_rows(tape.constant({4, 7}, x));
  for (float v : lp.value()) EXPECT_LE(v, 0.0f);
}

TEST(Softmax, NanInputIsNumericError) {
  Tape<float> tape;
  auto x = tape.constant({1, 2}, {0.0f, std::nanf("")});
  EXPECT_THROW(ad::softmax_rows(x), NumericError);
}

TEST(Softmax, CausalMaskZeroesFuture) {
  Tape<double> tape;
  auto y = ad::softmax_rows(tape.constant({3, 3}, std::vector<double>(9, 0.0)), true);
  EXPECT_DOUBLE_EQ(y.value()[0], 1.0);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(y.value()[3], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[5], 0.0);
  EXPECT_NEAR(y.value()[8], 1.0 / 3.0, 1e-15);
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tape<double> tape;
  const std::vector<int> targets{0, 3};
  auto loss = ad::cross_entropy_loss(tape.constant({2, 4}, std::vector<double>(8, 0.7)), std::span<const int>(targets));
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentTargetApproachesZero) {
  Tape<double> tape;
  const std::vector<int> targets{1};
  auto loss = ad::cross_entropy_loss(tape.constant({1, 3}, {0.0, 60.0, 0.0}), std::span<const int>(targets));
  EXPECT_LT(loss.item(), 1e-20);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  const std::vector<double> x{0.3, -1.2, 2.0, 0.5, 0.5, -0.25};
  const std::vector<int> targets{2, 0};
  // Oracle: -mean(log(exp(x_t) / sum exp(x))) evaluated row by row.
  double expect = 0.0;
  for (int r = 0; r < 2; ++r) {
    double z = 0.0;
    for (int j = 0; j < 3; ++j) z += std::exp(x[r * 3 + j]);
    expect += -std::log(std::exp(x[r * 3 + targets[r]]) / z);
  }
  expect /= 2.0;
  Tape<double> tape;
  auto loss = ad::cross_entropy_loss(tape.constant({2, 3}, x), std::span<const int>(targets));
  EXPECT_NEAR(loss.item(), expect, 1e-14);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
  Tape<double> tape;
  const std::vector<int> targets{3};
  EXPECT_THROW(ad::cross_entropy_loss(tape.constant({1, 3}, {0, 0, 0}), std::span<const int>(targets)), IndexError);
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  Tape<double> tape;
  auto y = ad::layer_norm(tape.constant({1, 4}, {2, 2, 2, 2}), tape.constant({4}, {1, 1, 1, 1}),
                          tape.constant({4}, {0, 0, 0, 0}), 1e-5);
  for (double v : y.value()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(LayerNorm, StandardizedVectorIsFixedPoint) {
  const double s = std::sqrt(2.0);
  // mean 0, population variance 1
  const std::vector<double> x{-s, 0.0, s, 0.0};
  Tape<double> tape;
  auto y = ad::layer_norm(tape.constant({1, 4}, x), tape.constant({4}, {1, 1, 1, 1}), tape.constant({4}, {0, 0, 0, 0}),
                          1e-9);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y.value()[i], x[i], 1e-5);
}

TEST(LayerNorm, OneTwoThreeMatchesFormula) {
  // Oracle: mean 2, population variance 2/3, y = (x - 2) / sqrt(2/3 + eps).
  const double eps = 1e-5;
  const double rs = 1.0 / std::sqrt(2.0 / 3.0 + eps);
  Tape<double> tape;
  auto y = ad::layer_norm(tape.constant({1, 3}, {1, 2, 3}), tape.constant({3}, {1, 1, 1}), tape.constant({3}, {0, 0, 0}),
                          eps);
  EXPECT_NEAR(y.value()[0], -rs, 1e-12);
  EXPECT_NEAR(y.value()[1], 0.0, 1e-12);
  EXPECT_NEAR(y.value()[2], rs, 1e-12);
}

TEST(LayerNorm, ZeroWidthIsDimensionError) {
  Tape<double> tape;
  auto x = tape.constant({2, 0}, {});
  auto g = tape.constant({0}, {});
  EXPECT_THROW(ad::layer_norm(x, g, g, 1e-5), DimensionError);
}

TEST(Backward, SquareAtThree) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({1}, {3.0}));
  auto y = ad::square(x);
  tape.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, UnreachableParameterHasZeroGrad) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({1}, {3.0}));
  auto p = tape.leaf(Tensor<double>({2}, {1.0, -1.0}));
  tape.backward(ad::square(x));
  EXPECT_EQ(p.grad()[0], 0.0);
  EXPECT_EQ(p.grad()[1], 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({2}, {1.0, 2.0}));
  EXPECT_THROW(tape.backward(ad::square(x)), ContractError);
}

TEST(Backward, SharedOperandAccumulates) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({1}, {2.0}));
  auto y = ad::mul(x, x);  // x^2
  auto z = ad::add(y, x);  // x^2 + x
  tape.backward(ad::sum(z));
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
}

// --- Finite-difference checks ------------------------------------------------

class OpGradients : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpGradients, EveryOpMatchesCentralDifferences) {
  Rng rng(GetParam(), "opgrad");
  using Leaves = std::span<const Var<double>>;
  auto check = [&](const char* name, auto f, std::vector<Tensor<double>> pt) {
    auto rep = ad::grad_check(f, pt, 1e-4, 1e-4);
    EXPECT_TRUE(rep.passed) << name << " max rel err " << rep.max_rel_error
                            << (rep.failures.empty() ? "" : " first: " + rep.failures[0]);
  };
  auto w = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.normal();
    return v;
  };
  check("matmul", [](Tape<double>&, Leaves in) { return ad::sum(ad::square(ad::matmul(in[0], in[1]))); },
        {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  check("matmul_bt", [](Tape<double>&, Leaves in) { return ad::sum(ad::square(ad::matmul_bt(in[0], in[1]))); },
        {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng)});
  const auto wts = w(6);
  check("add/sub/mul",
        [&](Tape<double>& t, Leaves in) {
          auto c = t.constant({2, 3}, wts);
          return ad::sum(ad::mul(ad::sub(ad::add(in[0], in[1]), c), in[0]));
        },
        {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  check("scale/add_bias",
        [&](Tape<double>& t, Leaves in) {
          return ad::sum(ad::mul(ad::scale(ad::add_bias(in[0], in[1]), 0.7), t.constant({2, 3}, wts)));
        },
        {random_tensor({2, 3}, rng), random_tensor({3}, rng)});
  check("exp", [&](Tape<double>& t, Leaves in) { return ad::sum(ad::mul(ad::exp(in[0]), t.constant({6}, wts))); },
        {random_tensor({6}, rng, 0.5)});
  check("softplus",
        [&](Tape<double>& t, Leaves in) { return ad::sum(ad::mul(ad::softplus(in[0]), t.constant({6}, wts))); },
        {random_tensor({6}, rng, 3.0)});
  check("gelu", [&](Tape<double>& t, Leaves in) { return ad::sum(ad::mul(ad::gelu(in[0]), t.constant({6}, wts))); },
        {random_tensor({6}, rng, 2.0)});
  check("layer_norm",
        [&](Tape<double>& t, Leaves in) {
          return ad::sum(ad::mul(ad::layer_norm(in[0], in[1], in[2], 1e-5), t.constant({2, 3}, wts)));
        },
        {random_tensor({2, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
  check("softmax_rows",
        [&](Tape<double>& t, Leaves in) { return ad::sum(ad::mul(ad::softmax_rows(in[0]), t.constant({2, 3}, wts))); },
        {random_tensor({2, 3}, rng)});
  const auto wsq = w(9);
  check("softmax_rows causal",
        [&](Tape<double>& t, Leaves in) {
          return ad::sum(ad::mul(ad::softmax_rows(in[0], true), t.constant({3, 3}, wsq)));
        },
        {random_tensor({3, 3}, rng)});
  check("log_softmax_rows",
        [&](Tape<double>& t, Leaves in) {
          return ad::sum(ad::mul(ad::log_softmax_rows(in[0]), t.constant({2, 3}, wts)));
        },
        {random_tensor({2, 3}, rng)});
  const std::vector<int> idx{2, 0};
  check("log_softmax+pick (softmax/cross-entropy composite)",
        [&](Tape<double>&, Leaves in) { return ad::sum(ad::pick(ad::log_softmax_rows(in[0]), idx)); },
        {random_tensor({2, 3}, rng)});
  check("cross_entropy_loss", [&](Tape<double>&, Leaves in) { return ad::cross_entropy_loss(in[0], idx); },
        {random_tensor({2, 3}, rng)});
  const std::vector<double> cw{0.25, 1.5};
  check("cross_entropy_loss weighted",
        [&](Tape<double>&, Leaves in) {
          return ad::cross_entropy_loss(in[0], std::span<const int>(idx), std::span<const double>(cw));
        },
        {random_tensor({2, 3}, rng)});
  const std::vector<int> ids{1, 0, 1, 2};
  check("embedding",
        [&](Tape<double>&, Leaves in) { return ad::sum(ad::square(ad::embedding(in[0], std::span<const int>(ids)))); },
        {random_tensor({3, 2}, rng)});
  const auto w10 = w(10);
  check("slice/concat",
        [&](Tape<double>& t, Leaves in) {
          std::vector<Var<double>> parts{ad::slice_cols(in[0], 1, 2), ad::slice_rows(in[1], 0, 2)};
          return ad::sum(ad::mul(ad::concat_cols<double>(parts), t.constant({2, 5}, w10)));
        },
        {random_tensor({2, 4}, rng), random_tensor({3, 3}, rng)});
  // Clamp and minimum are piecewise linear; sampled points avoid kinks w.p. 1.
  check("clamp/minimum",
        [&](Tape<double>&, Leaves in) {
          return ad::sum(ad::mul(ad::minimum(ad::clamp(in[0], -0.5, 0.5), in[1]), in[1]));
        },
        {random_tensor({6}, rng), random_tensor({6}, rng)});
  check("mean", [](Tape<double>&, Leaves in) { return ad::mean(ad::square(in[0])); }, {random_tensor({5}, rng)});
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradients, ::testing::Range<std::uint64_t>(0, 20));

TEST(GradCheck, LinearFunctionIsExact) {
  const std::vector<double> c{1.5, -2.0, 0.25};
  auto rep = ad::grad_check(
      [&](Tape<double>& t, std::span<const Var<double>> in) { return ad::sum(ad::mul(in[0], t.constant({3}, c))); },
      {Tensor<double>({3}, {0.1, 0.2, 0.3})});
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(GradCheck, CorruptedRuleIsCaught) {
  // Square whose backward claims d/dx = x instead of 2x.
  auto bad_square = [](Var<double> a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * a.value()[i];
    Tape<double>& tape = a.tape();
    const std::size_t self = tape.size();
    return tape.record(a.shape(), std::move(out), {a}, [a, self](Tape<double>& t) {
      const auto g = t.grad(Var<double>(&t, self));
      auto ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += a.value()[i] * g[i];
    });
  };
  auto rep = ad::grad_check([&](Tape<double>&, std::span<const Var<double>> in) { return ad::sum(bad_square(in[0])); },
                            {Tensor<double>({2}, {0.7, -1.3})});
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.failed, 2u);
}

// --- Adam ------------------------------------------------------------------------

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::vector<Tensor<double>> params{Tensor<double>({3}, {1.0, -2.0, 0.5})};
  AdamState<double> st(params, 1e-2);
  const auto before = params[0];
  for (int i = 0; i < 5; ++i) adam_step(st, params, Gradients<double>{{0.0, 0.0, 0.0}});
  EXPECT_EQ(params[0], before);
  EXPECT_EQ(st.step, 5u);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  std::vector<Tensor<double>> params{Tensor<double>({2}, {1.0, 1.0})};
  AdamState<double> st(params, 0.01);
  adam_step(st, params, Gradients<double>{{3.0, -0.5}});
  EXPECT_NEAR(params[0][0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(params[0][1], 1.0 + 0.01, 1e-9);
}

TEST(Adam, ThreeStepsMatchRecursion) {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double gs[3] = {0.5, -1.0, 2.0};
  // Oracle: the textbook bias-corrected recursion, written out independently.
  double x = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    m = b1 * m + (1 - b1) * gs[t - 1];
    v = b2 * v + (1 - b2) * gs[t - 1] * gs[t - 1];
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    x -= lr * mh / (std::sqrt(vh) + eps);
  }
  std::vector<Tensor<double>> params{Tensor<double>({1}, {1.0})};
  AdamState<double> st(params, lr);
  for (double g : gs) adam_step(st, params, Gradients<double>{{g}});
  EXPECT_NEAR(params[0][0], x, 1e-12);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<Tensor<double>> params{Tensor<double>({2})};
  AdamState<double> st(params, 0.1);
  EXPECT_THROW(adam_step(st, params, Gradients<double>{{1.0}}), DimensionError);
}

TEST(Adam, StepOverflowIsContractError) {
  std::vector<Tensor<double>> params{Tensor<double>({1})};
  AdamState<double> st(params, 0.1);
  st.step = std::numeric_limits<std::uint64_t>::max();
  EXPECT_THROW(adam_step(st, params, Gradients<double>{{1.0}}), ContractError);
}

TEST(Rng, StreamsAreIndependentOfCallOrder) {
  Rng a(42, "x", 3);
  Rng b(42, "x", 3);
  Rng other(42, "y", 3);
  for (int i = 0; i < 10; ++i) other.next_u64();
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(42, "x", 3).next_u64(), Rng(42, "x", 4).next_u64());
  EXPECT_NE(Rng(42, "x", 3).next_u64(), Rng(43, "x", 3).next_u64());
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(a.uniform_int(7), 7u);
  }
}
