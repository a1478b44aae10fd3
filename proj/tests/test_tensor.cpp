#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "stochca/ops.hpp"

using namespace stochca;

namespace {

Parameter leaf(std::string name, Tensor t) { return Parameter{std::move(name), std::move(t), std::nullopt}; }

Tensor eval(const std::function<Var(Tape&)>& f) {
  Tape t(Tape::Mode::inference);
  return f(t).value();
}

// Weighted sum so every output entry gets a distinct upstream gradient.
Var probe(Tape& t, Var y, const Tensor& w) { return ops::sum(ops::mul(y, t.constant(w))); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Tensor b = Tensor::matrix({{3, 4}, {5, 6}});
  const Tensor c = kernels::matmul(Tensor::matrix({{1, 0}, {0, 1}}), b);
  EXPECT_EQ(c, b);
}

TEST(Matmul, HandDotProduct) {
  EXPECT_EQ(kernels::matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}})), Tensor::matrix({{11}}));
}

TEST(Matmul, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    const Tensor a = oracle::random_tensor(rng, {3, 4});
    const Tensor b = oracle::random_tensor(rng, {4, 2});
    const auto want = oracle::matmul(oracle::to_matrix(a), oracle::to_matrix(b));
    EXPECT_LE(oracle::max_abs_diff(oracle::to_matrix(kernels::matmul(a, b)), want), 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({4, 2}));
  try {
    ops::matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x2"), std::string::npos) << msg;
  }
}

TEST(Softmax, Examples) {
  EXPECT_EQ(kernels::softmax_rows(Tensor::matrix({{0, 0}})), Tensor::matrix({{0.5, 0.5}}));
  EXPECT_EQ(kernels::softmax_rows(Tensor::matrix({{7}})), Tensor::matrix({{1.0}}));
  const Tensor s = kernels::softmax_rows(Tensor::matrix({{1, 2, 3}}));
  const auto want = oracle::softmax({1, 2, 3});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_LE(std::abs(s[j] - want[j]), 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 100; ++rep) {
    const Tensor s = kernels::softmax_rows(oracle::random_tensor(rng, {4, 7}, -30, 30));
    for (std::size_t i = 0; i < 4; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) {
        EXPECT_GE(s(i, j), 0.0);
        sum += s(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, ShiftInvariance) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> grid(-4096, 4096);
  for (int rep = 0; rep < 100; ++rep) {
    // Dyadic entries and integer shifts keep x + c - (max + c) exact.
    Tensor m({3, 5});
    for (double& v : m.values()) v = grid(rng) / 1024.0;
    Tensor shifted = m;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) shifted(i, j) += static_cast<double>(i * 7 + 3);
    EXPECT_EQ(kernels::softmax_rows(m), kernels::softmax_rows(shifted));

    const Tensor r = oracle::random_tensor(rng, {3, 5});
    Tensor rs = r;
    for (double& v : rs.values()) v += 0.3;
    const Tensor a = kernels::softmax_rows(r), b = kernels::softmax_rows(rs);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(LayerNorm, ConstantRowBecomesZero) {
  const Tensor y = eval([](Tape& t) {
    return ops::layer_norm(t.constant(Tensor::matrix({{2.5, 2.5, 2.5}})), t.constant(Tensor({3}, 1.0)),
                           t.constant(Tensor({3}, 0.0)), 1e-6);
  });
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, StandardizedRowIsFixed) {
  const Tensor y = eval([](Tape& t) {
    return ops::layer_norm(t.constant(Tensor::matrix({{1, -1}})), t.constant(Tensor({2}, 1.0)),
                           t.constant(Tensor({2}, 0.0)), 1e-14);
  });
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], -1.0, 1e-12);
}

TEST(LayerNorm, RowStatisticsAndAffine) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    const Tensor x = oracle::random_tensor(rng, {2, 4}, -3, 3);
    for (double eps : {1e-6, 1e-9}) {
      const Tensor y = eval([&](Tape& t) {
        return ops::layer_norm(t.constant(x), t.constant(Tensor({4}, 1.0)), t.constant(Tensor({4}, 0.0)), eps);
      });
      for (std::size_t i = 0; i < 2; ++i) {
        double xm = 0.0, xv = 0.0, mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 4; ++j) xm += x(i, j) / 4;
        for (std::size_t j = 0; j < 4; ++j) xv += (x(i, j) - xm) * (x(i, j) - xm) / 4;
        for (std::size_t j = 0; j < 4; ++j) mean += y(i, j) / 4;
        for (std::size_t j = 0; j < 4; ++j) var += (y(i, j) - mean) * (y(i, j) - mean) / 4;
        EXPECT_LE(std::abs(mean), 1e-12);
        EXPECT_NEAR(var, xv / (xv + eps), 1e-12);
        if (xv > 1e-2 && eps == 1e-9) {
          EXPECT_NEAR(var, 1.0, 1e-6);
        }
      }
    }
    const Tensor g = oracle::random_tensor(rng, {4}), b = oracle::random_tensor(rng, {4});
    const Tensor z = eval([&](Tape& t) { return ops::layer_norm(t.constant(x), t.constant(g), t.constant(b), 1e-6); });
    const auto want = oracle::layer_norm(oracle::to_matrix(x), {g.values().begin(), g.values().end()},
                                         {b.values().begin(), b.values().end()}, 1e-6);
    EXPECT_LE(oracle::max_abs_diff(oracle::to_matrix(z), want), 1e-12);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLn2) {
  const std::vector<int> y{0};
  const double l = eval([&](Tape& t) { return ops::cross_entropy(t.constant(Tensor::matrix({{0, 0}})), y); }).item();
  EXPECT_NEAR(l, std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ConfidentLogits) {
  const std::vector<int> y{0};
  const double l = eval([&](Tape& t) { return ops::cross_entropy(t.constant(Tensor::matrix({{10, -10}})), y); }).item();
  const double want = std::log1p(std::exp(-20.0));
  EXPECT_LE(std::abs(l - want) / want, 1e-12);
  EXPECT_NEAR(l, 2.06e-9, 0.01e-9);
  EXPECT_GT(l, 0.0);
}

TEST(CrossEntropy, IdenticalRowsEqualSingleRow) {
  const std::vector<int> one{1}, two{1, 1};
  const double a = eval([&](Tape& t) { return ops::cross_entropy(t.constant(Tensor::matrix({{0.3, -1.2, 2.0}})), one); }).item();
  const double b = eval([&](Tape& t) {
                     return ops::cross_entropy(t.constant(Tensor::matrix({{0.3, -1.2, 2.0}, {0.3, -1.2, 2.0}})), two);
                   }).item();
  EXPECT_DOUBLE_EQ(a, b);
}

TEST(CrossEntropy, LabelOutOfRange) {
  Tape t;
  Var z = t.constant(Tensor::matrix({{0, 0}}));
  const std::vector<int> bad{2}, neg{-1};
  EXPECT_THROW(ops::cross_entropy(z, bad), IndexError);
  EXPECT_THROW(ops::cross_entropy(z, neg), IndexError);
}

TEST(Backward, SquareAtThree) {
  Parameter x = leaf("x", Tensor::scalar(3.0));
  Tape t;
  Var v = t.param(x);
  t.backward(ops::mul(v, v));
  ASSERT_TRUE(x.grad);
  EXPECT_EQ((*x.grad)[0], 6.0);
}

TEST(Backward, SoftmaxCrossEntropyClosedForm) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 100; ++rep) {
    Parameter z = leaf("z", oracle::random_tensor(rng, {1, 3}, -2, 2));
    const int label = rep % 3;
    const std::vector<int> y{label};
    Tape t;
    t.backward(ops::cross_entropy(t.param(z), y));
    const auto p = oracle::softmax({z.value[0], z.value[1], z.value[2]});
    for (int j = 0; j < 3; ++j) EXPECT_LE(std::abs((*z.grad)[j] - (p[j] - (j == label ? 1.0 : 0.0))), 1e-12);
  }
}

TEST(Backward, NonScalarLossIsContractError) {
  Parameter x = leaf("x", Tensor({2, 2}, 1.0));
  Tape t;
  EXPECT_THROW(t.backward(t.param(x)), ContractError);
}

TEST(Backward, UnreachableParameterGetsNoGradient) {
  Parameter a = leaf("a", Tensor::scalar(2.0));
  Parameter b = leaf("b", Tensor::scalar(5.0));
  Tape t;
  Var va = t.param(a);
  Var vb = t.param(b);
  ops::scale(vb, 3.0);  // recorded but not an ancestor of the loss
  t.backward(ops::mul(va, va));
  EXPECT_TRUE(a.grad);
  EXPECT_FALSE(b.grad);
}

TEST(Backward, GradientsAccumulateOverSharedUse) {
  Parameter a = leaf("a", Tensor::scalar(2.0));
  Tape t;
  Var v = t.param(a);
  t.backward(ops::add(ops::scale(v, 3.0), ops::mul(v, v)));
  EXPECT_EQ((*a.grad)[0], 3.0 + 4.0);
}

TEST(Backward, InferenceTapeCannotBackward) {
  Parameter a = leaf("a", Tensor::scalar(2.0));
  Tape t(Tape::Mode::inference);
  Var v = t.param(a);
  EXPECT_THROW(t.backward(ops::mul(v, v)), ContractError);
  EXPECT_EQ(t.recorded_ops(), 0u);
}

TEST(Backward, FrozenParameterRejectedByRecordingTape) {
  Parameter a = leaf("a", Tensor::scalar(2.0));
  a.frozen = true;
  Tape rec;
  EXPECT_THROW(rec.param(a), InvariantViolation);
  Tape inf(Tape::Mode::inference);
  EXPECT_NO_THROW(inf.param(a));
}

TEST(Tape, InputsPrecedeOutputs) {
  std::mt19937_64 rng(6);
  Tape t;
  Var a = t.constant(oracle::random_tensor(rng, {2, 3}));
  Var b = t.constant(oracle::random_tensor(rng, {3, 2}));
  Var c = ops::matmul(a, b);
  Var d = ops::softmax_rows(c);
  EXPECT_LT(a.id, c.id);
  EXPECT_LT(b.id, c.id);
  EXPECT_LT(c.id, d.id);
}

TEST(Tape, NonFiniteOutputIsRejected) {
  Tape t;
  Var a = t.constant(Tensor::matrix({{1e300}}));
  EXPECT_THROW(ops::mul(a, a), NumericError);
}

TEST(Tape, Determinism) {
  std::mt19937_64 rng(7);
  const Tensor x = oracle::random_tensor(rng, {4, 6}), w = oracle::random_tensor(rng, {6, 3});
  auto run = [&] {
    Tape t(Tape::Mode::inference);
    return ops::gelu(ops::softmax_rows(ops::matmul(t.constant(x), t.constant(w)))).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Gelu, MatchesErfForm) {
  std::mt19937_64 rng(8);
  const Tensor x = oracle::random_tensor(rng, {5, 5}, -4, 4);
  const Tensor y = eval([&](Tape& t) { return ops::gelu(t.constant(x)); });
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], oracle::gelu(x[i]), 1e-15);
}

// Finite-difference agreement, 100 random small cases per differentiable op.
class FiniteDifference : public ::testing::Test {
 protected:
  std::mt19937_64 rng{9};
  std::uniform_int_distribution<std::size_t> dim{1, 4};

  void check(const char* op, const std::function<std::vector<Parameter>()>& make,
             const std::function<Var(Tape&, const std::vector<Var>&)>& f) {
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
      auto inputs = make();
      worst = std::max(worst, oracle::fd_max_rel_error(inputs, f));
    }
    EXPECT_LE(worst, 1e-5) << op;
  }
};

TEST_F(FiniteDifference, Matmul) {
  std::size_t m, k, n;
  Tensor w;
  check(
      "matmul",
      [&] {
        m = dim(rng), k = dim(rng), n = dim(rng);
        w = oracle::random_tensor(rng, {m, n});
        return std::vector<Parameter>{leaf("a", oracle::random_tensor(rng, {m, k})), leaf("b", oracle::random_tensor(rng, {k, n}))};
      },
      [&](Tape& t, const auto& v) { return probe(t, ops::matmul(v[0], v[1]), w); });
}

TEST_F(FiniteDifference, TransposeAddSubMulScale) {
  std::size_t m, n;
  Tensor w;
  check(
      "elementwise",
      [&] {
        m = dim(rng), n = dim(rng);
        w = oracle::random_tensor(rng, {n, m});
        return std::vector<Parameter>{leaf("a", oracle::random_tensor(rng, {m, n})), leaf("b", oracle::random_tensor(rng, {m, n}))};
      },
      [&](Tape& t, const auto& v) {
        Var y = ops::add(ops::mul(v[0], v[1]), ops::scale(ops::sub(v[0], v[1]), -1.7));
        return probe(t, ops::transpose(y), w);
      });
}

TEST_F(FiniteDifference, AddRowBias) {
  std::size_t m, n;
  Tensor w;
  check(
      "add_row_bias",
      [&] {
        m = dim(rng), n = dim(rng);
        w = oracle::random_tensor(rng, {m, n});
        return std::vector<Parameter>{leaf("x", oracle::random_tensor(rng, {m, n})), leaf("b", oracle::random_tensor(rng, {n}))};
      },
      [&](Tape& t, const auto& v) { return probe(t, ops::add_row_bias(v[0], v[1]), w); });
}

TEST_F(FiniteDifference, SoftmaxRows) {
  std::size_t m, n;
  Tensor w;
  check(
      "softmax_rows",
      [&] {
        m = dim(rng), n = dim(rng) + 1;
        w = oracle::random_tensor(rng, {m, n});
        return std::vector<Parameter>{leaf("x", oracle::random_tensor(rng, {m, n}, -3, 3))};
      },
      [&](Tape& t, const auto& v) { return probe(t, ops::softmax_rows(v[0]), w); });
}

TEST_F(FiniteDifference, LayerNorm) {
  std::size_t m, n;
  Tensor w;
  check(
      "layer_norm",
      [&] {
        m = dim(rng), n = dim(rng) + 1;
        w = oracle::random_tensor(rng, {m, n});
        return std::vector<Parameter>{leaf("x", oracle::random_tensor(rng, {m, n}, -2, 2)),
                                      leaf("g", oracle::random_tensor(rng, {n})), leaf("b", oracle::random_tensor(rng, {n}))};
      },
      [&](Tape& t, const auto& v) { return probe(t, ops::layer_norm(v[0], v[1], v[2], 1e-6), w); });
}

TEST_F(FiniteDifference, Gelu) {
  std::size_t m, n;
  Tensor w;
  check(
      "gelu",
      [&] {
        m = dim(rng), n = dim(rng);
        w = oracle::random_tensor(rng, {m, n});
        return std::vector<Parameter>{leaf("x", oracle::random_tensor(rng, {m, n}, -3, 3))};
      },
      [&](Tape& t, const auto& v) { return probe(t, ops::gelu(v[0]), w); });
}

TEST_F(FiniteDifference, CrossEntropy) {
  std::vector<int> labels;
  check(
      "cross_entropy",
      [&] {
        const std::size_t b = dim(rng), c = dim(rng) + 1;
        labels.assign(b, 0);
        for (auto& y : labels) y = static_cast<int>(rng() % c);
        return std::vector<Parameter>{leaf("z", oracle::random_tensor(rng, {b, c}, -3, 3))};
      },
      [&](Tape&, const auto& v) { return ops::cross_entropy(v[0], labels); });
}

TEST_F(FiniteDifference, RowSliceConcatGather) {
  std::size_t m, n;
  std::vector<std::size_t> index;
  Tensor w;
  check(
      "rows",
      [&] {
        m = dim(rng) + 1, n = dim(rng);
        index.clear();
        for (std::size_t i = 0; i < m + 2; ++i) index.push_back(rng() % (2 * m - 1));
        w = oracle::random_tensor(rng, {index.size(), n});
        return std::vector<Parameter>{leaf("a", oracle::random_tensor(rng, {m, n})), leaf("b", oracle::random_tensor(rng, {m, n}))};
      },
      [&](Tape& t, const auto& v) {
        Var c = ops::concat_rows({ops::slice_rows(v[0], 1, m), v[1]});
        return probe(t, ops::gather_rows(c, index), w);
      });
}

TEST_F(FiniteDifference, SquaredDistance) {
  check(
      "squared_distance",
      [&] {
        const std::size_t m = dim(rng), n = dim(rng);
        return std::vector<Parameter>{leaf("a", oracle::random_tensor(rng, {m, n})), leaf("b", oracle::random_tensor(rng, {m, n}))};
      },
      [&](Tape&, const auto& v) { return ops::squared_distance(v[0], v[1]); });
}

TEST_F(FiniteDifference, Composite) {
  std::vector<int> labels;
  check(
      "composite",
      [&] {
        const std::size_t b = dim(rng), d = dim(rng) + 1, c = dim(rng) + 1;
        labels.assign(b, 0);
        for (auto& y : labels) y = static_cast<int>(rng() % c);
        return std::vector<Parameter>{leaf("x", oracle::random_tensor(rng, {b, d})), leaf("w", oracle::random_tensor(rng, {d, c})),
                                      leaf("g", oracle::random_tensor(rng, {d})), leaf("beta", oracle::random_tensor(rng, {d}))};
      },
      [&](Tape&, const auto& v) {
        Var h = ops::gelu(ops::layer_norm(v[0], v[2], v[3], 1e-6));
        return ops::cross_entropy(ops::matmul(h, v[1]), labels);
      });
}
