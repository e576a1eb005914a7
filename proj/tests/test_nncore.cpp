#include "regime_lab/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

namespace regime_lab {
namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

TEST(MatrixTest, RejectsNonFiniteAndBadShapes) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Matrix(1, 2, std::vector<double>{1, NAN}), std::domain_error);
  EXPECT_THROW(Matrix(1, 1, std::vector<double>{INFINITY}), std::domain_error);
}

TEST(DenseTest, IdentityAndScalarAffine) {
  DenseLayer id("id", Matrix{{1, 0}, {0, 1}}, Matrix{{0, 0}});
  EXPECT_EQ(dense_forward(id, Matrix{{3, 4}}), (Matrix{{3, 4}}));
  DenseLayer affine("a", Matrix{{2}}, Matrix{{1}});
  EXPECT_EQ(dense_forward(affine, Matrix{{3}}), (Matrix{{7}}));
}

TEST(DenseTest, MatchesNaiveTripleLoop) {
  Rng rng(11);
  DenseLayer layer("l", random_matrix(4, 3, rng), random_matrix(1, 4, rng));
  Matrix x = random_matrix(2, 3, rng);
  Matrix got = dense_forward(layer, x);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t o = 0; o < 4; ++o) {
      double s = layer.bias(0, o);
      for (std::size_t i = 0; i < 3; ++i) s += layer.weight(o, i) * x(b, i);
      EXPECT_NEAR(got(b, o), s, 1e-15);
    }
  }
}

TEST(DenseTest, ShapeErrorNamesBothShapes) {
  DenseLayer layer("l", 3, 2);
  try {
    dense_forward(layer, Matrix(1, 4));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("1x4"), std::string::npos);
    EXPECT_NE(msg.find("2x3"), std::string::npos);
  }
  EXPECT_THROW(DenseLayer("bad", Matrix(2, 3), Matrix(1, 3)), ShapeError);
}

TEST(ActivationTest, LeakyRelu) {
  Matrix out = leaky_relu(Matrix{{5, -1, 0}}, 0.01);
  EXPECT_DOUBLE_EQ(out(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(out(0, 1), -0.01);
  EXPECT_DOUBLE_EQ(out(0, 2), 0.0);
}

TEST(SoftmaxTest, AnalyticCases) {
  Matrix out = softmax_rows(Matrix{{0, 0, 0}, {1000, 1000, 1000}});
  for (double v : out.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  Matrix big = softmax_rows(Matrix{{1000, 1000}});
  EXPECT_DOUBLE_EQ(big(0, 0), 0.5);
  Matrix odds = softmax_rows(Matrix{{std::log(1.0), std::log(3.0)}});
  EXPECT_NEAR(odds(0, 0), 0.25, 1e-15);
  EXPECT_NEAR(odds(0, 1), 0.75, 1e-15);
}

TEST(SoftmaxTest, RowsArePositiveAndSumToOne) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    Matrix z = random_matrix(3, 1 + rng.below(40), rng);
    for (double& v : z.values()) v *= 30.0;
    Matrix p = softmax_rows(z);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double s = 0.0;
      for (double v : p.row(r)) {
        EXPECT_GT(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(BatchNormTest, TwoPointZScore) {
  BatchNormState bn(1);
  Matrix out = batchnorm_forward(bn, Matrix{{1}, {3}}, true);
  // epsilon 1e-5 against variance 1
  EXPECT_NEAR(out(0, 0), -1.0, 1e-5);
  EXPECT_NEAR(out(1, 0), 1.0, 1e-5);
}

TEST(BatchNormTest, ZeroGammaGivesBeta) {
  BatchNormState bn(2);
  bn.gamma.fill(0.0);
  bn.beta = Matrix{{0.3, -2.0}};
  Matrix out = batchnorm_forward(bn, Matrix{{1, 7}, {3, 9}, {-4, 2}}, true);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_DOUBLE_EQ(out(r, 0), 0.3);
    EXPECT_DOUBLE_EQ(out(r, 1), -2.0);
  }
}

TEST(BatchNormTest, InferenceConvergesToTrainingOutput) {
  Rng rng(3);
  BatchNormState bn(4);
  Matrix batch = random_matrix(16, 4, rng);
  Matrix train_out;
  for (int i = 0; i < 1000; ++i) train_out = batchnorm_forward(bn, batch, true);
  Matrix infer_out = batchnorm_forward(bn, batch, false);
  for (std::size_t i = 0; i < train_out.size(); ++i) {
    EXPECT_NEAR(infer_out.values()[i], train_out.values()[i], 1e-6);
  }
}

TEST(BatchNormTest, SingleRowTrainingBatchIsDegenerate) {
  BatchNormState bn(2);
  EXPECT_THROW(batchnorm_forward(bn, Matrix{{1, 2}}, true), ShapeError);
  EXPECT_NO_THROW(batchnorm_forward(bn, Matrix{{1, 2}}, false));
  EXPECT_THROW(batchnorm_forward(bn, Matrix{{1, 2, 3}, {1, 2, 3}}, true), ShapeError);
}

TEST(DropoutTest, IdentityCases) {
  Rng rng(1);
  Matrix x{{1, 2, 3}};
  EXPECT_EQ(dropout_forward(x, 0.0, true, rng).output, x);
  EXPECT_EQ(dropout_forward(x, 0.5, false, rng).output, x);
  EXPECT_THROW(dropout_forward(x, 1.0, true, rng), std::invalid_argument);
}

TEST(DropoutTest, SurvivorFractionAndExpectation) {
  Rng rng(2024);
  Matrix x(1000, 1000, 1.0);
  auto r = dropout_forward(x, 0.5, true, rng);
  std::size_t survivors = 0;
  double sum = 0.0;
  for (double v : r.output.values()) {
    survivors += v != 0.0;
    sum += v;
  }
  const double n = static_cast<double>(x.size());
  EXPECT_NEAR(survivors / n, 0.5, 0.002);
  // Mean of inverted dropout output: 0 or 2 w.p. 1/2, standard error 1/sqrt(n).
  EXPECT_NEAR(sum / n, 1.0, 3.0 / std::sqrt(n));
}

TEST(DropoutTest, SameSeedSameMask) {
  Matrix x(10, 10, 1.0);
  Rng a(9), b(9);
  EXPECT_EQ(dropout_forward(x, 0.3, true, a).mask, dropout_forward(x, 0.3, true, b).mask);
}

TEST(NoiseTest, MomentsAndDeterminism) {
  Rng rng(77);
  Matrix zeros(1000, 1000);
  Matrix out = gaussian_noise(zeros, 0.1, rng);
  double mean = 0.0, sq = 0.0;
  for (double v : out.values()) mean += v;
  mean /= static_cast<double>(out.size());
  for (double v : out.values()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(out.size()));
  EXPECT_NEAR(mean, 0.0, 0.001);
  EXPECT_NEAR(sd, 0.1, 0.002);

  Rng a(5), b(5);
  EXPECT_EQ(gaussian_noise(zeros, 0.1, a), gaussian_noise(zeros, 0.1, b));
  EXPECT_EQ(gaussian_noise(Matrix{{1, 2}}, 0.0, a), (Matrix{{1, 2}}));
}

TEST(LossTest, CrossEntropyCases) {
  std::vector<const Matrix*> none;
  const std::vector<double> half{0.5}, one{1.0};
  EXPECT_NEAR(bce_loss(half, one, none, 0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_loss(std::vector<double>{1.0 - 1e-12}, one, none, 0.0), 0.0, 1e-11);
  Matrix w{{2}};
  std::vector<const Matrix*> weights{&w};
  EXPECT_NEAR(bce_loss(half, one, weights, 1.0), std::log(2.0) + 4.0, 1e-15);
  EXPECT_THROW(bce_loss(half, std::vector<double>{1, 0}, none, 0.0), ShapeError);
  // Saturated probabilities stay finite.
  EXPECT_TRUE(std::isfinite(bce_loss(std::vector<double>{0.0}, one, none, 0.0)));
}

TEST(LossTest, NonNegativeAndMonotoneInProbability) {
  std::vector<const Matrix*> none;
  double prev = INFINITY;
  for (int i = 1; i < 100; ++i) {
    const double p = i / 100.0;
    const double l = bce_loss(std::vector<double>{p}, std::vector<double>{1.0}, none, 0.0);
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(AdamTest, ZeroGradientLeavesParamsUnchanged) {
  AdamState st;
  Matrix p{{0.3, -1.2}}, g{{0, 0}};
  std::vector<Matrix*> ps{&p};
  std::vector<const Matrix*> gs{&g};
  adam_step(st, ps, gs, 1e-3);
  EXPECT_EQ(p, (Matrix{{0.3, -1.2}}));
  EXPECT_EQ(st.step_count, 1u);
}

TEST(AdamTest, FirstStepIsLearningRate) {
  // m_hat = 1, v_hat = 1 after bias correction: step = lr / (1 + 1e-8).
  AdamState st;
  Matrix p{{0.0}}, g{{1.0}};
  std::vector<Matrix*> ps{&p};
  std::vector<const Matrix*> gs{&g};
  adam_step(st, ps, gs, 1e-3);
  EXPECT_NEAR(p(0, 0), -1e-3 / (1.0 + 1e-8), 1e-18);
}

TEST(AdamTest, OppositeGradientShrinksParam) {
  AdamState st;
  Matrix p{{0.0}}, g{{1.0}};
  std::vector<Matrix*> ps{&p};
  std::vector<const Matrix*> gs{&g};
  adam_step(st, ps, gs, 1e-3);
  const double after_first = std::abs(p(0, 0));
  g(0, 0) = -1.0;
  adam_step(st, ps, gs, 1e-3);
  // Hand trace: m = -0.01, v = 0.001999, m_hat = -0.0526 -> update ~ +5.3e-5.
  EXPECT_LT(std::abs(p(0, 0)), after_first);
  EXPECT_EQ(st.step_count, 2u);
}

TEST(AdamTest, ShapeMismatchThrows) {
  AdamState st;
  Matrix p{{0.0, 1.0}}, g{{1.0}};
  std::vector<Matrix*> ps{&p};
  std::vector<const Matrix*> gs{&g};
  EXPECT_THROW(adam_step(st, ps, gs, 1e-3), ShapeError);
}

}  // namespace
}  // namespace regime_lab
