#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "macl/autodiff.hpp"

using namespace macl;
using namespace macl::ad;

namespace {

Matrix random_matrix(std::mt19937& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Central differences against the tape, for every entry of every input.
double max_gradient_error(std::vector<Matrix> inputs, const Builder& f, double h = 1e-6) {
  Tape tape(true);
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter(inputs[i], i));
  auto out = f(tape, vars);
  tape.backward(out);
  std::vector<Matrix> grads(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) grads[i] = Matrix::Zero(inputs[i].rows(), inputs[i].cols());
  tape.for_each_parameter_grad([&](std::size_t slot, const Matrix& g) { grads[slot] += g; });

  auto eval = [&]() {
    Tape t(false);
    std::vector<Var> vs;
    for (std::size_t i = 0; i < inputs.size(); ++i) vs.push_back(t.parameter(inputs[i], i));
    return f(t, vs).scalar();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      const double orig = inputs[i].data()[k];
      inputs[i].data()[k] = orig + h;
      const double up = eval();
      inputs[i].data()[k] = orig - h;
      const double down = eval();
      inputs[i].data()[k] = orig;
      worst = std::max(worst, std::abs((up - down) / (2 * h) - grads[i].data()[k]));
    }
  return worst;
}

// Weighted sum so every output entry carries a distinct gradient.
Var reduce(Tape& t, Var x) {
  Matrix w(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 0.3 + 0.17 * static_cast<double>(i % 7);
  (void)t;
  return sum(mul_const(x, w));
}

}  // namespace

class OpGradient : public ::testing::Test {
 protected:
  std::mt19937 rng{42};
};

TEST_F(OpGradient, Matmul) {
  EXPECT_LT(max_gradient_error({random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)},
                               [](Tape& t, const std::vector<Var>& v) { return reduce(t, matmul(v[0], v[1])); }),
            1e-7);
}

TEST_F(OpGradient, MatmulNt) {
  EXPECT_LT(max_gradient_error({random_matrix(rng, 3, 4), random_matrix(rng, 5, 4)},
                               [](Tape& t, const std::vector<Var>& v) { return reduce(t, matmul_nt(v[0], v[1])); }),
            1e-7);
}

TEST_F(OpGradient, ElementwiseArithmetic) {
  EXPECT_LT(max_gradient_error({random_matrix(rng, 2, 3), random_matrix(rng, 2, 3), random_matrix(rng, 1, 3)},
                               [](Tape& t, const std::vector<Var>& v) {
                                 auto x = add(mul(v[0], v[1]), sub(v[1], v[0]));
                                 return reduce(t, affine(add_row(x, v[2]), 1.7, 0.2));
                               }),
            1e-7);
}

TEST_F(OpGradient, Nonlinearities) {
  EXPECT_LT(max_gradient_error({random_matrix(rng, 3, 3, 0.1, 2.0)},
                               [](Tape& t, const std::vector<Var>& v) {
                                 return reduce(t, add(log(v[0]), add(exp(v[0]), relu(affine(v[0], 1.0, -1.0)))));
                               }),
            1e-6);
}

TEST_F(OpGradient, ClampCutsGradient) {
  Matrix x(1, 2);
  x << 0.2, 0.95;
  Tape t(true);
  auto v = t.parameter(x, 0);
  t.backward(sum(clamp_max(v, 0.9)));
  Matrix g;
  t.for_each_parameter_grad([&](std::size_t, const Matrix& m) { g = m; });
  EXPECT_EQ(g(0, 0), 1.0);
  EXPECT_EQ(g(0, 1), 0.0);
}

TEST_F(OpGradient, ShapeOps) {
  EXPECT_LT(max_gradient_error({random_matrix(rng, 4, 5), random_matrix(rng, 4, 2), random_matrix(rng, 3, 5)},
                               [](Tape& t, const std::vector<Var>& v) {
                                 auto a = concat_cols(t, {slice_cols(v[0], 1, 3), v[1]});
                                 auto b = concat_rows(t, {v[0], v[2]});
                                 auto c = gather_rows(b, {6, 0, 0, 3});
                                 auto d = top_rows(c, 2);
                                 auto e = pick(v[0], {{0, 0}, {3, 4}, {0, 0}});
                                 return add(add(reduce(t, a), reduce(t, d)), reduce(t, e));
                               }),
            1e-7);
}

TEST_F(OpGradient, Reductions) {
  EXPECT_LT(max_gradient_error({random_matrix(rng, 4, 3)},
                               [](Tape& t, const std::vector<Var>& v) {
                                 return add(reduce(t, mean_rows(v[0])), reduce(t, max_rows(v[0])));
                               }),
            1e-7);
}

TEST_F(OpGradient, LayerNorm) {
  EXPECT_LT(max_gradient_error({random_matrix(rng, 3, 6), random_matrix(rng, 1, 6), random_matrix(rng, 1, 6)},
                               [](Tape& t, const std::vector<Var>& v) { return reduce(t, layer_norm(v[0], v[1], v[2])); }),
            1e-6);
}

TEST_F(OpGradient, SoftmaxPlainAndCausal) {
  for (bool causal : {false, true})
    EXPECT_LT(max_gradient_error({random_matrix(rng, 4, 4, -2, 2)},
                                 [causal](Tape& t, const std::vector<Var>& v) {
                                   return reduce(t, softmax_rows(v[0], causal));
                                 }),
              1e-7);
}

TEST_F(OpGradient, Cosine) {
  EXPECT_LT(max_gradient_error({random_matrix(rng, 1, 5), random_matrix(rng, 1, 5)},
                               [](Tape&, const std::vector<Var>& v) { return cosine(v[0], v[1]); }),
            1e-7);
}

TEST(Autodiff, SoftmaxRowsSumToOneAndCausalMask) {
  std::mt19937 rng(1);
  Tape t(false);
  auto x = t.constant(random_matrix(rng, 3, 3, -3, 3));
  const auto p = softmax_rows(x, true).value();
  for (Eigen::Index i = 0; i < 3; ++i) {
    EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
    for (Eigen::Index j = i + 1; j < 3; ++j) EXPECT_EQ(p(i, j), 0.0);
  }
}

TEST(Autodiff, LogOfNonPositiveIsNumericError) {
  Tape t(false);
  EXPECT_THROW(log(t.scalar_constant(0.0)), NumericError);
  EXPECT_THROW(log(t.scalar_constant(-1.0)), NumericError);
}

TEST(Autodiff, CosineOfZeroVectorIsNumericError) {
  Tape t(false);
  EXPECT_THROW(cosine(t.constant(Matrix::Zero(1, 3)), t.constant(Matrix::Ones(1, 3))), NumericError);
}

TEST(Autodiff, ShapeMismatchRejected) {
  Tape t(false);
  EXPECT_THROW(add(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(3, 2))), ShapeError);
  EXPECT_THROW(matmul(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3))), ShapeError);
}

TEST(Autodiff, NoGradTapeRecordsNoGradients) {
  Matrix w = Matrix::Ones(2, 2);
  Tape t(false);
  auto v = t.parameter(w, 0);
  EXPECT_FALSE(sum(v).requires_grad());
  EXPECT_THROW(t.backward(sum(v)), Error);
}

TEST(Autodiff, SharedParameterLeavesAccumulate) {
  Matrix w(1, 1);
  w << 3.0;
  Tape t(true);
  auto a = t.parameter(w, 0);
  auto b = t.parameter(w, 0);
  t.backward(mul(a, b));
  double total = 0.0;
  t.for_each_parameter_grad([&](std::size_t, const Matrix& g) { total += g(0, 0); });
  EXPECT_DOUBLE_EQ(total, 6.0);
}
