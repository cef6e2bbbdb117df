#include <cmath>
#include <limits>

#include "doctest.h"
#include "i2cl/autodiff.hpp"
#include "i2cl/optim.hpp"
#include "support/finite_diff.hpp"

using namespace i2cl;
using i2cl::testing::max_relative_error;
using i2cl::testing::numeric_gradient;
using i2cl::testing::random_matrix;

namespace {

Matrix mat(std::initializer_list<std::initializer_list<double>> rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()),
           static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) {
      m(r, c++) = v;
    }
    ++r;
  }
  return m;
}

// Gradient of a scalar graph wrt one input, via the tape.
Matrix tape_gradient(const std::function<Var(Tape<double>&, Var)>& build, const Matrix& at) {
  Tape<double> t;
  const Var x = t.parameter(at);
  t.backward(build(t, x));
  return t.grad(x);
}

double tape_value(const std::function<Var(Tape<double>&, Var)>& build, const Matrix& at) {
  Tape<double> t(false);
  return t.item(build(t, t.constant(at)));
}

void check_gradient(const std::function<Var(Tape<double>&, Var)>& build, const Matrix& at,
                    double step, double tol) {
  const Matrix analytic = tape_gradient(build, at);
  const Matrix numeric = numeric_gradient([&](const Matrix& x) { return tape_value(build, x); },
                                          at, step);
  CHECK(max_relative_error(analytic, numeric, 1e-3) < tol);
}

}  // namespace

TEST_CASE("matmul: identity and dot product") {
  Tape<double> t;
  const Var id = t.constant(mat({{1, 0}, {0, 1}}));
  const Var b = t.constant(mat({{5, 6}, {7, 8}}));
  CHECK(t.value(matmul(t, id, b)) == mat({{5, 6}, {7, 8}}));
  const Var row = t.constant(mat({{1, 2}}));
  const Var col = t.constant(mat({{3}, {4}}));
  CHECK(t.item(matmul(t, row, col)) == 11.0);
}

TEST_CASE("matmul: shape mismatch throws") {
  Tape<double> t;
  const Var a = t.constant(Matrix::Ones(2, 3));
  const Var b = t.constant(Matrix::Ones(2, 3));
  CHECK_THROWS_AS(matmul(t, a, b), ShapeError);
}

TEST_CASE("matmul: gradient of sum equals ones * b^T and finite differences") {
  const Matrix a = random_matrix(3, 4, 1);
  const Matrix b = random_matrix(4, 2, 2);
  auto build = [&](Tape<double>& t, Var x) { return sum(t, matmul(t, x, t.constant(b))); };
  const Matrix analytic = tape_gradient(build, a);
  const Matrix closed_form = Matrix::Ones(3, 2) * b.transpose();
  CHECK((analytic - closed_form).cwiseAbs().maxCoeff() < 1e-12);
  const Matrix numeric =
      numeric_gradient([&](const Matrix& x) { return tape_value(build, x); }, a, 1e-5);
  CHECK((analytic - numeric).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("softmax_rows: fixed examples") {
  const Matrix p0 = softmax_rows(mat({{0, 0, 0}}));
  for (int i = 0; i < 3; ++i) {
    CHECK(p0(0, i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  const Matrix p1 = softmax_rows(mat({{1000, 1000, 1000}}));
  CHECK(p1.allFinite());
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(p1(0, i) - 1.0 / 3.0) < 1e-15);
  }
  const Matrix p2 = softmax_rows(mat({{0.0, std::log(3.0)}}));
  CHECK(std::abs(p2(0, 0) - 0.25) < 1e-15);
  CHECK(std::abs(p2(0, 1) - 0.75) < 1e-15);
}

TEST_CASE("softmax_rows: rows sum to one for inputs up to 1e4 in magnitude") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Matrix x = random_matrix(4, 17, seed, 1e4 / 4.0).cwiseMax(-1e4).cwiseMin(1e4);
    const Matrix p = softmax_rows(x);
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      CHECK(std::abs(p.row(r).sum() - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("softmax_rows: taped gradient") {
  const Matrix w = random_matrix(2, 5, 3);
  check_gradient(
      [&](Tape<double>& t, Var x) {
        return sum(t, matmul(t, softmax_rows(t, x), t.constant(w.transpose())));
      },
      random_matrix(2, 5, 4), 1e-5, 1e-6);
}

TEST_CASE("layer_norm: zero variance collapses to bias") {
  const Matrix y = layer_norm(mat({{1, 1, 1}}), Matrix::Ones(1, 3), Matrix::Zero(1, 3));
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("layer_norm: two-element vector normalizes to +-1 up to epsilon") {
  const Matrix y = layer_norm(mat({{-1, 1}}), Matrix::Ones(1, 2), Matrix::Zero(1, 2));
  CHECK(std::abs(y(0, 0) + 1.0) <= 1e-4);
  CHECK(std::abs(y(0, 1) - 1.0) <= 1e-4);
  // exact value with the epsilon inside the square root
  CHECK(std::abs(y(0, 1) - 1.0 / std::sqrt(1.0 + 1e-5)) < 1e-15);
}

TEST_CASE("layer_norm: gradient wrt x, gain and bias match finite differences") {
  const Matrix x0 = random_matrix(1, 8, 5);
  const Matrix w = random_matrix(8, 1, 6);
  const Matrix gain = random_matrix(1, 8, 7);
  const Matrix bias = random_matrix(1, 8, 8);
  auto loss = [&](Tape<double>& t, Var x, Var g, Var b) {
    return sum(t, matmul(t, layer_norm(t, x, g, b), t.constant(w)));
  };
  check_gradient([&](Tape<double>& t, Var x) {
    return loss(t, x, t.constant(gain), t.constant(bias));
  }, x0, 1e-5, 1e-6);
  check_gradient([&](Tape<double>& t, Var g) {
    return loss(t, t.constant(x0), g, t.constant(bias));
  }, gain, 1e-5, 1e-6);
  check_gradient([&](Tape<double>& t, Var b) {
    return loss(t, t.constant(x0), t.constant(gain), b);
  }, bias, 1e-5, 1e-6);
  const Matrix value = layer_norm(x0, Matrix::Ones(1, 8), Matrix::Zero(1, 8));
  CHECK(std::abs(value.sum()) < 1e-12);
}

TEST_CASE("backward: analytic and disconnected cases") {
  Tape<double> t;
  const Var c = t.scalar_parameter(3.0);
  const Var p = t.scalar_parameter(-2.0);
  const Var loss = mul_scalar(t, c, c);
  t.backward(loss);
  CHECK(t.grad(c)(0, 0) == 6.0);
  CHECK(t.grad(p)(0, 0) == 0.0);
  CHECK_FALSE(t.has_grad(p));
}

TEST_CASE("backward: non-parameter leaves receive no gradient") {
  Tape<double> t;
  const Var k = t.constant(Matrix::Constant(1, 1, 4.0));
  const Var c = t.scalar_parameter(2.0);
  t.backward(mul_scalar(t, k, c));
  CHECK_FALSE(t.has_grad(k));
  CHECK(t.grad(c)(0, 0) == 4.0);
}

TEST_CASE("backward: non-scalar loss is rejected") {
  Tape<double> t;
  const Var x = t.parameter(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(scale(t, x, 2.0)), ShapeError);
}

TEST_CASE("backward: non-finite gradient is detected") {
  Tape<double> t;
  const Var x = t.scalar_parameter(1.0);
  const Var y = t.record(Matrix::Ones(1, 1), {x},
                         [x](Tape<double>& tp, const Matrix&) {
                           tp.accumulate(x, Matrix::Constant(1, 1, std::numeric_limits<double>::infinity()));
                         },
                         "bad_op");
  CHECK_THROWS_AS(t.backward(y), NumericError);
}

TEST_CASE("tape rejects non-finite values") {
  Tape<double> t;
  CHECK_THROWS_AS(t.constant(Matrix::Constant(1, 2, std::nan(""))), NumericError);
  const Var x = t.constant(Matrix::Constant(1, 1, 1e308));
  CHECK_THROWS_AS(scale(t, x, 10.0), NumericError);
}

TEST_CASE("backward visits shared subexpressions once and accumulates") {
  Tape<double> t;
  const Var c = t.scalar_parameter(1.5);
  const Var sq = mul_scalar(t, c, c);           // c^2
  const Var y = add(t, sq, mul_scalar(t, sq, c));  // c^2 + c^3
  t.backward(y);
  CHECK(t.grad(c)(0, 0) == doctest::Approx(2 * 1.5 + 3 * 1.5 * 1.5).epsilon(1e-14));
}

TEST_CASE("causal_attention: gradients wrt q, k, v") {
  const int T = 5;
  const int D = 6;
  const Matrix q0 = random_matrix(T, D, 11);
  const Matrix k0 = random_matrix(T, D, 12);
  const Matrix v0 = random_matrix(T, D, 13);
  const Matrix w = random_matrix(D, 1, 14);
  auto loss = [&](Tape<double>& t, Var q, Var k, Var v) {
    return sum(t, matmul(t, causal_attention(t, q, k, v, 2), t.constant(w)));
  };
  check_gradient([&](Tape<double>& t, Var q) {
    return loss(t, q, t.constant(k0), t.constant(v0));
  }, q0, 1e-5, 1e-6);
  check_gradient([&](Tape<double>& t, Var k) {
    return loss(t, t.constant(q0), k, t.constant(v0));
  }, k0, 1e-5, 1e-6);
  check_gradient([&](Tape<double>& t, Var v) {
    return loss(t, t.constant(q0), t.constant(k0), v);
  }, v0, 1e-5, 1e-6);
}

TEST_CASE("causal_attention: first position attends only to itself") {
  Tape<double> t(false);
  const Matrix v0 = random_matrix(4, 4, 21);
  const Var q = t.constant(random_matrix(4, 4, 22));
  const Var k = t.constant(random_matrix(4, 4, 23));
  const Var out = causal_attention(t, q, k, t.constant(v0), 2);
  CHECK((t.value(out).row(0) - v0.row(0)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("gelu, softplus, gather_rows, slice_rows, add_row gradients") {
  const Matrix w = random_matrix(3, 1, 31);
  check_gradient([&](Tape<double>& t, Var x) {
    return sum(t, matmul(t, gelu(t, x), t.constant(w)));
  }, random_matrix(4, 3, 32), 1e-5, 1e-6);
  check_gradient([&](Tape<double>& t, Var x) {
    return sum(t, matmul(t, softplus(t, x), t.constant(w)));
  }, random_matrix(4, 3, 33), 1e-5, 1e-6);
  check_gradient([&](Tape<double>& t, Var table) {
    return sum(t, matmul(t, gather_rows(t, table, {2, 0, 2, 3}), t.constant(w)));
  }, random_matrix(5, 3, 34), 1e-5, 1e-6);
  check_gradient([&](Tape<double>& t, Var x) {
    return sum(t, matmul(t, slice_rows(t, x, 1, 2), t.constant(w)));
  }, random_matrix(4, 3, 35), 1e-5, 1e-6);
  const Matrix base = random_matrix(4, 3, 36);
  check_gradient([&](Tape<double>& t, Var row) {
    return sum(t, matmul(t, add_row(t, t.constant(base), row), t.constant(w)));
  }, random_matrix(1, 3, 37), 1e-5, 1e-6);
}

TEST_CASE("cross_entropy_rows matches log_softmax pick and its gradient") {
  const Matrix logits = random_matrix(3, 6, 41);
  const std::vector<int> targets{1, 5, 0};
  const std::vector<double> weights{1.0, 2.0, 0.5};
  Tape<double> t(false);
  const Var ce = cross_entropy_rows(t, t.constant(logits), targets, weights);
  const Matrix logp = log_softmax_rows(logits);
  const double expected =
      -(1.0 * logp(0, 1) + 2.0 * logp(1, 5) + 0.5 * logp(2, 0)) / 3.5;
  CHECK(std::abs(t.item(ce) - expected) < 1e-14);
  check_gradient([&](Tape<double>& tp, Var x) {
    return cross_entropy_rows(tp, x, targets, weights);
  }, logits, 1e-5, 1e-6);
  check_gradient([&](Tape<double>& tp, Var x) {
    return pick(tp, log_softmax_rows(tp, x), 1, 2);
  }, logits, 1e-5, 1e-6);
}

TEST_CASE("determinism: identical graphs give bit-identical values") {
  auto run = [] {
    Tape<double> t(false);
    const Var x = t.constant(random_matrix(6, 8, 51));
    const Var h = layer_norm(t, x, t.constant(Matrix::Ones(1, 8)), t.constant(Matrix::Zero(1, 8)));
    const Var a = causal_attention(t, h, h, h, 2);
    return Matrix(t.value(gelu(t, a)));
  };
  CHECK(run() == run());
}

TEST_CASE("AdamW with cosine schedule minimizes a quadratic") {
  Matrix p = Matrix::Constant(1, 2, 3.0);
  AdamW<double> opt({{1, 2}}, {.weight_decay = 0.0});
  for (std::size_t step = 0; step < 500; ++step) {
    Matrix g = 2.0 * p;
    opt.step({&p}, {g}, cosine_lr(0.1, 1e-4, step, 500));
  }
  CHECK(p.cwiseAbs().maxCoeff() < 1e-2);
  CHECK(cosine_lr(1e-2, 1e-5, 0, 100) == 1e-2);
  CHECK(std::abs(cosine_lr(1e-2, 1e-5, 99, 100) - 1e-5) < 1e-18);
}

TEST_CASE("AdamW decoupled weight decay shrinks parameters with zero gradient") {
  Matrix p = Matrix::Constant(1, 1, 1.0);
  AdamW<double> opt({{1, 1}}, {.weight_decay = 0.01});
  opt.step({&p}, {Matrix::Zero(1, 1)}, 0.1);
  CHECK(p(0, 0) == doctest::Approx(1.0 - 0.1 * 0.01).epsilon(1e-15));
}
