// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "cmt/autodiff.hpp"
#include "cmt/grad_check.hpp"

using namespace cmt;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// Independent oracles -------------------------------------------------------

Tensor triple_loop_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < a.dim(1); ++l) s += a.at(i, l) * b.at(l, j);
      c.at(i, j) = s;
    }
  return c;
}

std::vector<double> scalar_layer_norm(const std::vector<double>& x, double eps) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out;
  for (double v : x) out.push_back((v - mean) / std::sqrt(var + eps));
  return out;
}

double gelu_formula(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * std::pow(x, 3))));
}

Tensor eval(const std::function<Var(Tape&)>& f) {
  Tape t(false);
  return f(t).value();
}

}  // namespace

TEST(Matmul, IdentityAndZero) {
  auto out = eval([](Tape& t) {
    return matmul(t.constant(Tensor::matrix({{1, 0}, {0, 1}})), t.constant(Tensor::matrix({{1, 2}, {3, 4}})));
  });
  EXPECT_EQ(out, Tensor::matrix({{1, 2}, {3, 4}}));
  auto zero = eval([](Tape& t) {
    return matmul(t.constant(Tensor::matrix({{1, 2}})), t.constant(Tensor::matrix({{0}, {0}})));
  });
  EXPECT_EQ(zero, Tensor::matrix({{0}}));
}

TEST(Matmul, EqualsTripleLoopExactly) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    auto out = eval([&](Tape& t) { return matmul(t.constant(a), t.constant(b)); });
    EXPECT_EQ(out, triple_loop_matmul(a, b));
  }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tape t;
  try {
    matmul(t.constant(Tensor({2, 3})), t.constant(Tensor({2, 3})));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] by [2x3]"), std::string::npos);
  }
}

TEST(Softmax, AnalyticCases) {
  auto u = eval([](Tape& t) { return softmax_rows(t.constant(Tensor::matrix({{0, 0, 0}}))); });
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto r = eval([](Tape& t) {
    return softmax_rows(t.constant(Tensor::matrix({{std::log(1.0), std::log(2.0), std::log(3.0)}})));
  });
  EXPECT_NEAR(r[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(r[1], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(r[2], 1.0 / 2.0, 1e-15);
  auto a = eval([](Tape& t) { return softmax_rows(t.constant(Tensor::matrix({{1, 2, 3}}))); });
  auto b = eval([](Tape& t) { return softmax_rows(t.constant(Tensor::matrix({{101, 102, 103}}))); });
  EXPECT_LE(max_abs_diff(a, b), 1e-12);
  auto big = eval([](Tape& t) { return softmax_rows(t.constant(Tensor::matrix({{1000, -1000, 999}}))); });
  EXPECT_TRUE(big.all_finite());
}

TEST(Softmax, PropertyRowsSumToOneAndShiftInvariant) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t m = 1 + rng.below(6), n = 1 + rng.below(9);
    Tensor x = random_tensor({m, n}, rng, 1.0 + 50.0 * rng.uniform());
    const double c = rng.uniform(-300, 300);
    Tensor shifted = x;
    for (auto& v : shifted.data()) v += c;
    auto y = eval([&](Tape& t) { return softmax_rows(t.constant(x)); });
    auto ys = eval([&](Tape& t) { return softmax_rows(t.constant(shifted)); });
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) {
        ASSERT_GE(y.at(i, j), 0.0);
        s += y.at(i, j);
      }
      ASSERT_NEAR(s, 1.0, 1e-12);
    }
    ASSERT_LE(max_abs_diff(y, ys), 1e-12);
  }
}

TEST(LayerNorm, EdgeCasesAndScalarOracle) {
  auto run = [](const Tensor& x, double eps) {
    const std::size_t d = x.cols();
    return eval([&](Tape& t) {
      return layer_norm(t.constant(x), t.constant(Tensor({d}, 1.0)), t.constant(Tensor({d}, 0.0)), eps);
    });
  };
  auto c = run(Tensor::matrix({{5, 5, 5, 5}}), 1e-5);
  for (double v : c.data()) EXPECT_NEAR(v, 0.0, 1e-6);
  auto pm = run(Tensor::matrix({{1, -1}}), 1e-12);
  EXPECT_NEAR(pm[0], 1.0, 1e-6);
  EXPECT_NEAR(pm[1], -1.0, 1e-6);

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({3, 7}, rng, 10.0);
    auto y = run(x, 1e-5);
    for (std::size_t i = 0; i < 3; ++i) {
      std::vector<double> row(x.data().begin() + i * 7, x.data().begin() + (i + 1) * 7);
      auto ref = scalar_layer_norm(row, 1e-5);
      double mean = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        ASSERT_NEAR(y.at(i, j), ref[j], 1e-12);
        mean += y.at(i, j);
      }
      ASSERT_LT(std::abs(mean / 7), 1e-9);
    }
  }
}

TEST(Gelu, ValuesAndMonotoneGrid) {
  EXPECT_EQ(gelu_scalar(0.0), 0.0);
  EXPECT_NEAR(gelu_scalar(10.0), 10.0, 1e-6);
  double prev = -1e300;
  for (int i = 0; i <= 100; ++i) {
    const double x = -5.0 + 0.1 * i;
    EXPECT_NEAR(gelu_scalar(x), gelu_formula(x), 1e-12);
    if (x >= -0.75) {  // tanh-GELU has its minimum near -0.75
      EXPECT_GE(gelu_scalar(x), prev);
      prev = gelu_scalar(x);
    }
  }
}

TEST(Dropout, IdentityCasesAndRateValidation) {
  Tape t;
  Rng rng(4);
  Tensor x = random_tensor({4, 5}, rng);
  Var v = t.constant(x);
  EXPECT_EQ(dropout(v, 0.0, true, rng).value(), x);
  EXPECT_EQ(dropout(v, 0.7, false, rng).value(), x);
  EXPECT_THROW(dropout(v, 1.0, true, rng), ConfigError);
  EXPECT_THROW(dropout(v, -0.1, false, rng), ConfigError);
}

TEST(Dropout, MonteCarloMeanIsPreserved) {
  const double rate = 0.1;
  const std::size_t n = 100000;
  Tape t;
  Rng rng(5);
  auto y = dropout(t.constant(Tensor({n}, 1.0)), rate, true, rng).value();
  double mean = 0;
  std::size_t zeros = 0;
  for (double v : y.data()) {
    mean += v;
    zeros += v == 0.0;
  }
  mean /= static_cast<double>(n);
  const double sigma = std::sqrt(rate / (1 - rate) / static_cast<double>(n));
  EXPECT_LE(std::abs(mean - 1.0), 3 * sigma);
  EXPECT_NEAR(static_cast<double>(zeros) / n, rate, 0.01);
}

TEST(Tape, BackwardVisitsEachOpOnceInReverse) {
  Tape t;
  std::vector<std::size_t> order;
  Var a = t.leaf(Tensor::scalar(2.0));
  auto tracer = [&](Var in) {
    return t.record(in.value(), {in}, [&order, in](Tape& tp, std::size_t self) {
      order.push_back(self);
      tp.grad_ref(in.id)[0] += tp.grad_ref(self)[0];
    });
  };
  Var b = tracer(a);
  Var c = tracer(b);
  Var d = tracer(c);
  t.backward(d);
  EXPECT_EQ(order, (std::vector<std::size_t>{d.id, c.id, b.id}));
  EXPECT_EQ(t.backward_visits(), 3u);
  EXPECT_EQ(t.grad(a)[0], 1.0);
}

TEST(Tape, GradientShapesMatchValues) {
  Tape t;
  Rng rng(6);
  Var w = t.leaf(random_tensor({3, 2}, rng));
  Var x = t.leaf(random_tensor({4, 3}, rng));
  t.backward(sum(matmul(x, w)));
  EXPECT_EQ(t.grad(w).shape(), w.value().shape());
  EXPECT_EQ(t.grad(x).shape(), x.value().shape());
}

// Gradient checks -----------------------------------------------------------

TEST(GradCheck, QuadraticMatchesAnalytic) {
  ParameterSet ps{{"theta", Tensor::vector({1, 2, 3})}};
  auto rep = grad_check([](Tape&, ParamBinder& p) { Var x = p("theta"); return sum(mul(x, x)); }, ps);
  EXPECT_TRUE(rep.passed());
  EXPECT_LT(rep.max_rel_error, 1e-8);
  Tape t;
  ParamBinder b(t, ps);
  Var x = b("theta");
  t.backward(sum(mul(x, x)));
  EXPECT_EQ(t.grad(x), Tensor::vector({2, 4, 6}));
}

TEST(GradCheck, RejectsBadEpsAndNonFinite) {
  ParameterSet ps{{"x", Tensor::vector({1.0})}};
  auto f = [](Tape&, ParamBinder& p) { return sum(p("x")); };
  EXPECT_THROW(grad_check(f, ps, {.eps = 1e-3}), ConfigError);
  auto bad = [](Tape&, ParamBinder& p) { return scale(sum(p("x")), std::numeric_limits<double>::infinity()); };
  EXPECT_THROW(grad_check(bad, ps), EvaluationError);
}

TEST(GradCheck, FlagsAWrongBackwardRule) {
  ParameterSet ps{{"x", Tensor::vector({0.3, -0.2})}};
  auto wrong = [](Tape& t, ParamBinder& p) {
    Var x = p("x");
    Var y = t.record(x.value(), {x}, [x](Tape& tp, std::size_t self) {
      for (std::size_t i = 0; i < 2; ++i) tp.grad_ref(x.id)[i] += 2.0 * tp.grad_ref(self)[i];
    });
    return sum(y);
  };
  EXPECT_FALSE(grad_check(wrong, ps).passed());
}

TEST(GradCheck, OneLayerClassifierCrossEntropy) {
  Rng rng(8);
  ParameterSet ps{{"w", random_tensor({5, 4}, rng)}, {"b", random_tensor({4}, rng)}, {"x", random_tensor({1, 5}, rng)}};
  auto rep = grad_check(
      [](Tape&, ParamBinder& p) { return cross_entropy_logits(add_row(matmul(p("x"), p("w")), p("b")), 2); }, ps);
  EXPECT_TRUE(rep.passed()) << rep.max_rel_error;
}

TEST(GradCheck, EveryDifferentiableOp) {
  Rng rng(9);
  ParameterSet ps{{"a", random_tensor({3, 4}, rng)},  {"b", random_tensor({4, 3}, rng)},
                  {"c", random_tensor({3, 4}, rng)},  {"g", random_tensor({4}, rng)},
                  {"beta", random_tensor({4}, rng)},  {"row", random_tensor({4}, rng)},
                  {"sig", random_tensor({10, 2}, rng)}, {"tab", random_tensor({5, 4}, rng)}};
  std::vector<std::pair<std::string, LossFn>> cases = {
      {"matmul", [](Tape&, ParamBinder& p) { return sum(mul(matmul(p("a"), p("b")), matmul(p("a"), p("b")))); }},
      {"transpose", [](Tape&, ParamBinder& p) { return sum(mul(transpose(p("a")), p("b"))); }},
      {"add/mul", [](Tape&, ParamBinder& p) { return sum(mul(add(p("a"), p("c")), p("c"))); }},
      {"add_row", [](Tape&, ParamBinder& p) { Var y = add_row(p("a"), p("row")); return sum(mul(y, y)); }},
      {"scale", [](Tape&, ParamBinder& p) { Var y = scale(p("a"), -1.7); return sum(mul(y, p("c"))); }},
      {"mean_rows", [](Tape&, ParamBinder& p) { Var y = mean_rows(p("a")); return sum(mul(y, y)); }},
      {"softmax", [](Tape&, ParamBinder& p) { return sum(mul(softmax_rows(p("a")), p("c"))); }},
      {"layer_norm", [](Tape&, ParamBinder& p) { return sum(mul(layer_norm(p("a"), p("g"), p("beta"), 1e-5), p("c"))); }},
      {"gelu", [](Tape&, ParamBinder& p) { return sum(mul(gelu(p("a")), p("c"))); }},
      {"slice/concat", [](Tape&, ParamBinder& p) {
         Var y = concat_cols({slice_cols(p("a"), 2, 2), slice_cols(p("a"), 0, 2)});
         return sum(mul(y, p("c")));
       }},
      {"stack_rows", [](Tape&, ParamBinder& p) {
         Var y = stack_rows({p("a"), reshape(p("row"), {1, 4})});
         return sum(mul(y, y));
       }},
      {"gather_rows", [](Tape&, ParamBinder& p) { Var y = gather_rows(p("tab"), {4, 0, 4}); return sum(mul(y, p("c"))); }},
      {"replace_rows", [](Tape&, ParamBinder& p) {
         Var y = replace_rows(p("a"), {0, 2}, p("row"));
         return sum(mul(y, p("c")));
       }},
      {"im2col1d", [](Tape&, ParamBinder& p) {
         Var y = im2col1d(p("sig"), 3, 2);
         return sum(mul(y, y));
       }},
      {"cross_entropy", [](Tape&, ParamBinder& p) { return cross_entropy_logits(reshape(p("row"), {1, 4}), 1); }},
      {"mse", [](Tape&, ParamBinder& p) { return mse(p("a"), Tensor({3, 4}, 0.25)); }},
  };
  for (const auto& [name, f] : cases) {
    auto rep = grad_check(f, ps, {.eps = 1e-5, .tolerance = 1e-5});
    EXPECT_TRUE(rep.passed()) << name << " max rel err " << rep.max_rel_error;
  }
}

TEST(CrossEntropy, AnalyticValues) {
  Tape t;
  EXPECT_NEAR(cross_entropy_logits(t.constant(Tensor({1, 8}, 0.0)), 3).value()[0], std::log(8.0), 1e-12);
  Tensor confident({1, 4}, 0.0);
  confident[2] = 50.0;
  EXPECT_LT(cross_entropy_logits(t.constant(confident), 2).value()[0], 1e-20);
  EXPECT_THROW(cross_entropy_logits(t.constant(confident), 4), InputError);
}

TEST(CrossEntropy, LogitGradientIsProbsMinusOneHot) {
  Rng rng(10);
  Tape t;
  Var z = t.leaf(random_tensor({1, 6}, rng));
  t.backward(cross_entropy_logits(z, 4));
  const Tensor p = softmax_rows_raw(z.value());
  const Tensor g = t.grad(z);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(g[j], p[j] - (j == 4 ? 1.0 : 0.0), 1e-15);
}
