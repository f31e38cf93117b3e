#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "ceu/autodiff.hpp"
#include "ceu/grad_check.hpp"
#include "ceu/rng.hpp"
#include "ceu/softmax_ext.hpp"

using namespace ceu;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// test-side oracle: log-sum-exp in long double over finite entries
long double lse_oracle(const std::vector<double>& z) {
  long double mx = -std::numeric_limits<long double>::infinity();
  for (double v : z) {
    if (v != -kInf && static_cast<long double>(v) > mx) mx = v;
  }
  long double s = 0.0L;
  for (double v : z) {
    if (v != -kInf) s += std::exp(static_cast<long double>(v) - mx);
  }
  return mx + std::log(s);
}

std::vector<double> softmax_oracle(const std::vector<double>& z) {
  const long double lse = lse_oracle(z);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = z[i] == -kInf ? 0.0 : static_cast<double>(std::exp(static_cast<long double>(z[i]) - lse));
  }
  return out;
}

}  // namespace

TEST_CASE("softmax_ext: basic values") {
  auto p = softmax_ext(std::vector<double>{0.0, 0.0});
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto q = softmax_ext(std::vector<double>{-kInf, 0.0, 0.0});
  CHECK(q[0] == 0.0);
  CHECK(q[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(q[2] == doctest::Approx(0.5).epsilon(1e-12));

  // frozen from the long-double oracle
  auto r = softmax_ext(std::vector<double>{1.0, 2.0, 3.0});
  const auto want = softmax_oracle({1.0, 2.0, 3.0});
  CHECK(r[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
  CHECK(r[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
  CHECK(r[2] == doctest::Approx(0.66524095577482183).epsilon(1e-12));
  for (int i = 0; i < 3; ++i) CHECK(r[static_cast<std::size_t>(i)] == doctest::Approx(want[static_cast<std::size_t>(i)]).epsilon(1e-14));
}

TEST_CASE("softmax_ext: one-hot limit with a +inf logit") {
  auto p = softmax_ext(std::vector<double>{5.0, kInf, 2.0});
  CHECK(p[0] == 0.0);
  CHECK(p[1] == 1.0);
  CHECK(p[2] == 0.0);
}

TEST_CASE("softmax_ext: error contracts") {
  CHECK_THROWS_AS(softmax_ext(std::vector<double>{-kInf, -kInf}), degenerate_distribution_error);
  CHECK_THROWS_AS(softmax_ext(std::vector<double>{kInf, 0.0, kInf}), ambiguous_one_hot_error);
  CHECK_THROWS_AS(softmax_ext(std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(log_softmax_ext(std::vector<double>{-kInf, -kInf}), degenerate_distribution_error);
}

TEST_CASE("log_softmax_ext: values") {
  auto l = log_softmax_ext(std::vector<double>{0.0, 0.0});
  CHECK(l[0] == doctest::Approx(-0.6931471805599453).epsilon(1e-12));
  CHECK(l[1] == doctest::Approx(-0.6931471805599453).epsilon(1e-12));

  auto c = log_softmax_ext(std::vector<double>{-kInf, 0.0});
  CHECK(c[0] == -kInf);
  CHECK(c[1] == 0.0);

  auto r = log_softmax_ext(std::vector<double>{1.0, 2.0, 3.0});
  CHECK(r[0] == doctest::Approx(-2.4076059644443806).epsilon(1e-12));
  CHECK(r[1] == doctest::Approx(-1.4076059644443806).epsilon(1e-12));
  CHECK(r[2] == doctest::Approx(-0.40760596444438060).epsilon(1e-12));

  auto h = log_softmax_ext(std::vector<double>{5.0, kInf, 2.0});
  CHECK(h[0] == -kInf);
  CHECK(h[1] == 0.0);
  CHECK(h[2] == -kInf);
}

TEST_CASE("softmax_ext: property tests over random extended-real vectors") {
  Rng rng(123);
  for (int iter = 0; iter < 500; ++iter) {
    const std::size_t n = 1 + rng.next_below(16);
    std::vector<double> z(n);
    bool any_finite = false;
    for (auto& v : z) {
      const double u = rng.next_double();
      if (u < 0.15) {
        v = -kInf;
      } else {
        v = (rng.next_double() - 0.5) * 60.0;
        any_finite = true;
      }
    }
    if (!any_finite) z[0] = 0.0;

    auto p = softmax_ext(z);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(p[i] >= 0.0);
      if (z[i] == -kInf) CHECK(p[i] == 0.0);
      sum += p[i];
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);

    // invariance under adding a finite constant to all finite entries
    const double c = (rng.next_double() - 0.5) * 40.0;
    std::vector<double> shifted = z;
    for (auto& v : shifted) {
      if (v != -kInf) v += c;
    }
    auto p2 = softmax_ext(shifted);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(p2[i] - p[i]) < 1e-12);

    // exp(log_softmax) == softmax
    auto l = log_softmax_ext(z);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(std::exp(l[i]) - p[i]) < 1e-12);
  }
}

TEST_CASE("backward: sum gives ones") {
  Var x = Var::param(DenseArray::vec({1.0, -2.0, 3.0}));
  Var s = sum(x);
  backward(s);
  for (double g : x.grad().data) CHECK(g == 1.0);
}

TEST_CASE("backward: stop-gradient routes only the live path") {
  // d/dx_i of dot(sg(x), log(x)) = sg(x)_i / x_i = 1 at x = [0.5, 0.5]
  Var x = Var::param(DenseArray::vec({0.5, 0.5}));
  Var root = dot(x.detach(), log_op(x));
  backward(root);
  CHECK(x.grad().data[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(x.grad().data[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("backward: unrelated parameters stay at bitwise zero") {
  Var x = Var::param(DenseArray::vec({1.0, 2.0}));
  Var y = Var::param(DenseArray::vec({3.0, 4.0}));
  Var root = sum(mul(x, x));
  backward(root);
  for (double g : y.grad().data) {
    CHECK(std::signbit(g) == false);
    CHECK(g == 0.0);
  }
}

TEST_CASE("backward: detached path contributes value but bitwise-zero gradient") {
  Var x = Var::param(DenseArray::vec({0.7, 0.3}));
  Var detached_only = sum(mul(x.detach(), x.detach()));
  backward(detached_only);
  for (double g : x.grad().data) CHECK(g == 0.0);
  CHECK(detached_only.scalar() == doctest::Approx(0.58));
}

TEST_CASE("backward: non-scalar root is a contract error") {
  Var x = Var::param(DenseArray::vec({1.0, 2.0}));
  CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
}

TEST_CASE("finite_diff_check: quadratic is exact to rounding") {
  auto f = [](const Var& v) { return sum(mul(v, v)); };
  const double err = finite_diff_check(f, DenseArray::vec({1.0, 2.0}), 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("finite_diff_check: constant function") {
  auto f = [](const Var&) { return Var::constant(DenseArray::scalar(3.14)); };
  Var x = Var::param(DenseArray::vec({1.0, 2.0}));
  Var out = f(x);
  backward(out);
  for (double g : x.grad().data) CHECK(g == 0.0);
  const double err = finite_diff_check(f, DenseArray::vec({1.0, 2.0}), 1e-5);
  CHECK(err == 0.0);
}

TEST_CASE("finite_diff_check: composite primitives within 1e-4") {
  Rng rng(99);

  SUBCASE("log-softmax pipeline") {
    DenseArray x = DenseArray::zeros({3, 5});
    for (auto& v : x.data) v = (rng.next_double() - 0.5) * 4.0;
    auto f = [](const Var& v) {
      Var l = row_log_softmax(v);
      return mean(mul(l, l));
    };
    CHECK(finite_diff_check(f, x, 1e-5) < 1e-4);
  }

  SUBCASE("matmul + gelu + layer_norm") {
    DenseArray x = DenseArray::zeros({4, 6});
    for (auto& v : x.data) v = (rng.next_double() - 0.5) * 2.0;
    DenseArray w = DenseArray::zeros({6, 6});
    for (auto& v : w.data) v = (rng.next_double() - 0.5) * 0.8;
    DenseArray gain = DenseArray::full({6}, 1.1);
    DenseArray bias = DenseArray::full({6}, -0.05);
    auto f = [&](const Var& v) {
      Var h = matmul(v, Var::constant(w));
      h = gelu(h);
      h = layer_norm(h, Var::constant(gain), Var::constant(bias));
      return sum(mul(h, h));
    };
    CHECK(finite_diff_check(f, x, 1e-5) < 1e-4);
  }

  SUBCASE("attention block") {
    DenseArray x = DenseArray::zeros({6, 8});  // 2 sequences of length 3
    for (auto& v : x.data) v = (rng.next_double() - 0.5) * 2.0;
    auto f = [](const Var& v) {
      Var att = causal_attention(v, v, v, 2, 3, 2);
      return sum(mul(att, att));
    };
    CHECK(finite_diff_check(f, x, 1e-5) < 1e-4);
  }

  SUBCASE("gather + rowvec + exp") {
    DenseArray table = DenseArray::zeros({5, 4});
    for (auto& v : table.data) v = (rng.next_double() - 0.5) * 1.5;
    auto f = [](const Var& v) {
      Var g = gather_rows(v, {0, 2, 2, 4});
      Var s = exp_op(scale(g, 0.3));
      return sum(s);
    };
    CHECK(finite_diff_check(f, table, 1e-5) < 1e-4);
  }

  SUBCASE("concat + select + sum_weighted") {
    DenseArray x = DenseArray::zeros({4, 3});
    for (auto& v : x.data) v = rng.next_double();
    DenseArray w = DenseArray::zeros({3, 3});
    for (auto& v : w.data) v = rng.next_double() - 0.5;
    auto f = [&](const Var& v) {
      Var c = concat_rows({v, scale(v, 2.0)});
      Var s = select_rows(c, {1, 4, 6});
      return sum_weighted(s, w);
    };
    CHECK(finite_diff_check(f, x, 1e-5) < 1e-4);
  }
}

TEST_CASE("matmul and add_rowvec shape checks") {
  Var a = Var::param(DenseArray::zeros({2, 3}));
  Var b = Var::param(DenseArray::zeros({2, 3}));
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
  CHECK_THROWS_AS(add_rowvec(a, Var::constant(DenseArray::zeros({4}))), std::invalid_argument);
}
