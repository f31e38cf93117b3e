#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "ceu/grad_check.hpp"
#include "ceu/losses.hpp"
#include "ceu/rng.hpp"
#include "ceu/softmax_ext.hpp"

using namespace ceu;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Wraps a single logit row as a [1,1,V] block with one supervised position.
struct SingleRow {
  Var logits_var;
  LogitBlock block;
  LabelBlock labels;
};

SingleRow single_row(const std::vector<double>& row, std::int64_t y) {
  const std::int64_t v = static_cast<std::int64_t>(row.size());
  Var logits = Var::param(DenseArray({1, 1, v}, row));
  LogitBlock block = make_logit_block(logits);
  LabelBlock labels{1, 1, {y}, -100};
  return {logits, block, labels};
}

LabelBlock labels_2d(std::int64_t batch, std::int64_t seq, std::vector<std::int64_t> ids) {
  return LabelBlock{batch, seq, std::move(ids), -100};
}

std::vector<double> random_logits(Rng& rng, std::size_t n, double span = 8.0) {
  std::vector<double> z(n);
  for (auto& v : z) v = (rng.next_double() - 0.5) * span;
  return z;
}

}  // namespace

TEST_CASE("ceu_target: suppressed label and renormalized remainder") {
  SUBCASE("two tokens leave a point mass") {
    auto s = single_row({0.0, 0.0}, 0);
    auto t = ceu_target(s.block, s.labels);
    CHECK(t.probs.data[0] == 0.0);
    CHECK(t.probs.data[1] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("frozen oracle row") {
    auto s = single_row({1.0, 2.0, 3.0}, 2);
    auto t = ceu_target(s.block, s.labels);
    CHECK(t.probs.data[0] == doctest::Approx(0.2689414213699951).epsilon(1e-10));
    CHECK(t.probs.data[1] == doctest::Approx(0.7310585786300049).epsilon(1e-10));
    CHECK(t.probs.data[2] == 0.0);
  }
  SUBCASE("confident row") {
    auto s = single_row({10.0, 0.0, 0.0}, 1);
    auto t = ceu_target(s.block, s.labels);
    CHECK(t.probs.data[0] == doctest::Approx(0.9999546021312976).epsilon(1e-10));
    CHECK(t.probs.data[1] == 0.0);
    CHECK(t.probs.data[2] == doctest::Approx(4.5397868702434395e-05).epsilon(1e-8));
  }
}

TEST_CASE("ceu_loss: frozen values and gradient identity") {
  SUBCASE("symmetric two-token case") {
    auto s = single_row({0.0, 0.0}, 0);
    CHECK(ceu_loss(s.block, s.labels).scalar() == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  }
  SUBCASE("frozen oracle value") {
    // -(0.26894... * log p0 + 0.73106... * log p1), p = softmax([1,2,3])
    auto s = single_row({1.0, 2.0, 3.0}, 2);
    CHECK(ceu_loss(s.block, s.labels).scalar() == doctest::Approx(1.6765473858092509).epsilon(1e-10));
  }
  SUBCASE("gradient equals p - p_target") {
    auto s = single_row({1.0, 2.0, 3.0}, 2);
    Var loss = ceu_loss(s.block, s.labels);
    backward(loss);
    const auto& g = s.logits_var.grad().data;
    CHECK(g[0] == doctest::Approx(-0.17891084819961465).epsilon(1e-10));
    CHECK(g[1] == doctest::Approx(-0.48633010757520722).epsilon(1e-10));
    CHECK(g[2] == doctest::Approx(0.66524095577482183).epsilon(1e-10));
  }
}

TEST_CASE("ceu_loss: gradient identity over random rows") {
  Rng rng(2024);
  for (int iter = 0; iter < 200; ++iter) {
    const std::size_t v = 2 + rng.next_below(63);
    auto z = random_logits(rng, v, 12.0);
    const std::int64_t y = static_cast<std::int64_t>(rng.next_below(v));
    auto s = single_row(z, y);
    Var loss = ceu_loss(s.block, s.labels);
    backward(loss);
    const auto p = softmax_ext(z);
    auto zc = z;
    zc[static_cast<std::size_t>(y)] = -kInf;
    const auto tgt = softmax_ext(zc);
    const auto& g = s.logits_var.grad().data;
    double gsum = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
      CHECK(std::abs(g[i] - (p[i] - tgt[i])) < 1e-10);
      gsum += g[i];
    }
    CHECK(std::abs(gsum) < 1e-10);
    // the true-label component is exactly the model's confidence
    CHECK(std::abs(g[static_cast<std::size_t>(y)] - p[static_cast<std::size_t>(y)]) < 1e-10);
  }
}

TEST_CASE("ceu vs grad_ascent in the high-confidence regime") {
  // p(y) >= 0.99: the unlearning loss keeps a strong signal, ascent vanishes
  auto make_conf = [](double margin) {
    return std::vector<double>{margin, 0.0, 0.0, 0.0};
  };
  for (double margin : {7.0, 9.0, 12.0}) {
    auto z = make_conf(margin);
    const auto p = softmax_ext(z);
    REQUIRE(p[0] >= 0.99);

    auto s1 = single_row(z, 0);
    Var l1 = ceu_loss(s1.block, s1.labels);
    backward(l1);
    CHECK(std::abs(s1.logits_var.grad().data[0]) >= 0.99);

    auto s2 = single_row(z, 0);
    Var l2 = grad_ascent_loss(s2.block, s2.labels);
    backward(l2);
    CHECK(std::abs(s2.logits_var.grad().data[0]) <= 0.01);
  }
}

TEST_CASE("grad_ascent_loss: values and vanishing gradient") {
  auto s = single_row({0.0, 0.0}, 0);
  CHECK(grad_ascent_loss(s.block, s.labels).scalar() == doctest::Approx(-0.6931471805599453).epsilon(1e-12));

  auto s2 = single_row({1.0, 2.0, 3.0}, 2);
  Var loss = grad_ascent_loss(s2.block, s2.labels);
  backward(loss);
  const auto& g = s2.logits_var.grad().data;
  CHECK(g[0] == doctest::Approx(-0.09003057317038046).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(-0.24472847105479767).epsilon(1e-8));
  CHECK(g[2] == doctest::Approx(0.33475904422517817).epsilon(1e-8));

  // p(y) -> 1 drives the ascent gradient to zero
  auto s3 = single_row({30.0, 0.0, 0.0}, 0);
  Var l3 = grad_ascent_loss(s3.block, s3.labels);
  backward(l3);
  for (double gi : s3.logits_var.grad().data) CHECK(std::abs(gi) < 1e-12);
}

TEST_CASE("cross_entropy_loss: values and classic gradient") {
  auto s = single_row({0.0, 0.0}, 1);
  CHECK(cross_entropy_loss(s.block, s.labels).scalar() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

  auto s2 = single_row({20.0, 0.0}, 0);
  CHECK(cross_entropy_loss(s2.block, s2.labels).scalar() == doctest::Approx(2.0611536181902037e-09).epsilon(1e-6));

  auto s3 = single_row({1.0, 2.0, 3.0}, 1);
  Var loss = cross_entropy_loss(s3.block, s3.labels);
  backward(loss);
  const auto p = softmax_ext(std::vector<double>{1.0, 2.0, 3.0});
  const auto& g = s3.logits_var.grad().data;
  CHECK(g[0] == doctest::Approx(p[0]).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(p[1] - 1.0).epsilon(1e-12));
  CHECK(g[2] == doctest::Approx(p[2]).epsilon(1e-12));
}

TEST_CASE("general_ceu_target_raw: frozen and limit rows") {
  SUBCASE("replacing a logit with itself is a no-op") {
    auto s = single_row({1.0, 2.0, 3.0}, 2);
    auto t = general_ceu_target_raw(s.block, s.labels, PreferenceScore::raw({3.0}));
    CHECK(t.probs.data[0] == doctest::Approx(0.09003057317038046).epsilon(1e-12));
    CHECK(t.probs.data[1] == doctest::Approx(0.24472847105479767).epsilon(1e-12));
    CHECK(t.probs.data[2] == doctest::Approx(0.66524095577482183).epsilon(1e-12));
  }
  SUBCASE("-inf reproduces the unlearning target") {
    auto s = single_row({1.0, 2.0, 3.0}, 2);
    auto t = general_ceu_target_raw(s.block, s.labels, PreferenceScore::raw({-kInf}));
    auto u = ceu_target(s.block, s.labels);
    for (std::size_t i = 0; i < 3; ++i) CHECK(t.probs.data[i] == u.probs.data[i]);
  }
  SUBCASE("+inf short-circuits to the exact one-hot") {
    auto s = single_row({1.0, 2.0, 3.0}, 0);
    auto t = general_ceu_target_raw(s.block, s.labels, PreferenceScore::raw({kInf}));
    CHECK(t.probs.data[0] == 1.0);
    CHECK(t.probs.data[1] == 0.0);
    CHECK(t.probs.data[2] == 0.0);
  }
}

TEST_CASE("general_ceu_target_normalized: endpoints and frozen midpoint") {
  auto s = single_row({1.0, 2.0, 3.0}, 2);
  SUBCASE("r = 1 gives the exact one-hot") {
    auto t = general_ceu_target_normalized(s.block, s.labels, PreferenceScore::normalized({1.0}));
    CHECK(t.probs.data[0] == 0.0);
    CHECK(t.probs.data[1] == 0.0);
    CHECK(t.probs.data[2] == 1.0);
  }
  SUBCASE("r = 0 gives the unlearning target") {
    auto t = general_ceu_target_normalized(s.block, s.labels, PreferenceScore::normalized({0.0}));
    auto u = ceu_target(s.block, s.labels);
    for (std::size_t i = 0; i < 3; ++i) CHECK(t.probs.data[i] == u.probs.data[i]);
  }
  SUBCASE("r = 0.5 splits mass between label and remainder") {
    auto t = general_ceu_target_normalized(s.block, s.labels, PreferenceScore::normalized({0.5}));
    CHECK(t.probs.data[0] == doctest::Approx(0.13447071068499755).epsilon(1e-10));
    CHECK(t.probs.data[1] == doctest::Approx(0.36552928931500245).epsilon(1e-10));
    CHECK(t.probs.data[2] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("score outside [0,1] is rejected") {
    CHECK_THROWS_AS(PreferenceScore::normalized({1.5}), std::invalid_argument);
    CHECK_THROWS_AS(PreferenceScore::normalized({-0.1}), std::invalid_argument);
  }
}

TEST_CASE("raw_to_normalized: frozen values and limits") {
  CHECK(raw_to_normalized(std::vector<double>{1.0, 2.0}, 0, 0.0) ==
        doctest::Approx(0.11920292202211755).epsilon(1e-10));
  CHECK(raw_to_normalized(std::vector<double>{1.0, 2.0}, 0, -kInf) == 0.0);
  CHECK(raw_to_normalized(std::vector<double>{1.0, 2.0}, 0, kInf) == 1.0);
  CHECK(raw_to_normalized(std::vector<double>{1.0, 2.0, 3.0}, 2, 3.0) ==
        doctest::Approx(0.66524095577482183).epsilon(1e-10));
  // all non-label logits at -inf violate the precondition
  CHECK_THROWS_AS(raw_to_normalized(std::vector<double>{-kInf, 0.0}, 1, 0.0), degenerate_distribution_error);
}

TEST_CASE("raw/normalized target equivalence over random triples") {
  Rng rng(777);
  const std::vector<double> specials{-kInf, kInf, -20.0, 20.0, 0.0};
  for (int iter = 0; iter < 1000; ++iter) {
    const std::size_t v = 2 + rng.next_below(31);
    auto z = random_logits(rng, v, 14.0);
    const std::int64_t y = static_cast<std::int64_t>(rng.next_below(v));
    double r_raw;
    if (iter % 5 == 0) {
      r_raw = specials[rng.next_below(specials.size())];
    } else {
      r_raw = (rng.next_double() - 0.5) * 30.0;
    }
    auto s = single_row(z, y);
    auto t_raw = general_ceu_target_raw(s.block, s.labels, PreferenceScore::raw({r_raw}));
    const double rn = raw_to_normalized(z, y, r_raw);
    auto t_norm = general_ceu_target_normalized(s.block, s.labels, PreferenceScore::normalized({rn}));
    for (std::size_t i = 0; i < v; ++i) {
      CHECK(std::abs(t_raw.probs.data[i] - t_norm.probs.data[i]) < 1e-10);
    }
  }
}

TEST_CASE("general_ceu_loss: endpoint identities") {
  SUBCASE("uniform two-token with r = 1 is plain cross entropy") {
    auto s = single_row({0.0, 0.0}, 0);
    Var loss = general_ceu_loss(s.block, s.labels, PreferenceScore::normalized({1.0}));
    CHECK(loss.scalar() == doctest::Approx(0.6931471805599453).epsilon(1e-12));
  }
  SUBCASE("random batches: r=1 equals cross entropy, r=0 equals the unlearning loss") {
    Rng rng(31);
    for (int iter = 0; iter < 100; ++iter) {
      const std::int64_t B = 1 + static_cast<std::int64_t>(rng.next_below(3));
      const std::int64_t T = 2 + static_cast<std::int64_t>(rng.next_below(4));
      const std::int64_t V = 3 + static_cast<std::int64_t>(rng.next_below(14));
      DenseArray logits = DenseArray::zeros({B, T, V});
      for (auto& x : logits.data) x = (rng.next_double() - 0.5) * 10.0;
      std::vector<std::int64_t> ids(static_cast<std::size_t>(B * T), -100);
      std::size_t n_valid = 0;
      for (auto& id : ids) {
        if (rng.next_double() < 0.6) {
          id = static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(V)));
          ++n_valid;
        }
      }
      if (n_valid == 0) {
        ids[0] = 0;
        n_valid = 1;
      }
      LogitBlock block = make_logit_block(Var::param(logits));
      LabelBlock labels = labels_2d(B, T, ids);

      Var l1 = general_ceu_loss(block, labels, PreferenceScore::normalized(std::vector<double>(n_valid, 1.0)));
      Var ce = cross_entropy_loss(block, labels);
      CHECK(std::abs(l1.scalar() - ce.scalar()) < 1e-12);

      Var l0 = general_ceu_loss(block, labels, PreferenceScore::normalized(std::vector<double>(n_valid, 0.0)));
      Var cu = ceu_loss(block, labels);
      CHECK(std::abs(l0.scalar() - cu.scalar()) < 1e-12);
    }
  }
  SUBCASE("frozen midpoint value") {
    // -(0.134470... * log p0 + 0.365529... * log p1 + 0.5 * log p2), p = softmax([1,2,3])
    auto s = single_row({1.0, 2.0, 3.0}, 2);
    Var loss = general_ceu_loss(s.block, s.labels, PreferenceScore::normalized({0.5}));
    CHECK(loss.scalar() == doctest::Approx(1.0420766751303996).epsilon(1e-10));
  }
}

TEST_CASE("general_ceu_loss: gradient matches p - target and sums to zero") {
  Rng rng(88);
  for (int iter = 0; iter < 100; ++iter) {
    const std::size_t v = 2 + rng.next_below(15);
    auto z = random_logits(rng, v, 10.0);
    const std::int64_t y = static_cast<std::int64_t>(rng.next_below(v));
    const double r = rng.next_double();
    auto s = single_row(z, y);
    PreferenceScore score = PreferenceScore::normalized({r});
    auto tgt = general_ceu_target_normalized(s.block, s.labels, score);
    Var loss = general_ceu_loss(s.block, s.labels, score);
    backward(loss);
    const auto p = softmax_ext(z);
    const auto& g = s.logits_var.grad().data;
    double gsum = 0.0;
    for (std::size_t i = 0; i < v; ++i) {
      CHECK(std::abs(g[i] - (p[i] - tgt.probs.data[i])) < 1e-10);
      gsum += g[i];
    }
    CHECK(std::abs(gsum) < 1e-10);
  }
}

TEST_CASE("losses: masking leaves ignored positions inert") {
  Rng rng(5);
  DenseArray logits = DenseArray::zeros({2, 3, 5});
  for (auto& x : logits.data) x = (rng.next_double() - 0.5) * 6.0;
  std::vector<std::int64_t> ids{-100, 2, -100, 4, -100, -100};
  LabelBlock labels = labels_2d(2, 3, ids);

  auto eval_all = [&](const DenseArray& l) {
    LogitBlock block = make_logit_block(Var::constant(l));
    return std::vector<double>{ceu_loss(block, labels).scalar(), cross_entropy_loss(block, labels).scalar(),
                               grad_ascent_loss(block, labels).scalar(),
                               general_ceu_loss(block, labels, PreferenceScore::normalized({0.3, 0.9})).scalar()};
  };
  const auto before = eval_all(logits);

  DenseArray perturbed = logits;
  for (std::int64_t b = 0; b < 2; ++b) {
    for (std::int64_t t = 0; t < 3; ++t) {
      if (labels.at(b, t) != -100) continue;
      for (std::int64_t j = 0; j < 5; ++j) {
        perturbed.data[static_cast<std::size_t>(((b * 3) + t) * 5 + j)] += 500.0 * (rng.next_double() - 0.5);
      }
    }
  }
  const auto after = eval_all(perturbed);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);  // bitwise
}

TEST_CASE("losses: multi-position mean reduction") {
  // two valid positions: loss is the mean, gradient per position is (p - target)/2
  DenseArray logits = DenseArray::zeros({1, 2, 3});
  const std::vector<double> row0{1.0, 2.0, 3.0}, row1{0.5, -0.5, 0.0};
  std::copy(row0.begin(), row0.end(), logits.data.begin());
  std::copy(row1.begin(), row1.end(), logits.data.begin() + 3);
  Var lv = Var::param(logits);
  LogitBlock block = make_logit_block(lv);
  LabelBlock labels = labels_2d(1, 2, {2, 0});

  Var loss = ceu_loss(block, labels);
  backward(loss);

  auto s0 = single_row(row0, 2);
  auto s1 = single_row(row1, 0);
  const double expect = 0.5 * (ceu_loss(s0.block, s0.labels).scalar() + ceu_loss(s1.block, s1.labels).scalar());
  CHECK(loss.scalar() == doctest::Approx(expect).epsilon(1e-12));

  Var la = ceu_loss(s0.block, s0.labels);
  backward(la);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(lv.grad().data[i] == doctest::Approx(0.5 * s0.logits_var.grad().data[i]).epsilon(1e-12));
  }
}

TEST_CASE("losses: empty supervision and label range errors") {
  DenseArray logits = DenseArray::zeros({1, 2, 3});
  LogitBlock block = make_logit_block(Var::constant(logits));
  CHECK_THROWS_AS(ceu_loss(block, labels_2d(1, 2, {-100, -100})), empty_supervision_error);
  CHECK_THROWS_AS(cross_entropy_loss(block, labels_2d(1, 2, {-100, -100})), empty_supervision_error);
  CHECK_THROWS_AS(ceu_loss(block, labels_2d(1, 2, {3, -100})), std::invalid_argument);
  CHECK_THROWS_AS(make_logit_block(Var::constant(DenseArray::zeros({2, 3}))), std::invalid_argument);
  DenseArray bad = DenseArray::zeros({1, 1, 3});
  bad.data[1] = kInf;
  CHECK_THROWS_AS(make_logit_block(Var::constant(bad)), std::invalid_argument);
}

TEST_CASE("losses: analytic gradients match finite differences") {
  // The stop-gradient makes each target a constant of the loss, so the
  // finite-difference oracle perturbs the logits against the target built at
  // the base point.
  Rng rng(404);
  for (int iter = 0; iter < 10; ++iter) {
    const std::int64_t V = 8;
    DenseArray logits = DenseArray::zeros({1, 2, V});
    for (auto& x : logits.data) x = (rng.next_double() - 0.5) * 6.0;
    std::vector<std::int64_t> ids{static_cast<std::int64_t>(rng.next_below(8)),
                                  static_cast<std::int64_t>(rng.next_below(8))};
    LabelBlock labels = labels_2d(1, 2, ids);
    LogitBlock base = make_logit_block(Var::constant(logits));

    auto check_target = [&](const TargetDistribution& target) {
      auto f = [&](const Var& v) {
        LogitBlock block = make_logit_block(reshape(v, {1, 2, V}));
        return target_cross_entropy(block, labels, target);
      };
      DenseArray flat({2 * V}, logits.data);
      CHECK(finite_diff_check(f, flat, 1e-5) < 1e-5);
    };
    check_target(ceu_target(base, labels));
    check_target(general_ceu_target_normalized(base, labels, PreferenceScore::normalized({0.25, 0.75})));
    check_target(general_ceu_target_raw(base, labels, PreferenceScore::raw({1.5, -2.0})));

    // one-hot targets do not depend on the logits, so the plain losses can be
    // fed to the checker directly
    auto check_plain = [&](auto&& make_loss) {
      auto f = [&](const Var& v) {
        LogitBlock block = make_logit_block(reshape(v, {1, 2, V}));
        return make_loss(block);
      };
      DenseArray flat({2 * V}, logits.data);
      CHECK(finite_diff_check(f, flat, 1e-5) < 1e-5);
    };
    check_plain([&](const LogitBlock& b) { return cross_entropy_loss(b, labels); });
    check_plain([&](const LogitBlock& b) { return grad_ascent_loss(b, labels); });
  }
}

TEST_CASE("ceu_loss: lower bound is the target entropy") {
  // Minimizing over a free logit vector drives the loss to the entropy of the
  // co-moving target and the label probability to zero.
  std::vector<double> z{0.6, -0.2, 0.9, 0.1, -0.7, 0.3, 0.0, 0.45};
  const std::int64_t y = 2;
  // per-coordinate adaptive descent; short moment memory keeps steps moving
  // as the gradients decay exponentially
  std::vector<double> m(z.size(), 0.0), v(z.size(), 0.0);
  const double lr = 0.05, b1 = 0.5, b2 = 0.9, eps = 1e-8;
  for (int step = 1; step <= 5000; ++step) {
    auto s = single_row(z, y);
    Var loss = ceu_loss(s.block, s.labels);
    backward(loss);
    const auto& g = s.logits_var.grad().data;
    for (std::size_t i = 0; i < z.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, step));
      const double vh = v[i] / (1 - std::pow(b2, step));
      z[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
  auto s = single_row(z, y);
  const double final_loss = ceu_loss(s.block, s.labels).scalar();
  const auto tgt = ceu_target(s.block, s.labels);
  double entropy = 0.0;
  for (double p : tgt.probs.data) {
    if (p > 0.0) entropy -= p * std::log(p);
  }
  CHECK(final_loss >= entropy - 1e-9);
  CHECK(final_loss - entropy < 1e-6);
  const auto p = softmax_ext(z);
  CHECK(p[static_cast<std::size_t>(y)] < 1e-6);
}
