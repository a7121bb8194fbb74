#include <cmath>
#include <numeric>
#include <doctest.h>

#include "dsmd/balancer.hpp"
#include "dsmd/errors.hpp"
#include "dsmd/rng.hpp"

using namespace dsmd;

namespace {

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

}  // namespace

TEST_SUITE("balancer") {

TEST_CASE("scale_losses examples") {
  const std::vector<double> l{2, 4, 1, 1};
  const auto s = scale_losses(l, ScalingMode::literal);
  const double f = std::log(4.0);
  CHECK(scale_factor(l, ScalingMode::literal) == f);
  CHECK(s[0] == doctest::Approx(2.773).epsilon(1e-3));
  CHECK(s[1] == doctest::Approx(5.545).epsilon(1e-3));
  CHECK(s[2] == doctest::Approx(1.386).epsilon(1e-3));
  for (std::size_t i = 0; i < 4; ++i) CHECK(s[i] == l[i] * f);

  const std::vector<double> small{2.7, 0.1, 1.0};
  CHECK(scale_losses(small, ScalingMode::literal) == small);
  const std::vector<double> at_e{std::exp(1.0), 1.0};
  CHECK(scale_factor(at_e, ScalingMode::literal) == doctest::Approx(1.0));
  CHECK(scale_losses(l, ScalingMode::off) == l);
  const std::vector<double> zeros{0, 0};
  CHECK(scale_losses(zeros, ScalingMode::literal) == zeros);
}

TEST_CASE("first update gives uniform weights") {
  LossBalancer b(4, 1.0, 4.0);
  CHECK(b.lambdas() == std::vector<double>{1, 1, 1, 1});
  const std::vector<double> l{3, 1, 7, 0.5};
  const auto& lam = b.update_weights(l);
  CHECK(lam == std::vector<double>{1, 1, 1, 1});
  CHECK(b.rates() == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("equal ratios give uniform weights") {
  LossBalancer b(4, 1.0, 4.0);
  b.update_weights(std::vector<double>{4, 4, 4, 4});
  const auto& lam = b.update_weights(std::vector<double>{2, 2, 2, 2});
  CHECK(b.rates() == std::vector<double>{0.5, 0.5, 0.5, 0.5});
  for (double x : lam) CHECK(x == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("two-task softmax arithmetic") {
  LossBalancer b(2, 1.0, 2.0);
  b.update_weights(std::vector<double>{1, 1});
  const auto& lam = b.update_weights(std::vector<double>{1, 2});
  const double e1 = std::exp(1.0), e2 = std::exp(2.0);
  CHECK(std::abs(lam[0] - 2 * e1 / (e1 + e2)) < 1e-15);
  CHECK(std::abs(lam[1] - 2 * e2 / (e1 + e2)) < 1e-15);
  CHECK(lam[0] == doctest::Approx(0.5379).epsilon(1e-4));
  CHECK(lam[1] == doctest::Approx(1.4621).epsilon(1e-4));
}

TEST_CASE("division guard") {
  LossBalancer b(2, 1.0, 2.0);
  b.update_weights(std::vector<double>{0.0, 1e-13});
  b.update_weights(std::vector<double>{5.0, 5.0});
  CHECK(b.rates() == std::vector<double>{1.0, 1.0});
}

TEST_CASE("invalid losses") {
  LossBalancer b(2, 1.0, 2.0);
  CHECK_THROWS_AS(b.update_weights(std::vector<double>{std::nan(""), 1.0}), NumericsError);
  CHECK_THROWS_AS(b.update_weights(std::vector<double>{-1.0, 1.0}), NumericsError);
  CHECK_THROWS_AS(b.update_weights(std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("random sequences keep the sum, positivity and ordering") {
  SeededRng rng(1);
  for (double T : {0.1, 1.0, 5.0}) {
    for (double K : {1.0, 4.0, 7.5}) {
      LossBalancer b(5, T, K);
      for (int step = 0; step < 200; ++step) {
        std::vector<double> l(5);
        for (double& x : l) x = rng.uniform(0.5, 2.0);
        const auto& lam = b.update_weights(l);
        CHECK(std::abs(sum(lam) - K) < 1e-9);
        const auto& w = b.rates();
        for (std::size_t i = 0; i < 5; ++i) {
          CHECK(lam[i] > 0.0);
          for (std::size_t j = 0; j < 5; ++j) {
            if (w[i] > w[j]) CHECK(lam[i] > lam[j]);
          }
        }
      }
    }
  }
}

TEST_CASE("high temperature flattens the weights") {
  LossBalancer b(4, 1e6, 4.0);
  b.update_weights(std::vector<double>{1, 1, 1, 1});
  for (double x : b.update_weights(std::vector<double>{0.1, 5, 2, 9})) CHECK(std::abs(x - 1.0) < 1e-5);
}

TEST_CASE("shifting every ratio by a constant leaves weights unchanged") {
  // prev = 1 makes w equal to the current loss, so adding c to every loss adds c to every w.
  SeededRng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> l(4), l2(4);
    const double c = rng.uniform(0, 10);
    for (std::size_t i = 0; i < 4; ++i) {
      l[i] = rng.uniform(0.1, 3);
      l2[i] = l[i] + c;
    }
    LossBalancer a(4, 1.0, 4.0), b(4, 1.0, 4.0);
    a.update_weights(std::vector<double>{1, 1, 1, 1});
    b.update_weights(std::vector<double>{1, 1, 1, 1});
    const auto la = a.update_weights(l);
    const auto lb = b.update_weights(l2);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(la[i] - lb[i]) < 1e-12);
  }
}

TEST_CASE("combine") {
  const std::vector<double> ones{1, 1, 1, 1}, l{1, 2, 3, 4};
  CHECK(combine(ones, l) == 10.0);
  CHECK(combine(std::vector<double>{2, 0.5}, std::vector<double>{1, 4}) == 4.0);
  CHECK(combine(std::vector<double>{0.3, 9}, std::vector<double>{0, 0}) == 0.0);
  CHECK_THROWS_AS(combine(ones, std::vector<double>{1, 2}), ShapeError);
}

TEST_CASE("restore") {
  LossBalancer a(3, 1.0, 3.0);
  a.update_weights(std::vector<double>{1, 2, 3});
  a.update_weights(std::vector<double>{2, 2, 2});
  LossBalancer b(3, 1.0, 3.0);
  b.restore(a.previous_losses(), a.rates(), a.lambdas());
  const std::vector<double> next{1, 5, 2};
  CHECK(a.update_weights(next) == b.update_weights(next));
}

}  // TEST_SUITE
