#include <catch2/catch_amalgamated.hpp>

#include "vlbm/metrics.hpp"
#include "vlbm/rng.hpp"

using namespace vlbm;

TEST_CASE("spearman") {
  CHECK(spearman({1, 2, 3}, {10, 20, 30}) == 1.0);
  CHECK(spearman({3, 2, 1}, {10, 20, 30}) == -1.0);
  CHECK_THAT(spearman({0.1, 0.4, 0.3, 0.2}, {10, 40, 20, 30}),
             Catch::Matchers::WithinAbs(0.8, 1e-12));
  CHECK_THROWS_AS(spearman({1.0}, {2.0}), std::invalid_argument);
  CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), std::invalid_argument);
  CHECK(std::isnan(spearman({5, 5, 5}, {1, 2, 3})));

  SECTION("tied values get average ranks") {
    std::vector<double> r = average_ranks({3, 1, 3, 2});
    CHECK(r[0] == 3.5);
    CHECK(r[1] == 1.0);
    CHECK(r[2] == 3.5);
    CHECK(r[3] == 2.0);
  }
  SECTION("invariant under strictly monotone transforms") {
    RNGStream rng(99);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> a, b;
      for (int i = 0; i < 8; ++i) {
        a.push_back(rng.normal());
        b.push_back(rng.normal());
      }
      double base = spearman(a, b);
      std::vector<double> a2, b2;
      for (double v : a) a2.push_back(std::exp(0.5 * v) + 3.0);
      for (double v : b) b2.push_back(v * v * v);
      CHECK_THAT(spearman(a2, b), Catch::Matchers::WithinAbs(base, 1e-12));
      CHECK_THAT(spearman(a, b2), Catch::Matchers::WithinAbs(base, 1e-12));
    }
  }
}

TEST_CASE("regret at 1") {
  SECTION("picking the true best gives zero") {
    auto [raw, norm] = regret_at_1({1, 9, 2}, {5, 8, 3});
    CHECK(raw == 0.0);
    CHECK(norm == 0.0);
  }
  SECTION("hand case") {
    auto [raw, norm] = regret_at_1({2, 5, 1}, {3, 1, 2});
    CHECK(raw == 2.0);
    CHECK(norm == 1.0);
  }
  SECTION("single policy degenerates to zero") {
    auto [raw, norm] = regret_at_1({4}, {7});
    CHECK(raw == 0.0);
    CHECK(norm == 0.0);
  }
  SECTION("est ties break to the lowest index") {
    auto [raw, norm] = regret_at_1({5, 5, 5}, {1, 3, 2});
    CHECK(raw == 2.0);  // index 0 picked, truth there is 1
    CHECK(norm == 1.0);
  }
  SECTION("constant truth defines normalized regret as zero") {
    auto [raw, norm] = regret_at_1({1, 2}, {4, 4});
    CHECK(raw == 0.0);
    CHECK(norm == 0.0);
  }
  SECTION("argmax invariance under monotone transforms of est") {
    RNGStream rng(41);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> est, truth;
      for (int i = 0; i < 6; ++i) {
        est.push_back(rng.normal());
        truth.push_back(rng.normal());
      }
      auto base = regret_at_1(est, truth);
      std::vector<double> est2;
      for (double v : est) est2.push_back(2.0 * v + 10.0);
      auto tr = regret_at_1(est2, truth);
      CHECK(base.first == tr.first);
      CHECK(base.second == tr.second);
      CHECK(base.first >= 0.0);
      CHECK(base.second >= 0.0);
      CHECK(base.second <= 1.0);
    }
  }
  CHECK_THROWS_AS(regret_at_1({}, {}), std::invalid_argument);
}

TEST_CASE("mae") {
  CHECK(mae_metric({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(mae_metric({1, 3}, {2, 2}) == 1.0);
  SECTION("not invariant under reordering, unlike spearman") {
    std::vector<double> est{1, 3}, truth{2, 2};
    CHECK(mae_metric(est, truth) == mae_metric({3, 1}, truth));  // symmetric here by chance
    std::vector<double> est2{1, 5}, truth2{1, 5};
    CHECK(mae_metric(est2, truth2) == 0.0);
    CHECK(mae_metric({5, 1}, truth2) == 4.0);
  }
  CHECK_THROWS_AS(mae_metric({1}, {1, 2}), std::invalid_argument);
  CHECK_THROWS_AS(mae_metric({}, {}), std::invalid_argument);
}
