// SPDX-License-Identifier: Apache-2.0
#include "histomask/schedule.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace histomask;
using histomask::testing::check_vec;

TEST_CASE("power schedule with unit exponent") {
  const auto s = build_schedule(ScheduleKind::power, 4, 1.0);
  check_vec(s.alpha_bar, {1.0, 0.75, 0.5, 0.25, 0.0});
  check_vec(s.drop, {0.25, 1.0 / 3.0, 0.5, 1.0});
  check_vec(s.revive, {1.0, 0.5, 1.0 / 3.0, 0.25});
  check_vec(s.weight, s.revive, 0.0);
  CHECK(check_schedule_invariants(s).empty());
}

TEST_CASE("log-gene exponent leaves one expected visible gene at T-1") {
  const double zeta = log_gene_zeta(50, 100);
  // independent route: log_50(100) = 1 + log(2) / log(50)
  CHECK(std::abs(zeta - (1.0 + std::log(2.0) / std::log(50.0))) < 1e-14);
  CHECK(std::abs(zeta - 1.1771838201) < 1e-9);
  const auto s = build_schedule(ScheduleKind::power, 50, zeta);
  CHECK(std::abs(s.alpha_bar[49] - 0.01) < 1e-12);
  CHECK(std::abs(100 * s.alpha_bar[49] - 1.0) < 1e-10);
  CHECK(log_gene_zeta(37, 37) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(log_gene_zeta(10, 100) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK_THROWS_AS(log_gene_zeta(1, 100), std::invalid_argument);
}

TEST_CASE("linear is the unit-exponent power form") {
  const auto a = build_schedule(ScheduleKind::linear, 7, 3.0);
  const auto b = build_schedule(ScheduleKind::power, 7, 1.0);
  check_vec(a.alpha_bar, b.alpha_bar, 0.0);
}

TEST_CASE("cosine schedule endpoints and shape") {
  const auto s = build_schedule(ScheduleKind::cosine, 10, 1.0);
  CHECK(s.alpha_bar.front() == 1.0);
  CHECK(s.alpha_bar.back() == 0.0);
  for (int t = 1; t < 10; ++t) {
    const double c = std::cos(t / 10.0 * M_PI / 2.0);
    CHECK(std::abs(s.alpha_bar[t] - c * c) < 1e-15);
  }
  CHECK(check_schedule_invariants(s).empty());
}

TEST_CASE("construction errors") {
  CHECK_THROWS_AS(build_schedule(ScheduleKind::power, 0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::power, 5, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::power, 5, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(parse_schedule_kind("sigmoid"), std::invalid_argument);
}

TEST_CASE("subsampling") {
  const auto s = build_schedule(ScheduleKind::linear, 4, 1.0);
  const auto same = subsample_schedule(s, 4);
  check_vec(same.alpha_bar, s.alpha_bar, 0.0);
  check_vec(same.revive, s.revive, 0.0);
  check_vec(same.drop, s.drop, 0.0);

  const auto two = subsample_schedule(s, 2);
  check_vec(two.alpha_bar, {1.0, 0.5, 0.0});
  check_vec(two.revive, {1.0, 0.5});
  CHECK(two.source_t == std::vector<int>{0, 2, 4});

  const auto one = subsample_schedule(s, 1);
  check_vec(one.alpha_bar, {1.0, 0.0});
  check_vec(one.revive, {1.0});

  CHECK_THROWS_AS(subsample_schedule(s, 0), std::invalid_argument);
  CHECK_THROWS_AS(subsample_schedule(s, 5), std::invalid_argument);
}

TEST_CASE("subsample indices follow round(i T / K)") {
  const auto s = build_schedule(ScheduleKind::power, 50, 1.3);
  for (int K : {1, 3, 7, 25, 49}) {
    const auto k = subsample_schedule(s, K);
    std::vector<int> want;
    for (int i = 0; i <= K; ++i) {
      const int idx = static_cast<int>(std::lround(i * 50.0 / K));
      if (want.empty() || want.back() != idx) want.push_back(idx);
    }
    CHECK(k.source_t == want);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(k.alpha_bar[i] == s.alpha_bar[want[i]]);
    CHECK(check_schedule_invariants(k).empty());
  }
}

TEST_CASE("property: invariants, telescope and monotone mask ratio on random schedules") {
  Rng rng(2024);
  const ScheduleKind kinds[] = {ScheduleKind::power, ScheduleKind::linear, ScheduleKind::cosine};
  for (int trial = 0; trial < 200; ++trial) {
    const auto kind = kinds[rng.uniform_int(0, 2)];
    const int T = rng.uniform_int(1, 200);
    const double zeta = 0.3 + 2.7 * rng.uniform();
    const auto s = build_schedule(kind, T, zeta);
    INFO("kind=" << to_string(kind) << " T=" << T << " zeta=" << zeta);
    REQUIRE(check_schedule_invariants(s).empty());
    const auto q = reverse_marginal_telescope(s);
    for (int t = 0; t <= T; ++t) CHECK(std::abs(q[t] - s.alpha_bar[t]) <= 1e-12);
    for (int t = 1; t <= T; ++t) CHECK(1.0 - s.alpha_bar[t] > 1.0 - s.alpha_bar[t - 1]);
    // subsampling closure
    const int K = rng.uniform_int(1, T);
    CHECK(check_schedule_invariants(subsample_schedule(s, K)).empty());
  }
}

TEST_CASE("property: any decreasing subsequence with endpoints is a valid schedule") {
  Rng rng(5);
  const auto s = build_schedule(ScheduleKind::power, 60, 0.7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> ab{1.0};
    std::vector<int> src{0};
    for (int t = 1; t < 60; ++t)
      if (rng.bernoulli(0.3)) {
        ab.push_back(s.alpha_bar[t]);
        src.push_back(t);
      }
    ab.push_back(0.0);
    src.push_back(60);
    const auto sub = schedule_from_alpha_bar(ab, src, ScheduleKind::power, 0.7);
    CHECK(check_schedule_invariants(sub).empty());
  }
  CHECK_THROWS_AS(schedule_from_alpha_bar({1.0, 0.5, 0.6, 0.0}, {0, 1, 2, 3}, ScheduleKind::power, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(schedule_from_alpha_bar({1.0, 0.5}, {0, 1}, ScheduleKind::power, 1.0), std::invalid_argument);
}

TEST_CASE("csv dump") {
  const auto csv = schedule_to_csv(build_schedule(ScheduleKind::linear, 2, 1.0));
  CHECK(csv == "t,alpha_bar,drop,revive,weight\n0,1,,,\n1,0.5,0.5,1,1\n2,0,1,0.5,0.5\n");
}
