// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "moesched/cost_model.hpp"
#include "profile_support.hpp"

using namespace moesched;
using moesched::testing::entry;
using moesched::testing::random_constrained_profile;
using moesched::testing::random_profile;
using moesched::testing::uniform_profile;

namespace {

ScheduleVolumes vols(std::int64_t blm, std::int64_t etm, int n_mp, int n_esp) { return {blm, etm, n_mp, n_esp}; }

ParallelLayout layout_for(int n_mp, int n_esp) { return ParallelLayout(n_mp, 4, n_esp); }

std::vector<std::pair<double, double>> line(double alpha, double beta, const std::vector<double>& xs) {
  std::vector<std::pair<double, double>> s;
  for (double x : xs) s.emplace_back(x, alpha + beta * x);
  return s;
}

}  // namespace

TEST_CASE("predict_collective") {
  const AlphaBeta ab = entry(Collective::AlltoAll, GroupKind::EP, 6.64e-4, 5.38e-10);
  CHECK(predict_collective(ab, 1e9) == doctest::Approx(0.538664).epsilon(1e-12));
  CHECK(predict_collective(ab, 0) == ab.alpha);
  CHECK(predict_collective(ab, 2e6) - predict_collective(ab, 1e6) == doctest::Approx(ab.beta * 1e6));
  CHECK_THROWS_AS(predict_collective(ab, -1), std::invalid_argument);
}

TEST_CASE("fit recovers exact lines") {
  for (auto [alpha, beta] : {std::pair{6.64e-4, 5.38e-10}, {1.09e-4, 7.14e-10}, {0.0, 1e-9}}) {
    std::vector<double> xs;
    for (int i = 0; i < 40; ++i) xs.push_back(1e5 * (i + 1));
    const AlphaBeta ab = fit_alpha_beta(line(alpha, beta, xs));
    CHECK(ab.alpha == doctest::Approx(alpha).epsilon(1e-6));
    CHECK(ab.beta == doctest::Approx(beta).epsilon(1e-6));
    CHECK(ab.r_squared == doctest::Approx(1.0));
  }
  const AlphaBeta two = fit_alpha_beta({{10, 3}, {20, 5}});
  CHECK(two.alpha == doctest::Approx(1.0));
  CHECK(two.beta == doctest::Approx(0.2));
  CHECK(two.r_squared == 1.0);
}

TEST_CASE("fit errors and clamping") {
  CHECK_THROWS_AS(fit_alpha_beta({{5, 1}, {5, 2}}), std::invalid_argument);
  CHECK_THROWS_AS(fit_alpha_beta({{5, 1}}), std::invalid_argument);
  CHECK_THROWS_AS(fit_alpha_beta({{1, 5}, {2, 4}}), std::invalid_argument);
  const AlphaBeta ab = fit_alpha_beta({{10, 0.9}, {20, 2.0}, {30, 3.0}});
  CHECK(ab.alpha_clamped);
  CHECK(ab.alpha == 0.0);
  CHECK(ab.beta > 0.0);
  CHECK(ab.r_squared >= 0.0);
  CHECK(ab.r_squared <= 1.0);
}

TEST_CASE("baseline cost examples") {
  const CostProfile unit = uniform_profile(0.0, 1.0);
  CHECK(cost_baseline(vols(10, 100, 1, 1), layout_for(1, 1), unit) == doctest::Approx(310));
  CHECK(cost_baseline(vols(10, 50, 1, 2), layout_for(1, 2), unit) == doctest::Approx(320));
  CHECK(cost_baseline(vols(10, 0, 1, 2), layout_for(1, 2), unit) == doctest::Approx(20));

  CostProfile p;
  p.set(entry(Collective::AllGather, GroupKind::ESP, 0.0, 2.0));
  p.set(entry(Collective::AllReduce, GroupKind::ESP, 0.0, 3.0));
  p.set(entry(Collective::AlltoAll, GroupKind::EP, 0.0, 5.0));
  CHECK(cost_baseline(vols(7, 11, 1, 1), layout_for(1, 1), p) == doctest::Approx(2 * 7 + 3 * 11 + 2 * 5 * 11));
}

TEST_CASE("fused and S1 costs") {
  const CostProfile unit = uniform_profile(0.0, 1.0);
  CHECK(cost_fused(vols(10, 100, 1, 1), layout_for(1, 1), unit) == doctest::Approx(200));
  CHECK(cost_fused(vols(10, 0, 1, 1), layout_for(1, 1), uniform_profile(0.25, 1.0)) == doctest::Approx(0.5));
  CHECK(cost_s1(vols(1000, 100, 2, 1), layout_for(2, 1), unit) == doctest::Approx(1100));
  CHECK(cost_s1(vols(0, 100, 1, 1), layout_for(1, 1), unit) == cost_fused(vols(0, 100, 1, 1), layout_for(1, 1), unit));
  double previous = cost_s1(vols(64, 4096, 1, 2), layout_for(1, 2), unit);
  for (int n_mp : {2, 4}) {
    const double t = cost_s1(vols(64, 4096, n_mp, 2), layout_for(n_mp, 2), unit);
    CHECK(t < previous);
    previous = t;
  }
}

TEST_CASE("S2 cost examples") {
  const CostProfile unit = uniform_profile(0.0, 1.0);
  CHECK(cost_s2(vols(10, 100, 2, 2), layout_for(2, 2), unit) == doctest::Approx(300));
  CostProfile startup = uniform_profile(0.0, 1.0);
  startup.set(entry(Collective::AlltoAll, GroupKind::EP_ESP, 1.0, 1.0));
  startup.set(entry(Collective::Overlap, GroupKind::EP_ESP, 2.0, 1.0));
  startup.set(entry(Collective::AllGather, GroupKind::MP, 4.0, 1.0));
  CHECK(cost_s2(vols(10, 0, 2, 2), layout_for(2, 2), startup) == doctest::Approx(7.0));
  // Large tokens with a small dispatch favour S2, a large dispatch favours S1.
  CHECK(cost_s2(vols(100000, 10, 2, 2), layout_for(2, 2), unit) <
        cost_s1(vols(100000, 10, 2, 2), layout_for(2, 2), unit));
  CHECK(cost_s1(vols(10, 100000, 2, 2), layout_for(2, 2), unit) <
        cost_s2(vols(10, 100000, 2, 2), layout_for(2, 2), unit));
}

TEST_CASE("selection examples") {
  const CostProfile unit = uniform_profile(0.0, 1.0);
  const CostReport a = select_schedule(vols(1000, 100, 2, 2), layout_for(2, 2), unit);
  CHECK(a.t_D1 == doctest::Approx(1200));
  CHECK(a.t_D2 == doctest::Approx(300));
  CHECK(a.chosen == ScheduleKind::S2);

  const CostReport b = select_schedule(vols(10, 500, 2, 2), layout_for(2, 2), unit);
  CHECK(b.t_D1 == doctest::Approx(1010));
  CHECK(b.t_D2 == doctest::Approx(1500));
  CHECK(b.chosen == ScheduleKind::S1);

  // BLM = ETM with unit costs prices S1 and S2 the same; the tie goes to S1.
  const CostReport tie = select_schedule(vols(100, 100, 2, 2), layout_for(2, 2), unit);
  CHECK(tie.t_D1 == tie.t_D2);
  CHECK(tie.chosen == ScheduleKind::S1);
  CHECK_FALSE(a.terms.empty());
}

TEST_CASE("selection ignores uniform scaling") {
  Rng rng(99);
  for (int i = 0; i < 500; ++i) {
    const CostProfile p = random_profile(rng);
    CostProfile scaled;
    const double s = uniform(rng, 0.01, 100.0);
    for (auto ab : p.entries()) {
      ab.alpha *= s;
      ab.beta *= s;
      scaled.set(ab);
    }
    const auto v = vols(uniform_int(rng, 1, 1 << 24), uniform_int(rng, 1, 1 << 24), 2, 2);
    CHECK(select_schedule(v, layout_for(2, 2), p).chosen == select_schedule(v, layout_for(2, 2), scaled).chosen);
  }
}

TEST_CASE("missing entries") {
  CostProfile p;
  p.set(entry(Collective::AlltoAll, GroupKind::EP_ESP, 0.0, 1.0));
  CHECK_THROWS_WITH_AS(cost_baseline(vols(1, 1, 1, 2), layout_for(1, 2), p), doctest::Contains("AG_ESP"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(cost_s2(vols(1, 1, 2, 2), layout_for(2, 2), p), doctest::Contains("OVERLAP"),
                       std::invalid_argument);
  // A gather over single-rank MP groups needs no entry.
  CHECK(cost_s1(vols(5, 10, 1, 1), layout_for(1, 1), p) == doctest::Approx(20));
  CHECK_THROWS_AS(p.at(Collective::AllGather, GroupKind::MP), std::invalid_argument);
  CHECK_THROWS_AS(p.set(entry(Collective::AllGather, GroupKind::MP, -1.0, 1.0)), std::invalid_argument);
  CHECK_THROWS_AS(cost_s1(vols(5, 10, 1, 1), layout_for(2, 1), p), std::invalid_argument);
}

TEST_CASE("literal selector arithmetic") {
  const MoEConfig cfg{2, 4, 3, 4, 4, 2, 1.5};
  const ParallelLayout layout(2, 4, 1);
  CostProfile p = uniform_profile(0.0, 1.0);
  const CostReport r = select_schedule_literal(cfg, layout, p);
  const double x = 2 * 4 * 3;
  const double t = 2 * 1.5 * 2 * 4 * 3 / 4.0;
  const double y = 4 * t * 3 * 1;
  CHECK(r.t_D1 == doctest::Approx(2 * y / 2 + x));
  CHECK(r.t_D2 == doctest::Approx(y / 2 + y));
  CHECK(r.t_B == doctest::Approx(cost_baseline(cfg, layout, p)));
}

TEST_CASE("constraint set properties") {
  Rng rng(2718);
  int checked = 0;
  for (int i = 0; i < 10000; ++i) {
    const CostProfile p = random_constrained_profile(rng);
    REQUIRE(in_constraint_set(p));
    const int n_esp = 1 << uniform_int(rng, 0, 3);
    const auto blm = uniform_int(rng, 0, 1 << 26);
    const auto etm = uniform_int(rng, 0, 1 << 26);
    const int n_mp = 1 << uniform_int(rng, 0, 3);
    const auto layout = ParallelLayout(n_mp, 8, n_esp);
    const auto v = vols(blm, etm, n_mp, n_esp);
    if (n_mp >= 2) {
      const double t_b = cost_baseline(v, layout, p);
      CHECK(t_b - cost_s2(v, layout, p) >= -1e-12 * t_b);
    } else {
      const double gather = predict_collective(p.at(Collective::AllGather, GroupKind::ESP), double(blm * n_esp));
      CHECK(cost_baseline(v, layout, p) - cost_fused(v, layout, p) >= gather * (1 - 1e-12));
    }
    ++checked;
  }
  CHECK(checked == 10000);
}

TEST_CASE("constraint violations are named") {
  CostProfile p = uniform_profile(1e-5, 1e-9);
  CHECK_FALSE(in_constraint_set(p));
  p.set(entry(Collective::AllReduce, GroupKind::ESP, 2e-5, 2e-9));
  p.set(entry(Collective::Overlap, GroupKind::EP_ESP, 0.0, 1e-9));
  CHECK(constraint_violations(p).empty());
  p.set(entry(Collective::AllGather, GroupKind::MP, 1e-5, 2e-9));
  const auto failed = constraint_violations(p);
  CHECK(std::find(failed.begin(), failed.end(), "AG_MP <= AG_ESP") != failed.end());
  CHECK(constraint_violations(CostProfile{}) == std::vector<std::string>{"incomplete profile"});
}

TEST_CASE("profile and sample CSV") {
  Rng rng(1);
  const CostProfile p = random_constrained_profile(rng);
  std::ostringstream out;
  write_profile(out, p);
  std::istringstream in(out.str());
  const CostProfile back = read_profile(in);
  REQUIRE(back.entries().size() == p.entries().size());
  for (std::size_t i = 0; i < back.entries().size(); ++i) {
    CHECK(back.entries()[i].alpha == p.entries()[i].alpha);
    CHECK(back.entries()[i].beta == p.entries()[i].beta);
  }
  CHECK(out.str().rfind("collective,group,alpha,beta,r_squared\n", 0) == 0);

  std::istringstream samples(
      "collective,group,elements,seconds\nAG,MP,10,3\nAG,MP,20,5\nA2A,EP&ESP,1,2\nA2A,EP_ESP,3,3\n");
  const FitSamples s = read_fit_samples(samples);
  CHECK(s.size() == 2);
  const CostProfile fitted = fit_profile(s);
  CHECK(fitted.at(Collective::AllGather, GroupKind::MP).beta == doctest::Approx(0.2));
  CHECK(fitted.at(Collective::AllGather, GroupKind::MP).r_squared == 1.0);

  std::istringstream bad("collective,group,elements,seconds\nAG,MP,10,3\nAG,MP,x,5\n");
  CHECK_THROWS_WITH_AS(read_fit_samples(bad), doctest::Contains("line 3"), std::invalid_argument);
  std::istringstream header("c,g,e,s\n");
  CHECK_THROWS_AS(read_fit_samples(header), std::invalid_argument);
  std::istringstream short_row("collective,group,elements,seconds\nAG,MP,10\n");
  CHECK_THROWS_AS(read_fit_samples(short_row), std::invalid_argument);
  std::istringstream one_size("collective,group,elements,seconds\nAG,MP,10,3\nAG,MP,10,4\n");
  CHECK_THROWS_WITH_AS(fit_profile(read_fit_samples(one_size)), doctest::Contains("AG_MP"), std::invalid_argument);
}
