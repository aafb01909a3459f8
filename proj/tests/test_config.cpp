// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <set>
#include <sstream>

#include "moesched/config.hpp"

using namespace moesched;

namespace {

MoEConfig moe(int k, double f, int B, int L, int E) {
  MoEConfig c;
  c.k = k;
  c.f = f;
  c.B = B;
  c.L = L;
  c.E = E;
  return c;
}

const char* kConfigText = R"(# sample
B = 2
L = 8
M = 8
H = 8
E = 4
k = 2
f = 1.0
N_MP = 2
N_EP = 2
N_ESP = 2
num_nodes = 2
devices_per_node = 2
beta_intra = 1e-10
beta_inter = 1e-9
alpha_link = 1e-5
seed = 11
)";

}  // namespace

TEST_CASE("capacity rounds up") {
  CHECK(derive_capacity(moe(2, 1.2, 2, 512, 8)) == 308);
  CHECK(derive_capacity(moe(2, 1.2, 8, 1024, 8)) == 2458);
  CHECK(derive_capacity(moe(4, 1.0, 3, 5, 4)) == 15);
  // 2 * 1.2 * 5 / 2 is 6 in exact arithmetic.
  CHECK(derive_capacity(moe(2, 1.2, 1, 5, 2)) == 6);
  CHECK(derive_capacity(moe(1, 0.01, 1, 4, 8)) == 1);
}

TEST_CASE("capacity is monotone in k, f, B, L and antitone in E") {
  const MoEConfig base = moe(2, 1.3, 3, 7, 5);
  const auto t = derive_capacity(base);
  CHECK(derive_capacity(moe(3, 1.3, 3, 7, 5)) >= t);
  CHECK(derive_capacity(moe(2, 1.9, 3, 7, 5)) >= t);
  CHECK(derive_capacity(moe(2, 1.3, 4, 7, 5)) >= t);
  CHECK(derive_capacity(moe(2, 1.3, 3, 9, 5)) >= t);
  CHECK(derive_capacity(moe(2, 1.3, 3, 7, 6)) <= t);
}

TEST_CASE("segment capacity") {
  CHECK(segment_capacity(7, 2) == 4);
  CHECK(segment_capacity(8, 4) == 2);
  CHECK(segment_capacity(1, 4) == 1);
  CHECK_THROWS_AS(segment_capacity(5, 0), std::invalid_argument);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(moe(3, 1.0, 1, 1, 2).validate(), std::invalid_argument);
  CHECK_THROWS_AS(moe(1, 0.0, 1, 1, 2).validate(), std::invalid_argument);
  CHECK_THROWS_AS(moe(1, 1.0, 0, 1, 2).validate(), std::invalid_argument);
  CHECK_THROWS_AS(ParallelLayout(3, 2, 1), std::invalid_argument);
  CHECK_THROWS_AS(ParallelLayout::for_world(6, 1, 4), std::invalid_argument);
}

TEST_CASE("group membership examples") {
  const ParallelLayout l(1, 2, 2);
  CHECK(l.group_members(GroupKind::ESP, 1) == std::vector<int>{0, 1});
  CHECK(l.group_members(GroupKind::EP, 1) == std::vector<int>{1, 3});
  CHECK(l.group_members(GroupKind::EP_ESP, 2) == std::vector<int>{0, 1, 2, 3});
  const ParallelLayout single(1, 1, 1);
  for (GroupKind k : {GroupKind::MP, GroupKind::EP, GroupKind::ESP, GroupKind::EP_ESP}) {
    CHECK(single.group_members(k, 0) == std::vector<int>{0});
  }
  CHECK_THROWS_AS(l.group_members(GroupKind::EP, 4), std::out_of_range);
}

TEST_CASE("groups partition the world for every layout up to 16 ranks") {
  for (int p = 1; p <= 16; ++p) {
    for (int n_esp = 1; n_esp <= p; ++n_esp) {
      if (p % n_esp != 0) continue;
      for (int n_mp = 1; n_mp <= p; ++n_mp) {
        if (p % n_mp != 0) continue;
        const auto l = ParallelLayout::for_world(p, n_mp, n_esp);
        for (GroupKind k : {GroupKind::MP, GroupKind::EP, GroupKind::ESP, GroupKind::EP_ESP}) {
          std::multiset<int> seen;
          for (const auto& g : l.groups(k)) {
            CHECK(static_cast<int>(g.size()) == l.group_size(k));
            CHECK(std::is_sorted(g.begin(), g.end()));
            seen.insert(g.begin(), g.end());
            for (std::size_t i = 0; i < g.size(); ++i) {
              CHECK(l.position(k, g[i]) == static_cast<int>(i));
              CHECK(l.group_members(k, g[i]) == g);
            }
          }
          CHECK(seen.size() == static_cast<std::size_t>(p));
          for (int r = 0; r < p; ++r) CHECK(seen.count(r) == 1);
        }
        // An EP group and an ESP group always meet in exactly one rank.
        for (const auto& ep : l.groups(GroupKind::EP)) {
          for (const auto& esp : l.groups(GroupKind::ESP)) {
            int shared = 0;
            for (int r : ep) shared += std::count(esp.begin(), esp.end(), r) ? 1 : 0;
            CHECK(shared == 1);
          }
        }
      }
    }
  }
}

TEST_CASE("placement classification") {
  ClusterSpec one{1, 8, 1e-10, 1e-9, 1e-5};
  CHECK(classify_placement(one, ParallelLayout(1, 4, 2)) == PlacementCase::SingleNode);
  CHECK(classify_placement(one, ParallelLayout(2, 1, 8)) == PlacementCase::SingleNode);

  ClusterSpec two{2, 2, 1e-10, 1e-9, 1e-5};
  CHECK(classify_placement(two, ParallelLayout(1, 2, 2)) == PlacementCase::EspIntraNode);
  CHECK(classify_placement(two, ParallelLayout(1, 1, 4)) == PlacementCase::Other);
  CHECK(classify_placement(two, ParallelLayout(1, 4, 1)) == PlacementCase::EspIntraNode);
  CHECK_THROWS_AS(classify_placement(two, ParallelLayout(1, 2, 1)), std::invalid_argument);

  // Strided EP groups can only sit inside a node when the whole world does.
  ClusterSpec four{4, 2, 1e-10, 1e-9, 1e-5};
  CHECK(classify_placement(four, ParallelLayout(1, 2, 4)) == PlacementCase::Other);
  CHECK(groups_within_nodes(four, ParallelLayout(2, 4, 2), GroupKind::MP));
  CHECK_FALSE(groups_within_nodes(four, ParallelLayout(4, 4, 2), GroupKind::MP));
}

TEST_CASE("schedule volumes") {
  MoEConfig c = moe(2, 1.0, 2, 8, 4);
  c.M = 8;
  const auto v = schedule_volumes(c, ParallelLayout(2, 2, 2));
  CHECK(v.blm == 128);
  CHECK(v.etm == 4 * 8 * 8);
  CHECK(v.dispatch() == 4 * 8 * 8 * 2);
}

TEST_CASE("config file parsing") {
  std::istringstream in(kConfigText);
  const RunConfig rc = parse_run_config(in);
  CHECK(rc.moe.E == 4);
  CHECK(rc.moe.f == doctest::Approx(1.0));
  CHECK(rc.layout == ParallelLayout(2, 2, 2));
  CHECK(rc.cluster.devices_per_node == 2);
  CHECK(rc.cluster.alpha_link == doctest::Approx(1e-5));
  CHECK(rc.seed == 11);

  std::istringstream missing("B = 2\n");
  CHECK_THROWS_AS(parse_run_config(missing), std::invalid_argument);
  std::istringstream junk(std::string(kConfigText) + "colour = red\n");
  CHECK_THROWS_AS(parse_run_config(junk), std::invalid_argument);
  std::istringstream dup("B = 1\nB = 2\n");
  CHECK_THROWS_WITH_AS(parse_key_values(dup), doctest::Contains("line 2"), std::invalid_argument);
  std::string bad_world = kConfigText;
  bad_world.replace(bad_world.find("num_nodes = 2"), 13, "num_nodes = 3");
  std::istringstream world(bad_world);
  CHECK_THROWS_AS(parse_run_config(world), std::invalid_argument);
  std::string bad_num = kConfigText;
  bad_num.replace(bad_num.find("L = 8"), 5, "L = x");
  std::istringstream num(bad_num);
  CHECK_THROWS_AS(parse_run_config(num), std::invalid_argument);
}
