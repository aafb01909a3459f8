// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <set>

#include "moesched/dataplane.hpp"

using namespace moesched;

namespace {

MoEConfig make_cfg(int B, int L, int M, int H, int E, int k, double f) { return MoEConfig{B, L, M, H, E, k, f}; }

// Loop-level forward pass: softmax, repeated argmax for top-k, per-segment
// slot counters, unsharded FFN, weighted sum.
Matrix naive_forward(const MoEConfig& cfg, const ExpertWeights& w, const Matrix& x, int segments,
                     std::set<std::pair<std::int64_t, int>>* dropped = nullptr) {
  const std::int64_t cap = segment_capacity(derive_capacity(cfg), segments);
  const int n = static_cast<int>(x.rows());
  const int seg_len = n / segments;
  std::vector<std::vector<std::int64_t>> used(segments, std::vector<std::int64_t>(cfg.E, 0));
  Matrix out = Matrix::Zero(n, cfg.M);
  for (int t = 0; t < n; ++t) {
    std::vector<double> logit(cfg.E, 0.0);
    for (int e = 0; e < cfg.E; ++e)
      for (int m = 0; m < cfg.M; ++m) logit[e] += x(t, m) * w.gate(m, e);
    double top = logit[0];
    for (double v : logit) top = std::max(top, v);
    double z = 0.0;
    for (double& v : logit) z += (v = std::exp(v - top));
    std::vector<bool> taken(cfg.E, false);
    for (int c = 0; c < cfg.k; ++c) {
      int best = -1;
      for (int e = 0; e < cfg.E; ++e) {
        if (!taken[e] && (best < 0 || logit[e] > logit[best])) best = e;
      }
      taken[best] = true;
      if (used[t / seg_len][best]++ >= cap) {
        if (dropped) dropped->insert({t, best});
        continue;
      }
      const double weight = logit[best] / z;
      for (int m = 0; m < cfg.M; ++m) {
        double acc = 0.0;
        for (int h = 0; h < cfg.H; ++h) {
          double hidden = 0.0;
          for (int i = 0; i < cfg.M; ++i) hidden += x(t, i) * w.w1[best](i, h);
          acc += std::max(hidden, 0.0) * w.w2[best](h, m);
        }
        out(t, m) += weight * acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("gate ties go to the lower expert") {
  Matrix tokens = Matrix::Random(5, 3);
  Matrix gate_w = Matrix::Zero(3, 2);
  const GateOutput g = gate(tokens, gate_w, 1, 5);
  for (const auto& r : g.routes) {
    REQUIRE(r.size() == 1);
    CHECK(r[0].expert == 0);
    CHECK(r[0].weight == doctest::Approx(0.5));
  }
  CHECK(g.dropped.empty());
}

TEST_CASE("k = E routes every token to every expert") {
  Matrix tokens = Matrix::Random(4, 3);
  Matrix gate_w = Matrix::Random(3, 2);
  const GateOutput g = gate(tokens, gate_w, 2, 4);
  for (std::size_t t = 0; t < g.routes.size(); ++t) {
    REQUIRE(g.routes[t].size() == 2);
    std::set<int> experts{g.routes[t][0].expert, g.routes[t][1].expert};
    CHECK(experts == std::set<int>{0, 1});
    for (const auto& r : g.routes[t]) {
      CHECK(r.slot == static_cast<std::int64_t>(t));
      CHECK(g.dispatch.row(r.expert * 4 + r.slot) == tokens.row(static_cast<Eigen::Index>(t)));
    }
  }
}

TEST_CASE("capacity one keeps one token per expert") {
  const auto w = ExpertWeights::random(3, 2, 2, 17);
  Matrix tokens = Matrix::Random(4, 3);
  const GateOutput g = gate(tokens, w.gate, 1, 1);
  std::vector<int> per_expert(2, 0);
  std::size_t kept = 0;
  for (const auto& r : g.routes) {
    for (const auto& route : r) ++per_expert[route.expert];
    kept += r.size();
  }
  CHECK(per_expert[0] <= 1);
  CHECK(per_expert[1] <= 1);
  CHECK(kept + g.dropped.size() == 4);

  // The oracle drops the same (token, expert) pairs.
  MoEConfig cfg = make_cfg(1, 4, 3, 2, 2, 1, 0.5);
  std::set<std::pair<std::int64_t, int>> naive_drop;
  naive_forward(cfg, w, tokens, 1, &naive_drop);
  CHECK(std::set<std::pair<std::int64_t, int>>(g.dropped.begin(), g.dropped.end()) == naive_drop);
}

TEST_CASE("gate invariants on random batches") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto w = ExpertWeights::random(4, 2, 5, seed);
    Matrix tokens = Matrix::Random(12, 4);
    for (int segments : {1, 2, 3}) {
      const int k = 1 + static_cast<int>(seed % 3);
      const std::int64_t cap = 1 + static_cast<std::int64_t>(seed % 4);
      const GateOutput g = gate(tokens, w.gate, k, cap, segments);
      std::map<std::pair<int, int>, int> fill;
      for (std::size_t t = 0; t < g.routes.size(); ++t) {
        std::set<int> chosen;
        for (const auto& r : g.routes[t]) {
          chosen.insert(r.expert);
          CHECK(r.slot / cap == static_cast<std::int64_t>(t) / (12 / segments));
          ++fill[{r.expert, static_cast<int>(r.slot / cap)}];
        }
        for (const auto& [tok, e] : g.dropped) {
          if (tok == static_cast<std::int64_t>(t)) chosen.insert(e);
        }
        CHECK(static_cast<int>(chosen.size()) == k);
      }
      for (const auto& [key, n] : fill) CHECK(n <= cap);
    }
  }
  CHECK_THROWS_AS(gate(Matrix::Random(4, 3), Matrix::Random(3, 2), 3, 1), std::invalid_argument);
  CHECK_THROWS_AS(gate(Matrix::Random(5, 3), Matrix::Random(3, 2), 1, 1, 2), std::invalid_argument);
}

TEST_CASE("expert shards") {
  const auto w = ExpertWeights::random(2, 2, 1, 3);
  Matrix rows = Matrix::Random(5, 2);
  const Matrix full = expert_shard_forward(rows, w.w1[0], w.w2[0]);
  CHECK(expert_shard_forward(rows, w.w1_shard(0, 0, 1), w.w2_shard(0, 0, 1)) == full);
  Matrix sum = Matrix::Zero(5, 2);
  for (int p = 0; p < 2; ++p) sum += expert_shard_forward(rows, w.w1_shard(0, p, 2), w.w2_shard(0, p, 2));
  CHECK(relative_error(sum, full) <= 1e-9);
  CHECK(expert_shard_forward(Matrix::Zero(3, 2), w.w1[0], w.w2[0]).isZero());

  const auto big = ExpertWeights::random(4, 8, 2, 5);
  Matrix w1(4, 8);
  Matrix w2(8, 4);
  for (int p = 0; p < 4; ++p) {
    w1.middleCols(p * 2, 2) = big.w1_shard(1, p, 4);
    w2.middleRows(p * 2, 2) = big.w2_shard(1, p, 4);
  }
  CHECK(w1 == big.w1[1]);
  CHECK(w2 == big.w2[1]);
  CHECK_THROWS_AS(big.w1_shard(0, 0, 3), std::invalid_argument);
  std::uint64_t mults = 0;
  expert_shard_forward(Matrix::Random(3, 4), big.w1_shard(0, 0, 2), big.w2_shard(0, 0, 2), &mults);
  CHECK(mults == 3 * 4 * 4 + 3 * 4 * 4);
  CHECK_THROWS_AS(expert_shard_forward(Matrix::Random(3, 4), big.w1[0], big.w1[0]), std::invalid_argument);
}

TEST_CASE("reference forward against the loop oracle") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MoEConfig cfg = make_cfg(2, 6, 4, 6, 3, 1 + static_cast<int>(seed % 3), 0.4 + 0.2 * (seed % 5));
    const auto w = ExpertWeights::random(cfg.M, cfg.H, cfg.E, seed);
    Matrix x = Matrix::Random(12, 4);
    for (int segments : {1, 2, 4}) {
      CHECK(relative_error(reference_forward(cfg, w, x, segments), naive_forward(cfg, w, x, segments)) <= 1e-12);
    }
  }
}

TEST_CASE("reference forward degenerate cases") {
  const MoEConfig one = make_cfg(1, 4, 3, 5, 1, 1, 10.0);
  const auto w = ExpertWeights::random(3, 5, 1, 9);
  Matrix x = Matrix::Random(4, 3);
  const Matrix ffn = (x * w.w1[0]).cwiseMax(0.0) * w.w2[0];
  CHECK(relative_error(reference_forward(one, w, x), ffn) <= 1e-15);

  const MoEConfig cfg = make_cfg(2, 4, 3, 4, 3, 2, 1.0);
  const auto w3 = ExpertWeights::random(3, 4, 3, 2);
  CHECK(reference_forward(cfg, w3, Matrix::Zero(8, 3)).isZero());
}

TEST_CASE("reference forward golden output") {
  const MoEConfig cfg = make_cfg(1, 8, 4, 4, 2, 1, 2.0);
  const auto w = ExpertWeights::random(4, 4, 2, 2024);
  const auto inputs = random_inputs(cfg, ParallelLayout(1, 1, 1), 2025);
  const Matrix out = reference_forward(cfg, w, inputs[0]);
  // Frozen from the first run of the loop oracle above.
  const double golden[8][4] = {
#include "golden_reference.inc"
  };
  for (int t = 0; t < 8; ++t)
    for (int m = 0; m < 4; ++m) CHECK(out(t, m) == doctest::Approx(golden[t][m]).epsilon(1e-12));
  CHECK(relative_error(out, naive_forward(cfg, w, inputs[0], 1)) <= 1e-12);
}

TEST_CASE("two-node layout runs all three schedules") {
  const MoEConfig cfg = make_cfg(2, 8, 8, 8, 4, 2, 1.0);
  const ParallelLayout layout(2, 2, 2);
  const ClusterSpec cluster{2, 2, 1e-10, 1e-9, 1e-5};
  const auto w = ExpertWeights::random(8, 8, 4, 1);
  const auto inputs = random_inputs(cfg, layout, 2);

  std::set<std::pair<std::int64_t, int>> oracle_drop;
  naive_forward(cfg, w, inputs[0], 2, &oracle_drop);
  REQUIRE_FALSE(oracle_drop.empty());

  std::map<ScheduleKind, ScheduleResult> results;
  for (ScheduleKind kind : {ScheduleKind::Baseline, ScheduleKind::S1, ScheduleKind::S2}) {
    results[kind] = run_schedule(kind, cfg, layout, cluster, w, inputs);
    const auto& r = results[kind];
    for (int rank = 0; rank < 4; ++rank) {
      CHECK(relative_error(r.outputs[rank], naive_forward(cfg, w, inputs[rank], 2)) <= 1e-9);
    }
    const auto groups = layout.groups(GroupKind::MP);
    REQUIRE(r.dropped.size() == groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
      std::set<std::pair<std::int64_t, int>> want;
      naive_forward(cfg, w, inputs[groups[g].front()], 2, &want);
      CHECK(std::set<std::pair<std::int64_t, int>>(r.dropped[g].begin(), r.dropped[g].end()) == want);
    }
  }
  const auto& base = results[ScheduleKind::Baseline].trace;
  CHECK(base.count(Collective::AllGather, GroupKind::ESP) == 1);
  CHECK(base.count(Collective::AlltoAll, GroupKind::EP) == 2);
  CHECK(base.count(Collective::AllReduce, GroupKind::ESP) == 1);
  CHECK(base.communication().size() == 4);
  for (ScheduleKind kind : {ScheduleKind::S1, ScheduleKind::S2}) {
    const auto& t = results[kind].trace;
    CHECK(t.count(Collective::AlltoAll, GroupKind::EP_ESP) == 2);
    CHECK(t.count(Collective::AllGather, GroupKind::MP) == 1);
    CHECK(t.communication().size() == 3);
    CHECK(results[kind].ffn_multiplies * 2 == results[ScheduleKind::Baseline].ffn_multiplies);
  }
  CHECK(results[ScheduleKind::S1].trace.elements_in(Collective::AlltoAll) * 2 ==
        base.elements_in(Collective::AlltoAll));
  int overlapped = 0;
  for (const auto& rec : results[ScheduleKind::S2].trace.records()) overlapped += rec.overlapped ? 1 : 0;
  CHECK(overlapped == 2);
}

TEST_CASE("classic expert parallelism") {
  const MoEConfig cfg = make_cfg(1, 8, 4, 4, 4, 1, 1.5);
  const ParallelLayout layout(1, 4, 1);
  const auto w = ExpertWeights::random(4, 4, 4, 6);
  const auto inputs = random_inputs(cfg, layout, 7);
  const auto r = run_schedule(ScheduleKind::Baseline, cfg, layout, w, inputs);
  CHECK(r.trace.communication().size() == 2);
  CHECK(r.trace.count(Collective::AlltoAll, GroupKind::EP) == 2);
  const auto s2 = run_schedule(ScheduleKind::S2, cfg, layout, w, inputs);
  for (int rank = 0; rank < 4; ++rank)
    CHECK(relative_error(s2.outputs[rank], reference_forward(cfg, w, inputs[rank])) <= 1e-9);
}

TEST_CASE("schedule preconditions") {
  const MoEConfig cfg = make_cfg(1, 8, 4, 4, 4, 1, 1.0);
  const auto w = ExpertWeights::random(4, 4, 4, 6);
  const ParallelLayout layout(2, 2, 2);
  auto inputs = random_inputs(cfg, layout, 1);
  inputs[1](0, 0) += 1.0;
  CHECK_THROWS_AS(run_schedule(ScheduleKind::S1, cfg, layout, w, inputs), std::invalid_argument);
  CHECK_THROWS_AS(
      run_schedule(ScheduleKind::S1, cfg, ParallelLayout(1, 3, 1), w, random_inputs(cfg, ParallelLayout(1, 3, 1), 1)),
      std::invalid_argument);
  const MoEConfig odd_h = make_cfg(1, 8, 4, 3, 4, 1, 1.0);
  const auto w3 = ExpertWeights::random(4, 3, 4, 6);
  CHECK_THROWS_AS(run_schedule(ScheduleKind::Baseline, odd_h, layout, w3, random_inputs(odd_h, layout, 1)),
                  std::invalid_argument);
  const ClusterSpec wrong{1, 2, 1e-10, 1e-9, 1e-5};
  CHECK_THROWS_AS(run_schedule(ScheduleKind::Baseline, cfg, layout, wrong, w, random_inputs(cfg, layout, 1)),
                  std::invalid_argument);
  CHECK(parse_schedule_kind("s2") == ScheduleKind::S2);
  CHECK_THROWS_AS(parse_schedule_kind("s3"), std::invalid_argument);
}
