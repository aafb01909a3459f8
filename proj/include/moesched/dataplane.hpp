// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

#include "moesched/collectives.hpp"
#include "moesched/config.hpp"

namespace moesched {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Route {
  int expert = 0;
  std::int64_t slot = 0;
  double weight = 0.0;  // the token's softmax score for `expert`
};

/// Routing of one batch of tokens.
///
/// Tokens are cut into `segments` contiguous equal parts; segment m owns slots
/// [m * segment_capacity, (m + 1) * segment_capacity) of every expert and
/// fills them in ascending token order. With one segment this is the plain
/// capacity-T gate.
struct GateOutput {
  int num_experts = 0;
  int segments = 1;
  std::int64_t segment_capacity = 0;
  /// (E * slots_per_expert) x M, expert-major, zero rows for unused slots.
  Matrix dispatch;
  /// Kept routes per token, in the token's top-k order.
  std::vector<std::vector<Route>> routes;
  /// (token, expert) selections that found the expert full.
  std::vector<std::pair<std::int64_t, int>> dropped;

  std::int64_t slots_per_expert() const { return segment_capacity * segments; }
};

/// Softmax over X * gate_weights, top-k per token (ties to the lower expert
/// index), then capacity-limited slot assignment.
GateOutput gate(const Matrix& tokens, const Matrix& gate_weights, int k, std::int64_t segment_capacity,
                int segments = 1);

/// Full expert weights plus the replicated gate. W1 is M x H and W2 is H x M
/// per expert; the gate is M x E.
struct ExpertWeights {
  std::vector<Matrix> w1;
  std::vector<Matrix> w2;
  Matrix gate;

  int num_experts() const { return static_cast<int>(w1.size()); }

  /// Seeded weights with entries uniform in [-scale, scale].
  static ExpertWeights random(int M, int H, int E, std::uint64_t seed, double scale = 0.5);

  /// Columns [p*H/n, (p+1)*H/n) of W1 for expert e.
  Matrix w1_shard(int expert, int shard, int shards) const;
  /// Rows [p*H/n, (p+1)*H/n) of W2 for expert e.
  Matrix w2_shard(int expert, int shard, int shards) const;
};

/// relu(rows * w1_shard) * w2_shard. Adds the multiply count to `multiplies`
/// when given.
Matrix expert_shard_forward(const Matrix& rows, const Matrix& w1_shard, const Matrix& w2_shard,
                            std::uint64_t* multiplies = nullptr);

/// Weighted sum of expert outputs back into token order. `expert_out` has the
/// same row layout as `gate.dispatch`.
Matrix combine_tokens(const GateOutput& gate, const Matrix& expert_out);

/// Single-device forward pass: gate, unsharded expert FFNs, weighted combine.
/// `capacity_segments` is the MP degree the distributed runs use; it fixes
/// which tokens drop so every schedule can be compared to this oracle.
Matrix reference_forward(const MoEConfig& cfg, const ExpertWeights& weights, const Matrix& input,
                         int capacity_segments = 1);

enum class ScheduleKind { Baseline, S1, S2 };

std::string_view to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view text);

struct ScheduleResult {
  /// (B*L) x M output on every rank.
  std::vector<Matrix> outputs;
  CommTrace trace;
  /// Multiply count of all expert FFN work across ranks.
  std::uint64_t ffn_multiplies = 0;
  /// Dropped (global token, expert) pairs per MP group, sorted.
  std::vector<std::vector<std::pair<std::int64_t, int>>> dropped;
};

/// Runs one MoE layer over simulated ranks. `inputs[r]` is rank r's
/// (B*L) x M input and must be identical within each MP group.
ScheduleResult run_schedule(ScheduleKind kind, const MoEConfig& cfg, const ParallelLayout& layout,
                            const ExpertWeights& weights, const std::vector<Matrix>& inputs);

/// As above, after checking the cluster spans the layout's ranks.
ScheduleResult run_schedule(ScheduleKind kind, const MoEConfig& cfg, const ParallelLayout& layout,
                            const ClusterSpec& cluster, const ExpertWeights& weights,
                            const std::vector<Matrix>& inputs);

/// One seeded input per MP group, replicated across the group's ranks.
std::vector<Matrix> random_inputs(const MoEConfig& cfg, const ParallelLayout& layout, std::uint64_t seed);

/// max|a - b| / max|b|; 0 when both are identically zero.
double relative_error(const Matrix& actual, const Matrix& expected);

}  // namespace moesched
