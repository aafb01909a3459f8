// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "moesched/collectives.hpp"
#include "moesched/config.hpp"
#include "moesched/dataplane.hpp"

namespace moesched {

enum class LinkClass { Intra, Inter };

std::string_view to_string(LinkClass link);

struct Transfer {
  int peer = 0;
  std::int64_t elements = 0;
  LinkClass link = LinkClass::Intra;
};

/// Transfers one rank issues together. They share one startup per channel.
struct TransferStep {
  std::vector<Transfer> sends;
};

/// Point-to-point lowering of a collective. `steps[r]` is rank r's ordered
/// step list; a rank's step i waits for its own step i - 1 and for everything
/// sent to it in step i - 1.
struct TransferPlan {
  int group_size = 1;
  std::vector<std::vector<TransferStep>> steps;

  bool empty() const;
  /// Elements rank r sends over the whole plan, self copies included.
  std::int64_t sent_by(int rank) const;
  std::int64_t received_by(int rank) const;
};

/// Lowers one collective over one group. `elements` is the per-rank buffer
/// the cost formulas name: the AlltoAll buffer, the gathered AllGather
/// output, the ReduceScatter input and the AllReduce buffer. Every algorithm
/// moves slices of elements / G, so `elements` must divide evenly.
///
/// AlltoAll is one step in which each member sends a slice to every member;
/// the slice a rank keeps is charged as an intra-node copy. AllGather is a
/// ring of G - 1 steps, ReduceScatter the reverse ring, and AllReduce a
/// ReduceScatter followed by an AllGather.
TransferPlan lower_collective(Collective kind, const std::vector<int>& group, std::int64_t elements,
                              const ClusterSpec& cluster);

/// The same collective running concurrently on several disjoint groups.
TransferPlan lower_collective(Collective kind, const std::vector<std::vector<int>>& groups, std::int64_t elements,
                              const ClusterSpec& cluster);

/// Every group of `group` in the layout.
TransferPlan lower_collective(Collective kind, const ParallelLayout& layout, GroupKind group, std::int64_t elements,
                              const ClusterSpec& cluster);

struct PlanTiming {
  double seconds = 0.0;
  std::vector<double> rank_finish;
  /// Channel with the larger busy time on the last rank to finish.
  LinkClass bottleneck = LinkClass::Intra;
};

/// Each rank has one intra and one inter channel. A step costs, per channel
/// it uses, alpha_link + beta * (elements on that channel); the step ends
/// when both channels are done.
PlanTiming simulate_plan_detailed(const TransferPlan& plan, const ClusterSpec& cluster);
double simulate_plan(const TransferPlan& plan, const ClusterSpec& cluster);

struct SaaTiming {
  double seconds = 0.0;
  double alltoall_seconds = 0.0;
  double allgather_seconds = 0.0;
  /// Pipeline stages: the first AlltoAll slice, G - 1 overlapped stages,
  /// then the last gather slice.
  std::vector<double> phases;
};

/// Phased AlltoAll with the AllGather of each received slice overlapped
/// against the next AlltoAll slice. Both collectives are split into
/// `phases` equal slices.
SaaTiming time_saa_detailed(const TransferPlan& plan_a2a, const TransferPlan& plan_ag, int phases,
                            const ClusterSpec& cluster);
double time_saa(const TransferPlan& plan_a2a, const TransferPlan& plan_ag, int phases, const ClusterSpec& cluster);

/// Simulated time of a collective on every group of `group`. `elements` is
/// rounded up to a multiple of the group size first.
double collective_time(Collective kind, const ParallelLayout& layout, GroupKind group, std::int64_t elements,
                       const ClusterSpec& cluster);

/// time_saa for an AlltoAll over `a2a_group` and an AllGather over
/// `ag_group`, with as many phases as the AlltoAll group has members.
SaaTiming saa_time(const ParallelLayout& layout, GroupKind a2a_group, std::int64_t a2a_elements, GroupKind ag_group,
                   std::int64_t ag_elements, const ClusterSpec& cluster);

struct TimedTerm {
  std::string name;
  double seconds = 0.0;
};

struct TimingReport {
  ScheduleKind schedule = ScheduleKind::Baseline;
  std::vector<TimedTerm> terms;
  double total = 0.0;
  std::vector<double> saa_phases;
};

/// Communication time of one schedule at the cost-formula volumes:
///   baseline  AG_ESP(BLM*N_ESP) + A2A_EP(y) + AR_ESP(y) + A2A_EP(y)
///   S1        2 * A2A_EP_ESP(y / N_MP) + AG_MP(BLM)
///   S2        A2A_EP_ESP(y / N_MP) + SAA(A2A_EP_ESP(y / N_MP), AG_MP(ETM))
/// with y = ETM * N_ESP.
TimingReport time_schedule(ScheduleKind kind, const ScheduleVolumes& volumes, const ParallelLayout& layout,
                           const ClusterSpec& cluster);
TimingReport time_schedule(ScheduleKind kind, const MoEConfig& cfg, const ParallelLayout& layout,
                           const ClusterSpec& cluster);

struct InequalityRow {
  PlacementCase placement = PlacementCase::SingleNode;
  std::string name;
  std::int64_t x = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  bool pass = false;
};

struct InequalityReport {
  PlacementCase placement = PlacementCase::SingleNode;
  std::vector<InequalityRow> rows;
  /// Set when the S2 check was skipped because MP groups cross nodes.
  std::string note;

  bool all_pass() const;
  std::size_t violations() const;
};

/// Relative slack allowed on every comparison.
inline constexpr double kInequalityTolerance = 1e-12;

/// Checks, for each x, with x standing for both the dispatch volume y and
/// the baseline gather volume BLM * N_ESP:
///   dispatch_le_gather  A2A_EP_ESP(x) <= AG_ESP(x) + A2A_EP(x)
///   dispatch_eq_single_node  A2A_EP_ESP(x) == A2A_EP(x)               (single node only)
///   combine_le_scatter  A2A_EP_ESP(x) <= RS_ESP(x) + A2A_EP(x)
///   fused_gain  AG_ESP(x) <= t_B - t_D
///   s2_gain t_D2 <= t_B                              (N_MP >= 2, MP groups inside nodes)
/// Throws std::invalid_argument for placements outside the first three cases.
InequalityReport verify_inequalities(const ClusterSpec& cluster, const ParallelLayout& layout,
                                     const std::vector<std::int64_t>& sizes);

/// Case-3-style check over explicit EP, ESP and fused groups, for placements
/// the standard rank mapping cannot produce. Emits dispatch_le_gather and combine_le_scatter rows.
InequalityReport verify_group_inequalities(const ClusterSpec& cluster, const std::vector<std::vector<int>>& ep,
                                           const std::vector<std::vector<int>>& esp,
                                           const std::vector<std::vector<int>>& fused,
                                           const std::vector<std::int64_t>& sizes);

/// 2^lo, 2^(lo+1), ..., 2^hi.
std::vector<std::int64_t> geometric_sizes(int lo_exp, int hi_exp);

}  // namespace moesched
