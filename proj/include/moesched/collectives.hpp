// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "moesched/config.hpp"

namespace moesched {

/// One rank's tensor: flat row-major payload plus its logical shape.
struct Buffer {
  std::vector<double> data;
  std::vector<std::size_t> shape;

  Buffer() = default;
  explicit Buffer(std::vector<double> values);
  Buffer(std::vector<double> values, std::vector<std::size_t> dims);

  std::size_t size() const { return data.size(); }
  bool operator==(const Buffer&) const = default;
};

/// All ranks' buffers, indexed by rank.
struct WorldState {
  std::vector<Buffer> ranks;

  int world_size() const { return static_cast<int>(ranks.size()); }
  bool operator==(const WorldState&) const = default;
};

enum class Collective { AllGather, ReduceScatter, AllReduce, AlltoAll, Overlap, Split, Dump, Combine };

std::string_view to_string(Collective kind);
Collective parse_collective(std::string_view text);

struct TraceRecord {
  Collective kind = Collective::AlltoAll;
  GroupKind group = GroupKind::EP;
  int group_size = 1;
  std::int64_t elements_in = 0;     // buffer length per rank entering the collective
  std::int64_t elements_moved = 0;  // elements each rank receives from other ranks
  int phases = 1;
  bool overlapped = false;          // executed inside an SAA pipeline
  bool backward_allgather = false;  // a forward split owes an AllGather in backprop
  std::vector<std::int64_t> phase_elements{};
};

/// Append-only log of the collectives a schedule issued.
class CommTrace {
 public:
  void append(TraceRecord record);
  const std::vector<TraceRecord>& records() const { return records_; }
  std::size_t count(Collective kind, GroupKind group) const;
  /// Records that carry traffic (everything except split, dump and combine).
  std::vector<TraceRecord> communication() const;
  std::int64_t elements_in(Collective kind) const;

 private:
  std::vector<TraceRecord> records_;
};

// Every collective below is pure: it returns a new world and appends to the
// trace. A collective over a group of one rank is the identity and is not
// recorded.

/// Each member ends with the concatenation of all members' buffers in group order.
WorldState allgather(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace);

/// Member i keeps the elementwise sum over members of chunk i.
WorldState reduce_scatter(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace);

/// reduce_scatter followed by allgather; one record with both phases.
WorldState allreduce(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace);

/// Chunk j of member i lands at position i of member j.
WorldState alltoall(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace);

/// Member i keeps chunk i. No forward traffic.
WorldState split_local(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace);

/// Each buffer becomes `replication` back-to-back copies of itself.
WorldState dump_local(const WorldState& world, int replication, CommTrace& trace);

/// Views each buffer as `chunks` equal chunks and sums every run of
/// `replication` consecutive chunks into one.
WorldState combine_local(const WorldState& world, int chunks, int replication, CommTrace& trace);

/// Views each buffer as an (outer x inner) grid of equal chunks and transposes
/// it to (inner x outer). Local data movement only; never traced.
WorldState regroup_chunks(const WorldState& world, int outer, int inner);

/// EP&ESP dispatch: dump_local(N_ESP), then regroup the [copy][EP chunk] grid
/// to [EP chunk][copy] so chunk (j, q) is addressed to rank j*N_ESP + q, then
/// alltoall over EP_ESP. Rank d ends holding [source rank][its EP chunk].
WorldState fused_dispatch(const WorldState& world, const ParallelLayout& layout, CommTrace& trace);

/// EP&ESP combine: alltoall over EP_ESP, then combine_local summing the
/// N_ESP shard partials. Input layout is [destination rank][payload]; output
/// is [EP chunk][payload].
WorldState fused_combine(const WorldState& world, const ParallelLayout& layout, CommTrace& trace);

/// The unfused dispatch: allgather(ESP), regroup [ESP member][EP chunk] to
/// [EP chunk][ESP member], alltoall(EP). Produces the same world as
/// fused_dispatch.
WorldState esp_allgather_ep_alltoall(const WorldState& world, const ParallelLayout& layout, CommTrace& trace);

/// The unfused combine: allreduce(ESP), alltoall(EP), regroup
/// [EP chunk][ESP member] to [ESP member][EP chunk], split_local(ESP).
/// Produces the same world as fused_combine.
WorldState esp_allreduce_ep_alltoall_split(const WorldState& world, const ParallelLayout& layout, CommTrace& trace);

/// Simultaneous AlltoAll and AllGather. Runs the alltoall over `a2a_kind` in
/// G phases (phase p receives from the member p positions behind); the slice
/// received in phase p is forwarded to the `ag_kind` group in phase p + 1.
/// The result equals allgather(alltoall(world)).
WorldState saa(const WorldState& world, const ParallelLayout& layout, GroupKind a2a_kind, GroupKind ag_kind,
               CommTrace& trace);

}  // namespace moesched
