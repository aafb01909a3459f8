// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include "moesched/collectives.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace moesched {

namespace {

/// Keeps the trailing dims when they still tile `total`, else flattens.
std::vector<std::size_t> reshape_leading(const std::vector<std::size_t>& shape, std::size_t total) {
  if (shape.size() >= 2) {
    const std::size_t trailing = std::accumulate(shape.begin() + 1, shape.end(), std::size_t{1}, std::multiplies<>());
    if (trailing > 0 && total % trailing == 0) {
      std::vector<std::size_t> out = shape;
      out[0] = total / trailing;
      return out;
    }
  }
  return {total};
}

std::size_t chunk_length(const Buffer& buf, int parts, std::string_view op) {
  if (parts < 1 || buf.size() % static_cast<std::size_t>(parts) != 0) {
    throw std::invalid_argument(
        fmt::format("{}: buffer of {} elements is not divisible into {} chunks", op, buf.size(), parts));
  }
  return buf.size() / static_cast<std::size_t>(parts);
}

void check_world(const WorldState& world, const ParallelLayout& layout, std::string_view op) {
  if (world.world_size() != layout.world_size()) {
    throw std::invalid_argument(
        fmt::format("{}: world has {} ranks, layout expects {}", op, world.world_size(), layout.world_size()));
  }
}

void check_uniform(const WorldState& world, const std::vector<int>& members, std::string_view op) {
  const Buffer& first = world.ranks[members.front()];
  for (int r : members) {
    const Buffer& b = world.ranks[r];
    if (b.size() != first.size() || b.shape != first.shape) {
      throw std::invalid_argument(fmt::format("{}: shape mismatch between ranks {} and {}", op, members.front(), r));
    }
  }
}

template <typename Fn>
void for_each_group(const ParallelLayout& layout, GroupKind kind, Fn&& fn) {
  for (const auto& members : layout.groups(kind)) fn(members);
}

std::int64_t as_i64(std::size_t n) { return static_cast<std::int64_t>(n); }

WorldState allgather_impl(const WorldState& world, const ParallelLayout& layout, GroupKind kind) {
  WorldState out = world;
  for_each_group(layout, kind, [&](const std::vector<int>& members) {
    check_uniform(world, members, "allgather");
    std::vector<double> gathered;
    gathered.reserve(world.ranks[members.front()].size() * members.size());
    for (int r : members) {
      const auto& d = world.ranks[r].data;
      gathered.insert(gathered.end(), d.begin(), d.end());
    }
    const auto shape = reshape_leading(world.ranks[members.front()].shape, gathered.size());
    for (int r : members) out.ranks[r] = Buffer(gathered, shape);
  });
  return out;
}

WorldState reduce_scatter_impl(const WorldState& world, const ParallelLayout& layout, GroupKind kind) {
  WorldState out = world;
  for_each_group(layout, kind, [&](const std::vector<int>& members) {
    check_uniform(world, members, "reduce_scatter");
    const int g = static_cast<int>(members.size());
    const std::size_t chunk = chunk_length(world.ranks[members.front()], g, "reduce_scatter");
    for (int i = 0; i < g; ++i) {
      const std::size_t offset = chunk * static_cast<std::size_t>(i);
      std::vector<double> acc(world.ranks[members[0]].data.begin() + offset,
                              world.ranks[members[0]].data.begin() + offset + chunk);
      for (int j = 1; j < g; ++j) {
        const auto& src = world.ranks[members[j]].data;
        for (std::size_t e = 0; e < chunk; ++e) acc[e] += src[offset + e];
      }
      out.ranks[members[i]] = Buffer(std::move(acc), reshape_leading(world.ranks[members[i]].shape, chunk));
    }
  });
  return out;
}

}  // namespace

Buffer::Buffer(std::vector<double> values) : data(std::move(values)), shape{data.size()} {}

Buffer::Buffer(std::vector<double> values, std::vector<std::size_t> dims)
    : data(std::move(values)), shape(std::move(dims)) {
  const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  if (shape.empty() || n != data.size()) {
    throw std::invalid_argument(fmt::format("Buffer: shape covers {} elements, payload has {}", n, data.size()));
  }
}

std::string_view to_string(Collective kind) {
  switch (kind) {
    case Collective::AllGather:
      return "AG";
    case Collective::ReduceScatter:
      return "RS";
    case Collective::AllReduce:
      return "AR";
    case Collective::AlltoAll:
      return "A2A";
    case Collective::Overlap:
      return "OVERLAP";
    case Collective::Split:
      return "SPLIT";
    case Collective::Dump:
      return "DUMP";
    case Collective::Combine:
      return "COMBINE";
  }
  return "?";
}

Collective parse_collective(std::string_view text) {
  for (Collective c : {Collective::AllGather, Collective::ReduceScatter, Collective::AllReduce, Collective::AlltoAll,
                       Collective::Overlap, Collective::Split, Collective::Dump, Collective::Combine}) {
    if (text == to_string(c)) return c;
  }
  throw std::invalid_argument(fmt::format("unknown collective '{}'", text));
}

void CommTrace::append(TraceRecord record) {
  if (record.elements_in < 0 || record.elements_moved < 0) {
    throw std::invalid_argument("CommTrace: element counts must be non-negative");
  }
  records_.push_back(std::move(record));
}

std::size_t CommTrace::count(Collective kind, GroupKind group) const {
  return static_cast<std::size_t>(std::count_if(
      records_.begin(), records_.end(), [&](const TraceRecord& r) { return r.kind == kind && r.group == group; }));
}

std::vector<TraceRecord> CommTrace::communication() const {
  std::vector<TraceRecord> out;
  std::copy_if(records_.begin(), records_.end(), std::back_inserter(out), [](const TraceRecord& r) {
    return r.kind != Collective::Split && r.kind != Collective::Dump && r.kind != Collective::Combine;
  });
  return out;
}

std::int64_t CommTrace::elements_in(Collective kind) const {
  std::int64_t total = 0;
  for (const auto& r : records_) {
    if (r.kind == kind) total += r.elements_in;
  }
  return total;
}

WorldState allgather(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace) {
  check_world(world, layout, "allgather");
  const int g = layout.group_size(kind);
  if (g == 1) return world;
  WorldState out = allgather_impl(world, layout, kind);
  const auto x = as_i64(world.ranks.front().size());
  trace.append({.kind = Collective::AllGather,
                .group = kind,
                .group_size = g,
                .elements_in = x,
                .elements_moved = (g - 1) * x,
                .phases = g - 1});
  return out;
}

WorldState reduce_scatter(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace) {
  check_world(world, layout, "reduce_scatter");
  const int g = layout.group_size(kind);
  if (g == 1) return world;
  WorldState out = reduce_scatter_impl(world, layout, kind);
  const auto x = as_i64(world.ranks.front().size());
  trace.append({.kind = Collective::ReduceScatter,
                .group = kind,
                .group_size = g,
                .elements_in = x,
                .elements_moved = (g - 1) * (x / g),
                .phases = g - 1});
  return out;
}

WorldState allreduce(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace) {
  check_world(world, layout, "allreduce");
  const int g = layout.group_size(kind);
  if (g == 1) return world;
  WorldState scattered = reduce_scatter_impl(world, layout, kind);
  WorldState out = allgather_impl(scattered, layout, kind);
  for (int r = 0; r < out.world_size(); ++r) out.ranks[r].shape = world.ranks[r].shape;
  const auto x = as_i64(world.ranks.front().size());
  const std::int64_t half = (g - 1) * (x / g);
  trace.append({.kind = Collective::AllReduce,
                .group = kind,
                .group_size = g,
                .elements_in = x,
                .elements_moved = 2 * half,
                .phases = 2,
                .phase_elements = {half, half}});
  return out;
}

WorldState alltoall(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace) {
  check_world(world, layout, "alltoall");
  const int g = layout.group_size(kind);
  if (g == 1) return world;
  WorldState out = world;
  for_each_group(layout, kind, [&](const std::vector<int>& members) {
    check_uniform(world, members, "alltoall");
    const std::size_t chunk = chunk_length(world.ranks[members.front()], g, "alltoall");
    for (int j = 0; j < g; ++j) {
      auto& dst = out.ranks[members[j]].data;
      for (int i = 0; i < g; ++i) {
        const auto& src = world.ranks[members[i]].data;
        std::copy_n(src.begin() + chunk * j, chunk, dst.begin() + chunk * i);
      }
    }
  });
  const auto x = as_i64(world.ranks.front().size());
  trace.append({.kind = Collective::AlltoAll,
                .group = kind,
                .group_size = g,
                .elements_in = x,
                .elements_moved = (g - 1) * (x / g),
                .phases = 1});
  return out;
}

WorldState split_local(const WorldState& world, const ParallelLayout& layout, GroupKind kind, CommTrace& trace) {
  check_world(world, layout, "split_local");
  const int g = layout.group_size(kind);
  if (g == 1) return world;
  WorldState out = world;
  for (int r = 0; r < world.world_size(); ++r) {
    const Buffer& b = world.ranks[r];
    const std::size_t chunk = chunk_length(b, g, "split_local");
    const std::size_t offset = chunk * static_cast<std::size_t>(layout.position(kind, r));
    out.ranks[r] = Buffer(std::vector<double>(b.data.begin() + offset, b.data.begin() + offset + chunk),
                          reshape_leading(b.shape, chunk));
  }
  trace.append({.kind = Collective::Split,
                .group = kind,
                .group_size = g,
                .elements_in = as_i64(world.ranks.front().size()),
                .elements_moved = 0,
                .phases = 0,
                .backward_allgather = true});
  return out;
}

WorldState dump_local(const WorldState& world, int replication, CommTrace& trace) {
  if (replication < 1) throw std::invalid_argument("dump_local: replication must be >= 1");
  if (replication == 1) return world;
  WorldState out = world;
  for (auto& b : out.ranks) {
    std::vector<double> copies;
    copies.reserve(b.size() * static_cast<std::size_t>(replication));
    for (int c = 0; c < replication; ++c) copies.insert(copies.end(), b.data.begin(), b.data.end());
    b = Buffer(std::move(copies), reshape_leading(b.shape, b.size() * static_cast<std::size_t>(replication)));
  }
  trace.append({.kind = Collective::Dump,
                .group = GroupKind::ESP,
                .group_size = replication,
                .elements_in = world.ranks.empty() ? 0 : as_i64(world.ranks.front().size()),
                .elements_moved = 0,
                .phases = 0});
  return out;
}

WorldState combine_local(const WorldState& world, int chunks, int replication, CommTrace& trace) {
  if (replication < 1 || chunks < 1 || chunks % replication != 0) {
    throw std::invalid_argument(
        fmt::format("combine_local: {} chunks cannot be summed in runs of {}", chunks, replication));
  }
  if (replication == 1) return world;
  WorldState out = world;
  for (auto& b : out.ranks) {
    const std::size_t chunk = chunk_length(b, chunks, "combine_local");
    const int runs = chunks / replication;
    std::vector<double> summed(chunk * static_cast<std::size_t>(runs));
    for (int run = 0; run < runs; ++run) {
      double* dst = summed.data() + chunk * run;
      const double* src = b.data.data() + chunk * static_cast<std::size_t>(run) * replication;
      std::copy_n(src, chunk, dst);
      for (int q = 1; q < replication; ++q) {
        for (std::size_t e = 0; e < chunk; ++e) dst[e] += src[chunk * q + e];
      }
    }
    const auto total = summed.size();
    b = Buffer(std::move(summed), reshape_leading(b.shape, total));
  }
  trace.append({.kind = Collective::Combine,
                .group = GroupKind::ESP,
                .group_size = replication,
                .elements_in = world.ranks.empty() ? 0 : as_i64(world.ranks.front().size()),
                .elements_moved = 0,
                .phases = 0});
  return out;
}

WorldState regroup_chunks(const WorldState& world, int outer, int inner) {
  if (outer == 1 || inner == 1) return world;
  WorldState out = world;
  for (auto& b : out.ranks) {
    const std::size_t chunk = chunk_length(b, outer * inner, "regroup_chunks");
    std::vector<double> moved(b.size());
    for (int o = 0; o < outer; ++o) {
      for (int i = 0; i < inner; ++i) {
        std::copy_n(b.data.begin() + chunk * (static_cast<std::size_t>(o) * inner + i), chunk,
                    moved.begin() + chunk * (static_cast<std::size_t>(i) * outer + o));
      }
    }
    b.data = std::move(moved);
  }
  return out;
}

WorldState fused_dispatch(const WorldState& world, const ParallelLayout& layout, CommTrace& trace) {
  check_world(world, layout, "fused_dispatch");
  for (const auto& b : world.ranks) chunk_length(b, layout.n_ep(), "fused_dispatch");
  WorldState dumped = dump_local(world, layout.n_esp(), trace);
  dumped = regroup_chunks(dumped, layout.n_esp(), layout.n_ep());
  return alltoall(dumped, layout, GroupKind::EP_ESP, trace);
}

WorldState fused_combine(const WorldState& world, const ParallelLayout& layout, CommTrace& trace) {
  check_world(world, layout, "fused_combine");
  WorldState exchanged = alltoall(world, layout, GroupKind::EP_ESP, trace);
  return combine_local(exchanged, layout.world_size(), layout.n_esp(), trace);
}

WorldState esp_allgather_ep_alltoall(const WorldState& world, const ParallelLayout& layout, CommTrace& trace) {
  check_world(world, layout, "esp_allgather_ep_alltoall");
  for (const auto& b : world.ranks) chunk_length(b, layout.n_ep(), "esp_allgather_ep_alltoall");
  WorldState gathered = allgather(world, layout, GroupKind::ESP, trace);
  gathered = regroup_chunks(gathered, layout.n_esp(), layout.n_ep());
  return alltoall(gathered, layout, GroupKind::EP, trace);
}

WorldState esp_allreduce_ep_alltoall_split(const WorldState& world, const ParallelLayout& layout, CommTrace& trace) {
  check_world(world, layout, "esp_allreduce_ep_alltoall_split");
  WorldState reduced = allreduce(world, layout, GroupKind::ESP, trace);
  WorldState exchanged = alltoall(reduced, layout, GroupKind::EP, trace);
  exchanged = regroup_chunks(exchanged, layout.n_ep(), layout.n_esp());
  return split_local(exchanged, layout, GroupKind::ESP, trace);
}

WorldState saa(const WorldState& world, const ParallelLayout& layout, GroupKind a2a_kind, GroupKind ag_kind,
               CommTrace& trace) {
  check_world(world, layout, "saa");
  const int p = world.world_size();
  const int g = layout.group_size(a2a_kind);
  const int gm = layout.group_size(ag_kind);
  if (p == 0) return world;
  for (int r = 0; r < p; ++r) {
    check_uniform(world, layout.group_members(a2a_kind, r), "saa");
    check_uniform(world, layout.group_members(ag_kind, r), "saa");
  }
  const std::size_t len = world.ranks.front().size();
  for (const auto& b : world.ranks) {
    if (b.size() != len) throw std::invalid_argument("saa: all ranks must hold equally sized buffers");
  }
  const std::size_t chunk = chunk_length(world.ranks.front(), g, "saa");

  // Rank r's output is [ag member m][a2a result of m]; a2a slot s of member m
  // lives at offset m*len + s*chunk.
  WorldState out;
  out.ranks.resize(static_cast<std::size_t>(p));
  for (int r = 0; r < p; ++r) out.ranks[r].data.assign(len * static_cast<std::size_t>(gm), 0.0);

  struct Slice {
    int receiver;
    int slot;
  };
  auto forward = [&](const std::vector<Slice>& slices) {
    for (const auto& s : slices) {
      const int m = layout.position(ag_kind, s.receiver);
      const std::size_t src_off = len * static_cast<std::size_t>(m) + chunk * s.slot;
      for (int peer : layout.group_members(ag_kind, s.receiver)) {
        if (peer == s.receiver) continue;
        std::copy_n(out.ranks[s.receiver].data.begin() + src_off, chunk, out.ranks[peer].data.begin() + src_off);
      }
    }
  };

  std::vector<std::int64_t> a2a_phase(static_cast<std::size_t>(g), 0);
  std::vector<std::int64_t> ag_phase(static_cast<std::size_t>(g), 0);
  std::vector<Slice> pending;
  for (int phase = 0; phase < g; ++phase) {
    // The AllGather of the previous phase's slices runs alongside this phase's AlltoAll.
    forward(pending);
    if (phase > 0) ag_phase[phase - 1] = pending.empty() ? 0 : (gm - 1) * as_i64(chunk);
    pending.clear();
    for (int r = 0; r < p; ++r) {
      const auto members = layout.group_members(a2a_kind, r);
      const int i = layout.position(a2a_kind, r);
      const int src_pos = (i - phase + g) % g;
      const int src = members[src_pos];
      const int m = layout.position(ag_kind, r);
      std::copy_n(world.ranks[src].data.begin() + chunk * i, chunk,
                  out.ranks[r].data.begin() + len * static_cast<std::size_t>(m) + chunk * src_pos);
      pending.push_back({r, src_pos});
    }
    a2a_phase[phase] = phase == 0 ? 0 : as_i64(chunk);
  }
  forward(pending);
  ag_phase[g - 1] = (gm - 1) * as_i64(chunk);

  for (int r = 0; r < p; ++r) {
    out.ranks[r].shape = reshape_leading(world.ranks[r].shape, out.ranks[r].data.size());
  }

  const auto x = as_i64(len);
  if (g > 1) {
    trace.append({.kind = Collective::AlltoAll,
                  .group = a2a_kind,
                  .group_size = g,
                  .elements_in = x,
                  .elements_moved = (g - 1) * (x / g),
                  .phases = g,
                  .overlapped = true,
                  .phase_elements = a2a_phase});
  }
  if (gm > 1) {
    trace.append({.kind = Collective::AllGather,
                  .group = ag_kind,
                  .group_size = gm,
                  .elements_in = x,
                  .elements_moved = (gm - 1) * x,
                  .phases = g,
                  .overlapped = true,
                  .phase_elements = ag_phase});
  }
  return out;
}

}  // namespace moesched
