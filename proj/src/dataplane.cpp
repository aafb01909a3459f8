// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include "moesched/dataplane.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "moesched/random.hpp"

namespace moesched {

namespace {

Buffer to_buffer(const Matrix& m) {
  return Buffer(std::vector<double>(m.data(), m.data() + m.size()),
                {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
}

Matrix to_matrix(const Buffer& b, Eigen::Index cols) {
  if (cols <= 0 || static_cast<Eigen::Index>(b.size()) % cols != 0) {
    throw std::invalid_argument("buffer does not hold whole rows");
  }
  Matrix m(static_cast<Eigen::Index>(b.size()) / cols, cols);
  std::copy(b.data.begin(), b.data.end(), m.data());
  return m;
}

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -scale, scale);
  return m;
}

struct Dims {
  int P;
  int n_mp;
  int n_esp;
  int experts_per_block;
  Eigen::Index M;
  std::int64_t capacity;
  std::int64_t seg_capacity;
  std::int64_t tokens;
};

Dims check_schedule_inputs(const MoEConfig& cfg, const ParallelLayout& layout, const ExpertWeights& weights,
                           const std::vector<Matrix>& inputs) {
  cfg.validate();
  const int P = layout.world_size();
  if (cfg.E % layout.n_ep() != 0) {
    throw std::invalid_argument(fmt::format("E={} experts cannot be spread over N_EP={}", cfg.E, layout.n_ep()));
  }
  if (cfg.H % layout.n_esp() != 0) {
    throw std::invalid_argument(fmt::format("H={} cannot be sharded over N_ESP={}", cfg.H, layout.n_esp()));
  }
  if (cfg.tokens() % layout.n_mp() != 0) {
    throw std::invalid_argument(fmt::format("B*L={} tokens cannot be split over N_MP={}", cfg.tokens(), layout.n_mp()));
  }
  if (weights.num_experts() != cfg.E || weights.gate.rows() != cfg.M || weights.gate.cols() != cfg.E) {
    throw std::invalid_argument("expert weights do not match the MoE config");
  }
  for (int e = 0; e < cfg.E; ++e) {
    if (weights.w1[e].rows() != cfg.M || weights.w1[e].cols() != cfg.H || weights.w2[e].rows() != cfg.H ||
        weights.w2[e].cols() != cfg.M) {
      throw std::invalid_argument(fmt::format("expert {} weights have the wrong shape", e));
    }
  }
  if (static_cast<int>(inputs.size()) != P) {
    throw std::invalid_argument(fmt::format("expected {} rank inputs, got {}", P, inputs.size()));
  }
  for (int r = 0; r < P; ++r) {
    if (inputs[r].rows() != cfg.tokens() || inputs[r].cols() != cfg.M) {
      throw std::invalid_argument(fmt::format("rank {} input is not (B*L) x M", r));
    }
    const int lead = layout.group_members(GroupKind::MP, r).front();
    if (inputs[r] != inputs[lead]) {
      throw std::invalid_argument(fmt::format("rank {} input differs from its MP group (rank {})", r, lead));
    }
  }
  const std::int64_t capacity = derive_capacity(cfg);
  return Dims{P,
              layout.n_mp(),
              layout.n_esp(),
              cfg.E / layout.n_ep(),
              cfg.M,
              capacity,
              segment_capacity(capacity, layout.n_mp()),
              cfg.tokens()};
}

/// Every rank holds [source rank][local expert][slot][M] rows; replace them
/// with this rank's shard partials.
WorldState compute_expert_shards(const WorldState& world, const ParallelLayout& layout, const ExpertWeights& weights,
                                 const Dims& dims, std::int64_t slots, std::uint64_t& multiplies) {
  WorldState out = world;
  const std::int64_t block_rows = slots;
  for (int r = 0; r < dims.P; ++r) {
    const Matrix held = to_matrix(world.ranks[r], dims.M);
    if (held.rows() != static_cast<Eigen::Index>(dims.P) * dims.experts_per_block * block_rows) {
      throw std::logic_error("dispatched buffer has an unexpected row count");
    }
    Matrix result(held.rows(), held.cols());
    const int ep_block = layout.position(GroupKind::EP, r);
    const int shard = layout.position(GroupKind::ESP, r);
    for (int l = 0; l < dims.experts_per_block; ++l) {
      const int expert = ep_block * dims.experts_per_block + l;
      Matrix rows(static_cast<Eigen::Index>(dims.P) * block_rows, dims.M);
      for (int src = 0; src < dims.P; ++src) {
        rows.middleRows(src * block_rows, block_rows) =
            held.middleRows((static_cast<Eigen::Index>(src) * dims.experts_per_block + l) * block_rows, block_rows);
      }
      const Matrix partial = expert_shard_forward(rows, weights.w1_shard(expert, shard, dims.n_esp),
                                                  weights.w2_shard(expert, shard, dims.n_esp), &multiplies);
      for (int src = 0; src < dims.P; ++src) {
        result.middleRows((static_cast<Eigen::Index>(src) * dims.experts_per_block + l) * block_rows, block_rows) =
            partial.middleRows(src * block_rows, block_rows);
      }
    }
    out.ranks[r] = to_buffer(result);
  }
  return out;
}

std::vector<std::pair<std::int64_t, int>> sorted(std::vector<std::pair<std::int64_t, int>> v) {
  std::sort(v.begin(), v.end());
  return v;
}

ScheduleResult run_baseline(const MoEConfig& cfg, const ParallelLayout& layout, const ExpertWeights& weights,
                            const std::vector<Matrix>& inputs, const Dims& dims) {
  ScheduleResult result;
  std::vector<GateOutput> gates;
  WorldState world;
  for (int r = 0; r < dims.P; ++r) {
    gates.push_back(gate(inputs[r], weights.gate, cfg.k, dims.seg_capacity, dims.n_mp));
    world.ranks.push_back(to_buffer(gates.back().dispatch));
  }
  const std::int64_t slots = gates.front().slots_per_expert();

  world = esp_allgather_ep_alltoall(world, layout, result.trace);
  world = compute_expert_shards(world, layout, weights, dims, slots, result.ffn_multiplies);
  world = esp_allreduce_ep_alltoall_split(world, layout, result.trace);

  for (int r = 0; r < dims.P; ++r)
    result.outputs.push_back(combine_tokens(gates[r], to_matrix(world.ranks[r], dims.M)));
  for (const auto& members : layout.groups(GroupKind::MP))
    result.dropped.push_back(sorted(gates[members.front()].dropped));
  return result;
}

ScheduleResult run_s1(const MoEConfig& cfg, const ParallelLayout& layout, const ExpertWeights& weights,
                      const std::vector<Matrix>& inputs, const Dims& dims) {
  ScheduleResult result;
  WorldState world;
  for (const auto& x : inputs) world.ranks.push_back(to_buffer(x));
  world = split_local(world, layout, GroupKind::MP, result.trace);

  std::vector<GateOutput> gates;
  WorldState dispatch;
  for (int r = 0; r < dims.P; ++r) {
    gates.push_back(gate(to_matrix(world.ranks[r], dims.M), weights.gate, cfg.k, dims.seg_capacity, 1));
    dispatch.ranks.push_back(to_buffer(gates.back().dispatch));
  }

  dispatch = fused_dispatch(dispatch, layout, result.trace);
  dispatch = compute_expert_shards(dispatch, layout, weights, dims, dims.seg_capacity, result.ffn_multiplies);
  dispatch = fused_combine(dispatch, layout, result.trace);

  WorldState partial_out;
  for (int r = 0; r < dims.P; ++r) {
    partial_out.ranks.push_back(to_buffer(combine_tokens(gates[r], to_matrix(dispatch.ranks[r], dims.M))));
  }
  partial_out = allgather(partial_out, layout, GroupKind::MP, result.trace);
  for (const auto& b : partial_out.ranks) result.outputs.push_back(to_matrix(b, dims.M));

  const std::int64_t shard_tokens = dims.tokens / dims.n_mp;
  for (const auto& members : layout.groups(GroupKind::MP)) {
    std::vector<std::pair<std::int64_t, int>> dropped;
    for (int r : members) {
      const std::int64_t base = layout.position(GroupKind::MP, r) * shard_tokens;
      for (const auto& [token, expert] : gates[r].dropped) dropped.emplace_back(base + token, expert);
    }
    result.dropped.push_back(sorted(std::move(dropped)));
  }
  return result;
}

ScheduleResult run_s2(const MoEConfig& cfg, const ParallelLayout& layout, const ExpertWeights& weights,
                      const std::vector<Matrix>& inputs, const Dims& dims) {
  ScheduleResult result;
  std::vector<GateOutput> gates;
  WorldState world;
  for (int r = 0; r < dims.P; ++r) {
    gates.push_back(gate(inputs[r], weights.gate, cfg.k, dims.seg_capacity, dims.n_mp));
    world.ranks.push_back(to_buffer(gates.back().dispatch));
  }
  // [expert][MP slot block] -> [MP slot block][expert], then keep our block.
  world = regroup_chunks(world, cfg.E, dims.n_mp);
  world = split_local(world, layout, GroupKind::MP, result.trace);

  world = fused_dispatch(world, layout, result.trace);
  world = compute_expert_shards(world, layout, weights, dims, dims.seg_capacity, result.ffn_multiplies);
  // The combine AlltoAll runs under SAA with the MP AllGather, so the shard
  // partials are summed after the gather: [MP block][rank][payload] -> [MP block][expert].
  world = saa(world, layout, GroupKind::EP_ESP, GroupKind::MP, result.trace);
  world = combine_local(world, dims.n_mp * dims.P, dims.n_esp, result.trace);
  world = regroup_chunks(world, dims.n_mp, cfg.E);

  for (int r = 0; r < dims.P; ++r)
    result.outputs.push_back(combine_tokens(gates[r], to_matrix(world.ranks[r], dims.M)));
  for (const auto& members : layout.groups(GroupKind::MP))
    result.dropped.push_back(sorted(gates[members.front()].dropped));
  return result;
}

}  // namespace

GateOutput gate(const Matrix& tokens, const Matrix& gate_weights, int k, std::int64_t segment_capacity, int segments) {
  const int E = static_cast<int>(gate_weights.cols());
  if (tokens.rows() < 1) throw std::invalid_argument("gate: need at least one token");
  if (tokens.cols() != gate_weights.rows()) throw std::invalid_argument("gate: token width does not match gate");
  if (k < 1 || k > E) throw std::invalid_argument(fmt::format("gate: k={} must be in [1, E={}]", k, E));
  if (segment_capacity < 1) throw std::invalid_argument("gate: capacity must be >= 1");
  if (segments < 1 || tokens.rows() % segments != 0) {
    throw std::invalid_argument(fmt::format("gate: {} tokens cannot form {} equal segments", tokens.rows(), segments));
  }

  GateOutput out;
  out.num_experts = E;
  out.segments = segments;
  out.segment_capacity = segment_capacity;
  const std::int64_t per_expert = out.slots_per_expert();
  out.dispatch = Matrix::Zero(static_cast<Eigen::Index>(E * per_expert), tokens.cols());
  out.routes.resize(static_cast<std::size_t>(tokens.rows()));

  const Matrix logits = tokens * gate_weights;
  const Eigen::Index segment_len = tokens.rows() / segments;
  std::vector<std::int64_t> fill(static_cast<std::size_t>(E) * segments, 0);
  std::vector<int> order(static_cast<std::size_t>(E));
  std::vector<double> score(static_cast<std::size_t>(E));

  for (Eigen::Index t = 0; t < tokens.rows(); ++t) {
    const double top = logits.row(t).maxCoeff();
    double total = 0.0;
    for (int e = 0; e < E; ++e) total += score[e] = std::exp(logits(t, e) - top);
    for (double& s : score) s /= total;

    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] > score[b]; });

    const int segment = static_cast<int>(t / segment_len);
    for (int choice = 0; choice < k; ++choice) {
      const int e = order[choice];
      auto& used = fill[static_cast<std::size_t>(segment) * E + e];
      if (used >= segment_capacity) {
        out.dropped.emplace_back(t, e);
        continue;
      }
      const std::int64_t slot = segment * segment_capacity + used++;
      out.dispatch.row(static_cast<Eigen::Index>(e * per_expert + slot)) = tokens.row(t);
      out.routes[t].push_back({e, slot, score[e]});
    }
  }
  return out;
}

ExpertWeights ExpertWeights::random(int M, int H, int E, std::uint64_t seed, double scale) {
  if (M < 1 || H < 1 || E < 1) throw std::invalid_argument("ExpertWeights: dimensions must be >= 1");
  Rng rng(seed);
  ExpertWeights w;
  w.gate = random_matrix(rng, M, E, scale);
  for (int e = 0; e < E; ++e) {
    w.w1.push_back(random_matrix(rng, M, H, scale));
    w.w2.push_back(random_matrix(rng, H, M, scale));
  }
  return w;
}

Matrix ExpertWeights::w1_shard(int expert, int shard, int shards) const {
  const Matrix& full = w1.at(static_cast<std::size_t>(expert));
  if (shards < 1 || shard < 0 || shard >= shards || full.cols() % shards != 0) {
    throw std::invalid_argument("w1_shard: H is not divisible into the requested shards");
  }
  const Eigen::Index width = full.cols() / shards;
  return full.middleCols(shard * width, width);
}

Matrix ExpertWeights::w2_shard(int expert, int shard, int shards) const {
  const Matrix& full = w2.at(static_cast<std::size_t>(expert));
  if (shards < 1 || shard < 0 || shard >= shards || full.rows() % shards != 0) {
    throw std::invalid_argument("w2_shard: H is not divisible into the requested shards");
  }
  const Eigen::Index height = full.rows() / shards;
  return full.middleRows(shard * height, height);
}

Matrix expert_shard_forward(const Matrix& rows, const Matrix& w1_shard, const Matrix& w2_shard,
                            std::uint64_t* multiplies) {
  if (rows.cols() != w1_shard.rows() || w1_shard.cols() != w2_shard.rows() || w2_shard.cols() != rows.cols()) {
    throw std::invalid_argument(fmt::format("expert_shard_forward: shapes {}x{} * {}x{} * {}x{} do not chain",
                                            rows.rows(), rows.cols(), w1_shard.rows(), w1_shard.cols(), w2_shard.rows(),
                                            w2_shard.cols()));
  }
  if (multiplies != nullptr) {
    *multiplies += static_cast<std::uint64_t>(rows.rows()) * rows.cols() * w1_shard.cols() +
                   static_cast<std::uint64_t>(rows.rows()) * w2_shard.rows() * w2_shard.cols();
  }
  const Matrix hidden = (rows * w1_shard).cwiseMax(0.0);
  return hidden * w2_shard;
}

Matrix combine_tokens(const GateOutput& gate, const Matrix& expert_out) {
  const std::int64_t per_expert = gate.slots_per_expert();
  if (expert_out.rows() != gate.num_experts * per_expert) {
    throw std::invalid_argument("combine_tokens: expert output rows do not match the gate layout");
  }
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(gate.routes.size()), expert_out.cols());
  for (std::size_t t = 0; t < gate.routes.size(); ++t) {
    for (const Route& route : gate.routes[t]) {
      out.row(static_cast<Eigen::Index>(t)) +=
          route.weight * expert_out.row(static_cast<Eigen::Index>(route.expert * per_expert + route.slot));
    }
  }
  return out;
}

Matrix reference_forward(const MoEConfig& cfg, const ExpertWeights& weights, const Matrix& input,
                         int capacity_segments) {
  cfg.validate();
  if (input.rows() != cfg.tokens() || input.cols() != cfg.M) {
    throw std::invalid_argument("reference_forward: input must be (B*L) x M");
  }
  const GateOutput routed =
      gate(input, weights.gate, cfg.k, segment_capacity(derive_capacity(cfg), capacity_segments), capacity_segments);
  const Eigen::Index per_expert = static_cast<Eigen::Index>(routed.slots_per_expert());
  Matrix expert_out(routed.dispatch.rows(), routed.dispatch.cols());
  for (int e = 0; e < cfg.E; ++e) {
    const Matrix rows = routed.dispatch.middleRows(e * per_expert, per_expert);
    expert_out.middleRows(e * per_expert, per_expert) = (rows * weights.w1[e]).cwiseMax(0.0) * weights.w2[e];
  }
  return combine_tokens(routed, expert_out);
}

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Baseline:
      return "baseline";
    case ScheduleKind::S1:
      return "s1";
    case ScheduleKind::S2:
      return "s2";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(std::string_view text) {
  if (text == "baseline") return ScheduleKind::Baseline;
  if (text == "s1" || text == "S1") return ScheduleKind::S1;
  if (text == "s2" || text == "S2") return ScheduleKind::S2;
  throw std::invalid_argument(fmt::format("unknown schedule '{}'", text));
}

ScheduleResult run_schedule(ScheduleKind kind, const MoEConfig& cfg, const ParallelLayout& layout,
                            const ExpertWeights& weights, const std::vector<Matrix>& inputs) {
  const Dims dims = check_schedule_inputs(cfg, layout, weights, inputs);
  switch (kind) {
    case ScheduleKind::Baseline:
      return run_baseline(cfg, layout, weights, inputs, dims);
    case ScheduleKind::S1:
      return run_s1(cfg, layout, weights, inputs, dims);
    case ScheduleKind::S2:
      return run_s2(cfg, layout, weights, inputs, dims);
  }
  throw std::invalid_argument("unknown schedule");
}

ScheduleResult run_schedule(ScheduleKind kind, const MoEConfig& cfg, const ParallelLayout& layout,
                            const ClusterSpec& cluster, const ExpertWeights& weights,
                            const std::vector<Matrix>& inputs) {
  cluster.validate();
  if (cluster.world_size() != layout.world_size()) {
    throw std::invalid_argument(
        fmt::format("cluster has {} ranks but the layout spans {}", cluster.world_size(), layout.world_size()));
  }
  return run_schedule(kind, cfg, layout, weights, inputs);
}

std::vector<Matrix> random_inputs(const MoEConfig& cfg, const ParallelLayout& layout, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix> inputs(static_cast<std::size_t>(layout.world_size()));
  for (const auto& members : layout.groups(GroupKind::MP)) {
    const Matrix x = random_matrix(rng, cfg.tokens(), cfg.M, 1.0);
    for (int r : members) inputs[r] = x;
  }
  return inputs;
}

double relative_error(const Matrix& actual, const Matrix& expected) {
  if (actual.rows() != expected.rows() || actual.cols() != expected.cols()) {
    return std::numeric_limits<double>::infinity();
  }
  const double diff = (actual - expected).cwiseAbs().maxCoeff();
  if (diff == 0.0) return 0.0;
  const double scale = expected.cwiseAbs().maxCoeff();
  return scale > 0.0 ? diff / scale : std::numeric_limits<double>::infinity();
}

}  // namespace moesched
