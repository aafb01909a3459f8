// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace moesched {

/// Shape of one MoE layer as seen by a single rank.
///
/// B and L describe the rank-local batch; M and H are the token embedding and
/// expert hidden widths; each token is routed to k of E experts, and the
/// capacity factor f bounds how many tokens one expert accepts.
struct MoEConfig {
  int B = 1;
  int L = 1;
  int M = 1;
  int H = 1;
  int E = 1;
  int k = 1;
  double f = 1.0;

  void validate() const;
  std::int64_t tokens() const { return std::int64_t{B} * L; }
};

/// Tokens each expert accepts from one rank: ceil(k * f * B * L / E).
std::int64_t derive_capacity(const MoEConfig& cfg);

/// Per-segment capacity when the token stream is cut into `segments` equal
/// parts that are gated independently.
std::int64_t segment_capacity(std::int64_t capacity, int segments);

/// Homogeneous two-level cluster. Betas are seconds per element, so the
/// faster intra-node fabric has the smaller value.
struct ClusterSpec {
  int num_nodes = 1;
  int devices_per_node = 1;
  double beta_intra = 1e-10;
  double beta_inter = 1e-9;
  double alpha_link = 1e-5;

  void validate() const;
  int world_size() const { return num_nodes * devices_per_node; }
  /// Ranks fill nodes contiguously.
  int node_of(int rank) const { return rank / devices_per_node; }
  bool same_node(int a, int b) const { return node_of(a) == node_of(b); }
};

enum class GroupKind { MP, EP, ESP, EP_ESP };

std::string_view to_string(GroupKind kind);
GroupKind parse_group_kind(std::string_view text);

/// MP, EP and ESP overlay on the same P = N_EP * N_ESP ranks.
///
/// ESP groups are contiguous blocks of N_ESP ranks, EP groups take the ranks
/// with equal offset inside their ESP block, and MP groups are contiguous
/// blocks of N_MP ranks.
class ParallelLayout {
 public:
  ParallelLayout() = default;
  ParallelLayout(int n_mp, int n_ep, int n_esp);

  /// Builds the layout for a world of `world` ranks; N_EP = world / N_ESP.
  static ParallelLayout for_world(int world, int n_mp, int n_esp);

  int n_mp() const { return n_mp_; }
  int n_ep() const { return n_ep_; }
  int n_esp() const { return n_esp_; }
  int world_size() const { return n_ep_ * n_esp_; }

  int group_size(GroupKind kind) const;
  int group_count(GroupKind kind) const { return world_size() / group_size(kind); }
  /// Index of the group of `kind` that holds `rank`.
  int group_index(GroupKind kind, int rank) const;
  /// Position of `rank` inside its group of `kind`.
  int position(GroupKind kind, int rank) const;
  /// Sorted membership of `rank`'s group of `kind`.
  std::vector<int> group_members(GroupKind kind, int rank) const;
  /// Every group of `kind`, in group-index order.
  std::vector<std::vector<int>> groups(GroupKind kind) const;

  bool operator==(const ParallelLayout&) const = default;

 private:
  void check_rank(int rank) const;

  int n_mp_ = 1;
  int n_ep_ = 1;
  int n_esp_ = 1;
};

enum class PlacementCase { SingleNode, EspIntraNode, EpIntraNode, Other };

std::string_view to_string(PlacementCase placement);

/// True when every group of `kind` sits inside one node.
bool groups_within_nodes(const ClusterSpec& cluster, const ParallelLayout& layout, GroupKind kind);

PlacementCase classify_placement(const ClusterSpec& cluster, const ParallelLayout& layout);

/// Collective volumes, in elements, that the schedule cost formulas use.
struct ScheduleVolumes {
  std::int64_t blm = 0;  // B*L*M, one rank's layer input
  std::int64_t etm = 0;  // E*T*M, one rank's dispatch tensor
  int n_mp = 1;
  int n_esp = 1;

  /// E*T*M*N_ESP: the dispatch tensor after ESP replication.
  std::int64_t dispatch() const { return etm * n_esp; }
};

ScheduleVolumes schedule_volumes(const MoEConfig& cfg, const ParallelLayout& layout);

/// Everything a config file describes.
struct RunConfig {
  MoEConfig moe;
  ClusterSpec cluster;
  ParallelLayout layout;
  std::uint64_t seed = 0;
};

/// Reads `key = value` lines. Blank lines and `#` comments are skipped.
/// Duplicate keys and lines without `=` are errors that cite the line number.
std::map<std::string, std::string> parse_key_values(std::istream& in);

RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace moesched
