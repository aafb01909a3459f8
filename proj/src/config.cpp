// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include "moesched/config.hpp"

#include <fmt/format.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

namespace moesched {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_number(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw std::invalid_argument(fmt::format("config: missing key '{}'", key));
  const std::string& text = it->second;
  T value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw std::invalid_argument(fmt::format("config: key '{}' has non-numeric value '{}'", key, text));
  }
  return value;
}

}  // namespace

void MoEConfig::validate() const {
  if (B < 1 || L < 1 || M < 1 || H < 1 || E < 1 || k < 1) {
    throw std::invalid_argument("MoEConfig: B, L, M, H, E and k must all be >= 1");
  }
  if (k > E) throw std::invalid_argument(fmt::format("MoEConfig: k={} exceeds E={}", k, E));
  if (!(f > 0.0) || !std::isfinite(f)) throw std::invalid_argument("MoEConfig: f must be a finite value > 0");
}

std::int64_t derive_capacity(const MoEConfig& cfg) {
  cfg.validate();
  const double exact =
      static_cast<double>(cfg.k) * cfg.f * static_cast<double>(cfg.tokens()) / static_cast<double>(cfg.E);
  // k*f*B*L/E is often an integer whose binary image sits a few ulps above it
  // (f = 1.2 has no exact representation); snap those before taking the ceiling.
  const double nearest = std::round(exact);
  const double capacity = std::abs(exact - nearest) <= 1e-9 * std::max(1.0, exact) ? nearest : std::ceil(exact);
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(capacity));
}

std::int64_t segment_capacity(std::int64_t capacity, int segments) {
  if (segments < 1) throw std::invalid_argument("segment_capacity: segments must be >= 1");
  return (capacity + segments - 1) / segments;
}

void ClusterSpec::validate() const {
  if (num_nodes < 1 || devices_per_node < 1) {
    throw std::invalid_argument("ClusterSpec: num_nodes and devices_per_node must be >= 1");
  }
  if (!(beta_intra > 0.0) || !(beta_inter > 0.0)) throw std::invalid_argument("ClusterSpec: betas must be > 0");
  if (!(beta_intra < beta_inter)) {
    throw std::invalid_argument("ClusterSpec: beta_intra must be smaller than beta_inter (seconds per element)");
  }
  if (!(alpha_link >= 0.0)) throw std::invalid_argument("ClusterSpec: alpha_link must be >= 0");
}

std::string_view to_string(GroupKind kind) {
  switch (kind) {
    case GroupKind::MP:
      return "MP";
    case GroupKind::EP:
      return "EP";
    case GroupKind::ESP:
      return "ESP";
    case GroupKind::EP_ESP:
      return "EP_ESP";
  }
  return "?";
}

GroupKind parse_group_kind(std::string_view text) {
  if (text == "MP") return GroupKind::MP;
  if (text == "EP") return GroupKind::EP;
  if (text == "ESP") return GroupKind::ESP;
  if (text == "EP_ESP" || text == "EP&ESP") return GroupKind::EP_ESP;
  throw std::invalid_argument(fmt::format("unknown group kind '{}'", text));
}

ParallelLayout::ParallelLayout(int n_mp, int n_ep, int n_esp) : n_mp_(n_mp), n_ep_(n_ep), n_esp_(n_esp) {
  if (n_mp < 1 || n_ep < 1 || n_esp < 1) throw std::invalid_argument("ParallelLayout: group sizes must be >= 1");
  if (world_size() % n_mp != 0) {
    throw std::invalid_argument(fmt::format("ParallelLayout: N_MP={} does not divide P={}", n_mp, world_size()));
  }
}

ParallelLayout ParallelLayout::for_world(int world, int n_mp, int n_esp) {
  if (world < 1 || n_esp < 1 || world % n_esp != 0) {
    throw std::invalid_argument(fmt::format("ParallelLayout: N_ESP={} does not divide P={}", n_esp, world));
  }
  return ParallelLayout(n_mp, world / n_esp, n_esp);
}

int ParallelLayout::group_size(GroupKind kind) const {
  switch (kind) {
    case GroupKind::MP:
      return n_mp_;
    case GroupKind::EP:
      return n_ep_;
    case GroupKind::ESP:
      return n_esp_;
    case GroupKind::EP_ESP:
      return n_ep_ * n_esp_;
  }
  throw std::invalid_argument("unknown group kind");
}

void ParallelLayout::check_rank(int rank) const {
  if (rank < 0 || rank >= world_size()) {
    throw std::out_of_range(fmt::format("rank {} outside [0, {})", rank, world_size()));
  }
}

int ParallelLayout::group_index(GroupKind kind, int rank) const {
  check_rank(rank);
  switch (kind) {
    case GroupKind::MP:
      return rank / n_mp_;
    case GroupKind::EP:
      return rank % n_esp_;
    case GroupKind::ESP:
      return rank / n_esp_;
    case GroupKind::EP_ESP:
      return 0;
  }
  throw std::invalid_argument("unknown group kind");
}

int ParallelLayout::position(GroupKind kind, int rank) const {
  check_rank(rank);
  switch (kind) {
    case GroupKind::MP:
      return rank % n_mp_;
    case GroupKind::EP:
      return rank / n_esp_;
    case GroupKind::ESP:
      return rank % n_esp_;
    case GroupKind::EP_ESP:
      return rank;
  }
  throw std::invalid_argument("unknown group kind");
}

std::vector<int> ParallelLayout::group_members(GroupKind kind, int rank) const {
  check_rank(rank);
  const int size = group_size(kind);
  std::vector<int> members(static_cast<std::size_t>(size));
  switch (kind) {
    case GroupKind::MP: {
      const int base = (rank / n_mp_) * n_mp_;
      for (int i = 0; i < size; ++i) members[i] = base + i;
      break;
    }
    case GroupKind::EP: {
      const int offset = rank % n_esp_;
      for (int i = 0; i < size; ++i) members[i] = offset + i * n_esp_;
      break;
    }
    case GroupKind::ESP: {
      const int base = (rank / n_esp_) * n_esp_;
      for (int i = 0; i < size; ++i) members[i] = base + i;
      break;
    }
    case GroupKind::EP_ESP:
      for (int i = 0; i < size; ++i) members[i] = i;
      break;
  }
  return members;
}

std::vector<std::vector<int>> ParallelLayout::groups(GroupKind kind) const {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(group_count(kind)));
  for (int rank = 0; rank < world_size(); ++rank) {
    auto& g = out[group_index(kind, rank)];
    if (g.empty()) g = group_members(kind, rank);
  }
  return out;
}

std::string_view to_string(PlacementCase placement) {
  switch (placement) {
    case PlacementCase::SingleNode:
      return "SingleNode";
    case PlacementCase::EspIntraNode:
      return "EspIntraNode";
    case PlacementCase::EpIntraNode:
      return "EpIntraNode";
    case PlacementCase::Other:
      return "Other";
  }
  return "?";
}

bool groups_within_nodes(const ClusterSpec& cluster, const ParallelLayout& layout, GroupKind kind) {
  for (const auto& group : layout.groups(kind)) {
    for (int rank : group) {
      if (!cluster.same_node(rank, group.front())) return false;
    }
  }
  return true;
}

PlacementCase classify_placement(const ClusterSpec& cluster, const ParallelLayout& layout) {
  if (cluster.world_size() != layout.world_size()) {
    throw std::invalid_argument(
        fmt::format("cluster has {} ranks but layout spans {}", cluster.world_size(), layout.world_size()));
  }
  if (cluster.num_nodes == 1) return PlacementCase::SingleNode;
  if (groups_within_nodes(cluster, layout, GroupKind::ESP)) return PlacementCase::EspIntraNode;
  // Singleton EP groups leave no EP AlltoAll to keep on-node, so they do not
  // qualify on their own.
  if (layout.n_ep() >= 2 && groups_within_nodes(cluster, layout, GroupKind::EP)) {
    return PlacementCase::EpIntraNode;
  }
  return PlacementCase::Other;
}

ScheduleVolumes schedule_volumes(const MoEConfig& cfg, const ParallelLayout& layout) {
  const std::int64_t capacity = derive_capacity(cfg);
  ScheduleVolumes v;
  v.blm = cfg.tokens() * cfg.M;
  v.etm = std::int64_t{cfg.E} * capacity * cfg.M;
  v.n_mp = layout.n_mp();
  v.n_esp = layout.n_esp();
  return v;
}

std::map<std::string, std::string> parse_key_values(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument(fmt::format("line {}: expected 'key = value'", line_no));
    }
    std::string key = trim(std::string_view(content).substr(0, eq));
    std::string value = trim(std::string_view(content).substr(eq + 1));
    if (key.empty()) throw std::invalid_argument(fmt::format("line {}: empty key", line_no));
    if (!kv.emplace(key, value).second) {
      throw std::invalid_argument(fmt::format("line {}: duplicate key '{}'", line_no, key));
    }
  }
  return kv;
}

RunConfig parse_run_config(std::istream& in) {
  const auto kv = parse_key_values(in);
  static const std::set<std::string> known = {"B",          "L",          "M",          "H",
                                              "E",          "k",          "f",          "N_MP",
                                              "N_EP",       "N_ESP",      "num_nodes",  "devices_per_node",
                                              "beta_intra", "beta_inter", "alpha_link", "seed"};
  for (const auto& [key, value] : kv) {
    if (!known.contains(key)) throw std::invalid_argument(fmt::format("config: unknown key '{}'", key));
  }

  RunConfig rc;
  rc.moe.B = parse_number<int>(kv, "B");
  rc.moe.L = parse_number<int>(kv, "L");
  rc.moe.M = parse_number<int>(kv, "M");
  rc.moe.H = parse_number<int>(kv, "H");
  rc.moe.E = parse_number<int>(kv, "E");
  rc.moe.k = parse_number<int>(kv, "k");
  rc.moe.f = parse_number<double>(kv, "f");
  rc.moe.validate();

  rc.cluster.num_nodes = parse_number<int>(kv, "num_nodes");
  rc.cluster.devices_per_node = parse_number<int>(kv, "devices_per_node");
  rc.cluster.beta_intra = parse_number<double>(kv, "beta_intra");
  rc.cluster.beta_inter = parse_number<double>(kv, "beta_inter");
  rc.cluster.alpha_link = parse_number<double>(kv, "alpha_link");
  rc.cluster.validate();

  rc.layout =
      ParallelLayout(parse_number<int>(kv, "N_MP"), parse_number<int>(kv, "N_EP"), parse_number<int>(kv, "N_ESP"));
  if (rc.layout.world_size() != rc.cluster.world_size()) {
    throw std::invalid_argument(fmt::format("config: N_EP*N_ESP={} but the cluster has {} ranks",
                                            rc.layout.world_size(), rc.cluster.world_size()));
  }
  if (kv.contains("seed")) rc.seed = parse_number<std::uint64_t>(kv, "seed");
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(fmt::format("cannot open config '{}'", path.string()));
  return parse_run_config(in);
}

}  // namespace moesched
