// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include "moesched/timing.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace moesched {

namespace {

LinkClass link_between(const ClusterSpec& cluster, int a, int b) {
  return cluster.same_node(a, b) ? LinkClass::Intra : LinkClass::Inter;
}

std::int64_t round_up(std::int64_t x, std::int64_t multiple) { return (x + multiple - 1) / multiple * multiple; }

void check_group(const std::vector<int>& group, const ClusterSpec& cluster) {
  if (group.empty()) throw std::invalid_argument("collective group is empty");
  std::vector<int> sorted_group = group;
  std::sort(sorted_group.begin(), sorted_group.end());
  if (std::adjacent_find(sorted_group.begin(), sorted_group.end()) != sorted_group.end()) {
    throw std::invalid_argument("collective group lists a rank twice");
  }
  if (sorted_group.front() < 0 || sorted_group.back() >= cluster.world_size()) {
    throw std::invalid_argument(
        fmt::format("collective group references a rank outside the {}-rank cluster", cluster.world_size()));
  }
}

void push_step(TransferPlan& plan, int rank, std::vector<Transfer> sends) {
  plan.steps[rank].push_back(TransferStep{std::move(sends)});
}

void lower_ring(TransferPlan& plan, const std::vector<int>& group, std::int64_t slice, int direction,
                const ClusterSpec& cluster) {
  const int g = static_cast<int>(group.size());
  for (int step = 0; step + 1 < g; ++step) {
    for (int i = 0; i < g; ++i) {
      const int peer = group[(i + direction + g) % g];
      push_step(plan, group[i], {Transfer{peer, slice, link_between(cluster, group[i], peer)}});
    }
  }
}

double leq_slack(double lhs, double rhs) { return kInequalityTolerance * std::max(std::abs(lhs), std::abs(rhs)); }

bool leq(double lhs, double rhs) { return lhs <= rhs + leq_slack(lhs, rhs); }

double groups_time(Collective kind, const std::vector<std::vector<int>>& groups, std::int64_t elements,
                   const ClusterSpec& cluster) {
  const auto g = static_cast<std::int64_t>(groups.front().size());
  return simulate_plan(lower_collective(kind, groups, round_up(elements, g), cluster), cluster);
}

}  // namespace

std::string_view to_string(LinkClass link) { return link == LinkClass::Intra ? "intra" : "inter"; }

bool TransferPlan::empty() const {
  return std::all_of(steps.begin(), steps.end(), [](const auto& s) { return s.empty(); });
}

std::int64_t TransferPlan::sent_by(int rank) const {
  std::int64_t total = 0;
  for (const auto& step : steps.at(static_cast<std::size_t>(rank))) {
    for (const auto& t : step.sends) total += t.elements;
  }
  return total;
}

std::int64_t TransferPlan::received_by(int rank) const {
  std::int64_t total = 0;
  for (const auto& rank_steps : steps) {
    for (const auto& step : rank_steps) {
      for (const auto& t : step.sends) {
        if (t.peer == rank) total += t.elements;
      }
    }
  }
  return total;
}

TransferPlan lower_collective(Collective kind, const std::vector<int>& group, std::int64_t elements,
                              const ClusterSpec& cluster) {
  return lower_collective(kind, std::vector<std::vector<int>>{group}, elements, cluster);
}

TransferPlan lower_collective(Collective kind, const std::vector<std::vector<int>>& groups, std::int64_t elements,
                              const ClusterSpec& cluster) {
  cluster.validate();
  if (groups.empty()) throw std::invalid_argument("lower_collective: no groups");
  if (elements < 0) throw std::invalid_argument("lower_collective: negative element count");
  const auto g = static_cast<int>(groups.front().size());
  std::vector<bool> used(static_cast<std::size_t>(cluster.world_size()), false);
  for (const auto& group : groups) {
    check_group(group, cluster);
    if (static_cast<int>(group.size()) != g) throw std::invalid_argument("lower_collective: unequal group sizes");
    for (int r : group) {
      if (used[r]) throw std::invalid_argument(fmt::format("lower_collective: rank {} is in two groups", r));
      used[r] = true;
    }
  }
  if (elements % g != 0) {
    throw std::invalid_argument(
        fmt::format("lower_collective: {} elements are indivisible into {} slices", elements, g));
  }
  const std::int64_t slice = elements / g;

  TransferPlan plan;
  plan.group_size = g;
  plan.steps.resize(static_cast<std::size_t>(cluster.world_size()));
  for (const auto& group : groups) {
    switch (kind) {
      case Collective::AlltoAll:
        for (int src : group) {
          std::vector<Transfer> sends;
          for (int dst : group) sends.push_back(Transfer{dst, slice, link_between(cluster, src, dst)});
          push_step(plan, src, std::move(sends));
        }
        break;
      case Collective::AllGather:
        lower_ring(plan, group, slice, +1, cluster);
        break;
      case Collective::ReduceScatter:
        lower_ring(plan, group, slice, -1, cluster);
        break;
      case Collective::AllReduce:
        lower_ring(plan, group, slice, -1, cluster);
        lower_ring(plan, group, slice, +1, cluster);
        break;
      default:
        throw std::invalid_argument(fmt::format("lower_collective: {} is not a collective", to_string(kind)));
    }
  }
  return plan;
}

TransferPlan lower_collective(Collective kind, const ParallelLayout& layout, GroupKind group, std::int64_t elements,
                              const ClusterSpec& cluster) {
  if (layout.world_size() != cluster.world_size()) {
    throw std::invalid_argument(
        fmt::format("layout spans {} ranks but the cluster has {}", layout.world_size(), cluster.world_size()));
  }
  return lower_collective(kind, layout.groups(group), elements, cluster);
}

PlanTiming simulate_plan_detailed(const TransferPlan& plan, const ClusterSpec& cluster) {
  const auto world = plan.steps.size();
  PlanTiming timing;
  timing.rank_finish.assign(world, 0.0);
  std::vector<double> arrival(world, 0.0);
  std::vector<double> busy_intra(world, 0.0);
  std::vector<double> busy_inter(world, 0.0);
  std::size_t depth = 0;
  for (const auto& s : plan.steps) depth = std::max(depth, s.size());

  for (std::size_t i = 0; i < depth; ++i) {
    std::vector<double> next_arrival = arrival;
    for (std::size_t r = 0; r < world; ++r) {
      if (i >= plan.steps[r].size()) continue;
      const double start = std::max(timing.rank_finish[r], arrival[r]);
      std::int64_t intra = 0;
      std::int64_t inter = 0;
      for (const auto& t : plan.steps[r][i].sends) (t.link == LinkClass::Intra ? intra : inter) += t.elements;
      const double t_intra = intra > 0 ? cluster.alpha_link + cluster.beta_intra * static_cast<double>(intra) : 0.0;
      const double t_inter = inter > 0 ? cluster.alpha_link + cluster.beta_inter * static_cast<double>(inter) : 0.0;
      busy_intra[r] += t_intra;
      busy_inter[r] += t_inter;
      for (const auto& t : plan.steps[r][i].sends) {
        if (t.elements == 0) continue;
        const double done = start + (t.link == LinkClass::Intra ? t_intra : t_inter);
        next_arrival[t.peer] = std::max(next_arrival[t.peer], done);
      }
      timing.rank_finish[r] = start + std::max(t_intra, t_inter);
    }
    arrival = std::move(next_arrival);
  }

  std::size_t last = 0;
  for (std::size_t r = 0; r < world; ++r) {
    timing.rank_finish[r] = std::max(timing.rank_finish[r], arrival[r]);
    if (timing.rank_finish[r] > timing.rank_finish[last]) last = r;
  }
  if (world > 0) {
    timing.seconds = timing.rank_finish[last];
    timing.bottleneck = busy_inter[last] > busy_intra[last] ? LinkClass::Inter : LinkClass::Intra;
  }
  return timing;
}

double simulate_plan(const TransferPlan& plan, const ClusterSpec& cluster) {
  return simulate_plan_detailed(plan, cluster).seconds;
}

SaaTiming time_saa_detailed(const TransferPlan& plan_a2a, const TransferPlan& plan_ag, int phases,
                            const ClusterSpec& cluster) {
  if (phases < 1) throw std::invalid_argument("time_saa: phases must be >= 1");
  if (!plan_a2a.empty() && plan_a2a.group_size != phases) {
    throw std::invalid_argument(
        fmt::format("time_saa: {} phases for an AlltoAll over {} ranks", phases, plan_a2a.group_size));
  }
  SaaTiming out;
  out.alltoall_seconds = simulate_plan(plan_a2a, cluster);
  out.allgather_seconds = simulate_plan(plan_ag, cluster);
  const double a = out.alltoall_seconds / phases;
  const double g = out.allgather_seconds / phases;
  out.phases.push_back(a);
  for (int p = 1; p < phases; ++p) out.phases.push_back(std::max(a, g));
  out.phases.push_back(g);
  if (phases == 1 || out.alltoall_seconds == 0.0 || out.allgather_seconds == 0.0) {
    out.seconds = out.alltoall_seconds + out.allgather_seconds;
  } else {
    for (double t : out.phases) out.seconds += t;
  }
  return out;
}

double time_saa(const TransferPlan& plan_a2a, const TransferPlan& plan_ag, int phases, const ClusterSpec& cluster) {
  return time_saa_detailed(plan_a2a, plan_ag, phases, cluster).seconds;
}

double collective_time(Collective kind, const ParallelLayout& layout, GroupKind group, std::int64_t elements,
                       const ClusterSpec& cluster) {
  const std::int64_t padded = round_up(elements, layout.group_size(group));
  return simulate_plan(lower_collective(kind, layout, group, padded, cluster), cluster);
}

SaaTiming saa_time(const ParallelLayout& layout, GroupKind a2a_group, std::int64_t a2a_elements, GroupKind ag_group,
                   std::int64_t ag_elements, const ClusterSpec& cluster) {
  const int phases = layout.group_size(a2a_group);
  const auto a2a = lower_collective(Collective::AlltoAll, layout, a2a_group, round_up(a2a_elements, phases), cluster);
  const auto ag = lower_collective(Collective::AllGather, layout, ag_group,
                                   round_up(ag_elements, layout.group_size(ag_group)), cluster);
  return time_saa_detailed(a2a, ag, phases, cluster);
}

TimingReport time_schedule(ScheduleKind kind, const ScheduleVolumes& volumes, const ParallelLayout& layout,
                           const ClusterSpec& cluster) {
  if (volumes.n_mp != layout.n_mp() || volumes.n_esp != layout.n_esp()) {
    throw std::invalid_argument("time_schedule: volumes were derived for a different layout");
  }
  const std::int64_t y = volumes.dispatch();
  const std::int64_t shard = (y + volumes.n_mp - 1) / volumes.n_mp;
  TimingReport report;
  report.schedule = kind;
  auto add = [&](std::string name, double seconds) {
    report.terms.push_back({std::move(name), seconds});
    report.total += seconds;
  };
  switch (kind) {
    case ScheduleKind::Baseline:
      add("AG_ESP",
          collective_time(Collective::AllGather, layout, GroupKind::ESP, volumes.blm * volumes.n_esp, cluster));
      add("A2A_EP dispatch", collective_time(Collective::AlltoAll, layout, GroupKind::EP, y, cluster));
      add("AR_ESP", collective_time(Collective::AllReduce, layout, GroupKind::ESP, y, cluster));
      add("A2A_EP combine", collective_time(Collective::AlltoAll, layout, GroupKind::EP, y, cluster));
      break;
    case ScheduleKind::S1: {
      const double a2a = collective_time(Collective::AlltoAll, layout, GroupKind::EP_ESP, shard, cluster);
      add("A2A_EP_ESP dispatch", a2a);
      add("A2A_EP_ESP combine", a2a);
      add("AG_MP", collective_time(Collective::AllGather, layout, GroupKind::MP, volumes.blm, cluster));
      break;
    }
    case ScheduleKind::S2: {
      add("A2A_EP_ESP dispatch", collective_time(Collective::AlltoAll, layout, GroupKind::EP_ESP, shard, cluster));
      SaaTiming saa = saa_time(layout, GroupKind::EP_ESP, shard, GroupKind::MP, volumes.etm, cluster);
      add("SAA", saa.seconds);
      report.saa_phases = std::move(saa.phases);
      break;
    }
  }
  return report;
}

TimingReport time_schedule(ScheduleKind kind, const MoEConfig& cfg, const ParallelLayout& layout,
                           const ClusterSpec& cluster) {
  return time_schedule(kind, schedule_volumes(cfg, layout), layout, cluster);
}

bool InequalityReport::all_pass() const { return violations() == 0; }

std::size_t InequalityReport::violations() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return !r.pass; }));
}

InequalityReport verify_inequalities(const ClusterSpec& cluster, const ParallelLayout& layout,
                                     const std::vector<std::int64_t>& sizes) {
  cluster.validate();
  if (cluster.world_size() != layout.world_size()) {
    throw std::invalid_argument(
        fmt::format("layout spans {} ranks but the cluster has {}", layout.world_size(), cluster.world_size()));
  }
  if (sizes.empty()) throw std::invalid_argument("verify_inequalities: empty size grid");
  InequalityReport report;
  report.placement = classify_placement(cluster, layout);
  if (report.placement == PlacementCase::Other) {
    throw std::invalid_argument(
        "placement puts both EP and ESP groups across nodes; the fused AlltoAll is then bound by the slowest "
        "inter-node transfer and the inequalities are not claimed for it");
  }
  const bool check_s2 = layout.n_mp() >= 2 && groups_within_nodes(cluster, layout, GroupKind::MP);
  if (layout.n_mp() >= 2 && !check_s2) {
    report.note = "MP groups cross nodes; s2_gain is out of model and was not checked";
  }

  auto row = [&](std::string name, std::int64_t x, double lhs, double rhs, bool pass) {
    report.rows.push_back({report.placement, std::move(name), x, lhs, rhs, pass});
  };
  for (std::int64_t x : sizes) {
    if (x < 1) throw std::invalid_argument("verify_inequalities: sizes must be positive");
    const double ag = collective_time(Collective::AllGather, layout, GroupKind::ESP, x, cluster);
    const double rs = collective_time(Collective::ReduceScatter, layout, GroupKind::ESP, x, cluster);
    const double ar = collective_time(Collective::AllReduce, layout, GroupKind::ESP, x, cluster);
    const double a2a_ep = collective_time(Collective::AlltoAll, layout, GroupKind::EP, x, cluster);
    const double a2a_fused = collective_time(Collective::AlltoAll, layout, GroupKind::EP_ESP, x, cluster);

    row("dispatch_le_gather", x, a2a_fused, ag + a2a_ep, leq(a2a_fused, ag + a2a_ep));
    if (report.placement == PlacementCase::SingleNode) {
      row("dispatch_eq_single_node", x, a2a_fused, a2a_ep,
          std::abs(a2a_fused - a2a_ep) <= leq_slack(a2a_fused, a2a_ep));
    }
    row("combine_le_scatter", x, a2a_fused, rs + a2a_ep, leq(a2a_fused, rs + a2a_ep));
    const double t_b = ag + a2a_ep + ar + a2a_ep;
    const double t_d = 2.0 * a2a_fused;
    row("fused_gain", x, ag, t_b - t_d, ag <= t_b - t_d + leq_slack(ag, t_b));

    if (check_s2) {
      const std::int64_t per_shard = (x + layout.n_esp() - 1) / layout.n_esp();
      const ScheduleVolumes volumes{per_shard, per_shard, layout.n_mp(), layout.n_esp()};
      const double t_base = time_schedule(ScheduleKind::Baseline, volumes, layout, cluster).total;
      const double t_d2 = time_schedule(ScheduleKind::S2, volumes, layout, cluster).total;
      row("s2_gain", x, t_d2, t_base, leq(t_d2, t_base));
    }
  }
  return report;
}

InequalityReport verify_group_inequalities(const ClusterSpec& cluster, const std::vector<std::vector<int>>& ep,
                                           const std::vector<std::vector<int>>& esp,
                                           const std::vector<std::vector<int>>& fused,
                                           const std::vector<std::int64_t>& sizes) {
  cluster.validate();
  if (ep.empty() || esp.empty() || fused.empty() || sizes.empty()) {
    throw std::invalid_argument("verify_group_inequalities: groups and sizes must be non-empty");
  }
  auto inside_nodes = [&](const std::vector<std::vector<int>>& groups) {
    return std::all_of(groups.begin(), groups.end(), [&](const std::vector<int>& g) {
      return std::all_of(g.begin(), g.end(), [&](int r) { return cluster.same_node(r, g.front()); });
    });
  };
  InequalityReport report;
  if (cluster.num_nodes == 1) {
    report.placement = PlacementCase::SingleNode;
  } else if (inside_nodes(esp)) {
    report.placement = PlacementCase::EspIntraNode;
  } else if (inside_nodes(ep)) {
    report.placement = PlacementCase::EpIntraNode;
  } else {
    throw std::invalid_argument("verify_group_inequalities: EP and ESP groups both cross nodes");
  }
  for (std::int64_t x : sizes) {
    const double ag = groups_time(Collective::AllGather, esp, x, cluster);
    const double rs = groups_time(Collective::ReduceScatter, esp, x, cluster);
    const double ar = groups_time(Collective::AllReduce, esp, x, cluster);
    const double a2a_ep = groups_time(Collective::AlltoAll, ep, x, cluster);
    const double a2a_fused = groups_time(Collective::AlltoAll, fused, x, cluster);
    report.rows.push_back(
        {report.placement, "dispatch_le_gather", x, a2a_fused, ag + a2a_ep, leq(a2a_fused, ag + a2a_ep)});
    report.rows.push_back(
        {report.placement, "combine_le_scatter", x, a2a_fused, rs + a2a_ep, leq(a2a_fused, rs + a2a_ep)});
    const double t_b = ag + 2.0 * a2a_ep + ar;
    const double t_d = 2.0 * a2a_fused;
    report.rows.push_back({report.placement, "fused_gain", x, ag, t_b - t_d, ag <= t_b - t_d + leq_slack(ag, t_b)});
  }
  return report;
}

std::vector<std::int64_t> geometric_sizes(int lo_exp, int hi_exp) {
  if (lo_exp < 0 || hi_exp > 62 || lo_exp > hi_exp) {
    throw std::invalid_argument(fmt::format("bad size exponent range {}..{}", lo_exp, hi_exp));
  }
  std::vector<std::int64_t> sizes;
  for (int e = lo_exp; e <= hi_exp; ++e) sizes.push_back(std::int64_t{1} << e);
  return sizes;
}

}  // namespace moesched
