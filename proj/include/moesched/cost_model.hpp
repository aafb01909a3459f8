// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "moesched/collectives.hpp"
#include "moesched/config.hpp"
#include "moesched/dataplane.hpp"

namespace moesched {

/// t(x) = alpha + beta * x for one collective on one group kind.
struct AlphaBeta {
  Collective collective = Collective::AlltoAll;
  GroupKind group = GroupKind::EP_ESP;
  double alpha = 0.0;  // seconds
  double beta = 0.0;   // seconds per element
  double r_squared = 1.0;
  /// The least-squares intercept came out negative and was replaced by 0.
  bool alpha_clamped = false;
};

/// Least squares fit of t = alpha + beta * x. A negative intercept is
/// clamped to zero and beta refitted through the origin. Throws
/// std::invalid_argument for fewer than two distinct sizes or beta <= 0.
AlphaBeta fit_alpha_beta(const std::vector<std::pair<double, double>>& samples);

/// alpha + beta * x.
double predict_collective(const AlphaBeta& ab, double x);

class CostProfile {
 public:
  /// Overlap entries are stored under EP_ESP whatever group they name.
  void set(AlphaBeta entry);
  const AlphaBeta* find(Collective collective, GroupKind group) const;
  const AlphaBeta& at(Collective collective, GroupKind group) const;
  std::vector<AlphaBeta> entries() const;
  bool empty() const { return entries_.empty(); }

 private:
  std::map<std::pair<Collective, GroupKind>, AlphaBeta> entries_;
};

struct CostTerm {
  std::string name;
  double seconds = 0.0;
};

struct CostReport {
  double t_B = 0.0;
  double t_D = 0.0;
  double t_D1 = 0.0;
  double t_D2 = 0.0;
  ScheduleKind chosen = ScheduleKind::S1;
  std::vector<CostTerm> terms;
};

// Closed-form schedule costs, with y = E*T*M*N_ESP:
//   t_B  = AG_ESP(BLM*N_ESP) + AR_ESP(y) + 2 * A2A_EP(y)
//   t_D  = 2 * A2A_EP_ESP(y)
//   t_D1 = 2 * A2A_EP_ESP(y / N_MP) + AG_MP(BLM)
//   t_D2 = A2A_EP_ESP(y / N_MP) + Overlap(y / N_MP) + AG_MP(ETM)
// A missing entry for a collective whose group has one rank costs nothing;
// any other missing entry is an std::invalid_argument naming it.

double cost_baseline(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile);
double cost_fused(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile);
double cost_s1(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile);
double cost_s2(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile);

double cost_baseline(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile);
double cost_fused(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile);
double cost_s1(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile);
double cost_s2(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile);

/// Prices all four schedules and picks S1 iff t_D1 <= t_D2.
CostReport select_schedule(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile);
CostReport select_schedule(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile);

/// Compatibility pricing for comparison runs: T = k*f*B*L*M/E (real
/// valued), y = E*T*M*N_ESP, and t_D2 = A2A_EP_ESP(y / N_MP) + alpha_o +
/// beta_o * y with no MP gather. t_B and t_D are priced as in
/// select_schedule.
CostReport select_schedule_literal(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile);

/// Names of the checks in the monotone constraint set that `profile` fails;
/// empty when it belongs to the set. `tolerance` is the relative slack on
/// the AllReduce = AllGather + ReduceScatter identity.
std::vector<std::string> constraint_violations(const CostProfile& profile, double tolerance = 1e-9);
inline bool in_constraint_set(const CostProfile& profile, double tolerance = 1e-9) {
  return constraint_violations(profile, tolerance).empty();
}

using FitSamples = std::map<std::pair<Collective, GroupKind>, std::vector<std::pair<double, double>>>;

/// Reads `collective,group,elements,seconds` rows after that exact header.
FitSamples read_fit_samples(std::istream& in);
void write_fit_samples(std::ostream& out, const FitSamples& samples);

/// One fit per (collective, group) pair.
CostProfile fit_profile(const FitSamples& samples);

/// `collective,group,alpha,beta,r_squared`.
CostProfile read_profile(std::istream& in);
void write_profile(std::ostream& out, const CostProfile& profile);

}  // namespace moesched
