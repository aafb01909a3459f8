// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "moesched/config.hpp"
#include "moesched/cost_model.hpp"

namespace moesched {

/// Exit statuses shared by every command.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitInputError = 2 };

/// Candidate values per axis. M and H are given per ESP shard, so a point's
/// full widths are M_per_ESP * N_ESP and H_per_ESP * N_ESP.
struct SweepGrid {
  std::vector<int> P;
  std::vector<int> n_mp;
  std::vector<int> n_esp;
  std::vector<int> B;
  std::vector<int> L;
  std::vector<int> m_per_esp;
  std::vector<int> h_per_esp;
  std::vector<double> f;
  int k = 2;
  int experts_per_ep = 1;

  static SweepGrid default_grid();
  /// `key = v1, v2, ...` lines; unspecified keys keep the defaults.
  static SweepGrid parse(std::istream& in);
};

struct SweepPoint {
  std::size_t index = 0;  // position in the full grid enumeration
  MoEConfig moe;
  ParallelLayout layout;
};

struct ExpandedGrid {
  std::vector<SweepPoint> points;
  std::size_t total = 0;
  std::size_t skipped = 0;
};

/// Enumerates the grid with P outermost and f innermost, dropping points the
/// config checks reject.
ExpandedGrid expand_grid(const SweepGrid& grid);

struct SweepRow {
  SweepPoint point;
  CostReport report;
  double speedup = 0.0;  // t_B / min(t_D1, t_D2)
};

/// Prices every point, in parallel, returning rows in point order.
std::vector<SweepRow> evaluate_sweep(const std::vector<SweepPoint>& points, const CostProfile& profile,
                                     bool literal_selector = false);

/// Parses "1024,4096", "2^10..2^24" or a mix of both.
std::vector<std::int64_t> parse_sizes(const std::string& text);

/// Timing-model measurements for every collective the cost model prices,
/// on the groups of `run`'s layout. Collectives over one-rank groups are left
/// out. OVERLAP samples are SAA time minus the MP gather it hides.
FitSamples measure_collectives(const ClusterSpec& cluster, const ParallelLayout& layout,
                               const std::vector<std::int64_t>& sizes);

struct CommandOptions {
  std::string input;
  std::string config;
  std::string profile;
  std::string grid;
  std::string out;
  std::string sizes;
  std::string schedule = "all";
  std::optional<std::uint64_t> seed;
  bool literal_selector = false;
  bool corrupt_weights = false;
};

/// Seed from the flag, then PARM_SEED, then the config file.
std::uint64_t resolve_seed(const CommandOptions& opts, const RunConfig& run);

// Each command writes its CSV to --out when given, else to `out`, and
// diagnostics to `err`. Input errors return kExitInputError.
int cmd_fit(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_predict(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_simulate(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_verify(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_sweep(const CommandOptions& opts, std::ostream& out, std::ostream& err);
int cmd_measure(const CommandOptions& opts, std::ostream& out, std::ostream& err);

}  // namespace moesched
