// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include "moesched/cli.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "moesched/dataplane.hpp"
#include "moesched/timing.hpp"

namespace moesched {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_value(std::string_view text, std::string_view what) {
  const std::string t = trim(text);
  T value{};
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size()) {
    throw std::invalid_argument(fmt::format("{}: '{}' is not a valid number", what, t));
  }
  return value;
}

template <typename T>
std::vector<T> parse_list(const std::string& text, std::string_view what) {
  std::vector<T> values;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) values.push_back(parse_value<T>(item, what));
  if (values.empty()) throw std::invalid_argument(fmt::format("{}: empty list", what));
  return values;
}

std::ifstream open_input(const std::string& path, std::string_view what) {
  if (path.empty()) throw std::invalid_argument(fmt::format("missing {} path", what));
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(fmt::format("cannot open {} '{}'", what, path));
  return in;
}

CostProfile load_profile(const std::string& path) {
  auto in = open_input(path, "profile");
  return read_profile(in);
}

/// Sends the CSV body to --out when given, otherwise to `out`.
class CsvSink {
 public:
  CsvSink(const std::string& path, std::ostream& fallback) : fallback_(fallback) {
    if (!path.empty()) {
      file_.open(path, std::ios::out | std::ios::trunc);
      if (!file_) throw std::invalid_argument(fmt::format("cannot write '{}'", path));
    }
  }
  std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : fallback_; }
  bool to_file() const { return file_.is_open(); }

 private:
  std::ofstream file_;
  std::ostream& fallback_;
};

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitInputError;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << '\n';
    return kExitInputError;
  }
}

std::string num(double v) { return fmt::format("{:.9g}", v); }

int case_number(PlacementCase placement) {
  switch (placement) {
    case PlacementCase::SingleNode:
      return 1;
    case PlacementCase::EspIntraNode:
      return 2;
    case PlacementCase::EpIntraNode:
      return 3;
    case PlacementCase::Other:
      return 4;
  }
  return 4;
}

CostReport price(const SweepPoint& point, const CostProfile& profile, bool literal_selector) {
  return literal_selector ? select_schedule_literal(point.moe, point.layout, profile)
                          : select_schedule(point.moe, point.layout, profile);
}

std::string config_id_of(const std::string& path) { return std::filesystem::path(path).stem().string(); }

}  // namespace

SweepGrid SweepGrid::default_grid() {
  SweepGrid g;
  g.P = {8, 16, 32};
  g.n_mp = {1, 2, 4};
  g.n_esp = {1, 2, 4};
  g.B = {2, 4, 8};
  g.L = {512, 1024, 2048};
  g.m_per_esp = {1024, 2048, 4096};
  g.h_per_esp = {1024, 2048, 4096};
  g.f = {1.2, 2.4};
  return g;
}

SweepGrid SweepGrid::parse(std::istream& in) {
  SweepGrid g = default_grid();
  for (const auto& [key, value] : parse_key_values(in)) {
    const std::string what = "grid key '" + key + "'";
    if (key == "P") {
      g.P = parse_list<int>(value, what);
    } else if (key == "N_MP") {
      g.n_mp = parse_list<int>(value, what);
    } else if (key == "N_ESP") {
      g.n_esp = parse_list<int>(value, what);
    } else if (key == "B") {
      g.B = parse_list<int>(value, what);
    } else if (key == "L") {
      g.L = parse_list<int>(value, what);
    } else if (key == "M_per_ESP") {
      g.m_per_esp = parse_list<int>(value, what);
    } else if (key == "H_per_ESP") {
      g.h_per_esp = parse_list<int>(value, what);
    } else if (key == "f") {
      g.f = parse_list<double>(value, what);
    } else if (key == "k") {
      g.k = parse_value<int>(value, what);
    } else if (key == "experts_per_EP") {
      g.experts_per_ep = parse_value<int>(value, what);
    } else {
      throw std::invalid_argument(fmt::format("grid: unknown key '{}'", key));
    }
  }
  return g;
}

ExpandedGrid expand_grid(const SweepGrid& grid) {
  ExpandedGrid out;
  for (int p : grid.P)
    for (int n_mp : grid.n_mp)
      for (int n_esp : grid.n_esp)
        for (int b : grid.B)
          for (int l : grid.L)
            for (int m : grid.m_per_esp)
              for (int h : grid.h_per_esp)
                for (double f : grid.f) {
                  const std::size_t index = out.total++;
                  try {
                    if (p < 1 || n_esp < 1 || p % n_esp != 0) throw std::invalid_argument("P not divisible by N_ESP");
                    SweepPoint point;
                    point.index = index;
                    point.layout = ParallelLayout(n_mp, p / n_esp, n_esp);
                    point.moe = MoEConfig{b, l, m * n_esp, h * n_esp, grid.experts_per_ep * (p / n_esp), grid.k, f};
                    point.moe.validate();
                    if (point.moe.tokens() % n_mp != 0) throw std::invalid_argument("B*L not divisible by N_MP");
                    out.points.push_back(point);
                  } catch (const std::invalid_argument&) {
                    ++out.skipped;
                  }
                }
  return out;
}

std::vector<SweepRow> evaluate_sweep(const std::vector<SweepPoint>& points, const CostProfile& profile,
                                     bool literal_selector) {
  std::vector<SweepRow> rows(points.size());
  std::vector<std::exception_ptr> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        rows[i].point = points[i];
        rows[i].report = price(points[i], profile, literal_selector);
        const double best = std::min(rows[i].report.t_D1, rows[i].report.t_D2);
        rows[i].speedup = best > 0.0 ? rows[i].report.t_B / best : std::numeric_limits<double>::infinity();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(std::thread::hardware_concurrency(), 16));
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return rows;
}

std::vector<std::int64_t> parse_sizes(const std::string& text) {
  std::vector<std::int64_t> sizes;
  std::istringstream in(text);
  std::string item;
  auto power = [](const std::string& token) -> std::int64_t {
    if (token.rfind("2^", 0) == 0) {
      const int e = parse_value<int>(token.substr(2), "sizes");
      if (e < 0 || e > 62) throw std::invalid_argument(fmt::format("sizes: exponent {} out of range", e));
      return std::int64_t{1} << e;
    }
    return parse_value<std::int64_t>(token, "sizes");
  };
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (const auto dots = item.find(".."); dots != std::string::npos) {
      const std::string lo = trim(item.substr(0, dots));
      const std::string hi = trim(item.substr(dots + 2));
      if (lo.rfind("2^", 0) != 0 || hi.rfind("2^", 0) != 0) {
        throw std::invalid_argument(fmt::format("sizes: ranges must be written 2^a..2^b, got '{}'", item));
      }
      const auto range =
          geometric_sizes(parse_value<int>(lo.substr(2), "sizes"), parse_value<int>(hi.substr(2), "sizes"));
      sizes.insert(sizes.end(), range.begin(), range.end());
    } else {
      sizes.push_back(power(item));
    }
  }
  if (sizes.empty()) throw std::invalid_argument("sizes: empty list");
  for (auto s : sizes) {
    if (s < 1) throw std::invalid_argument("sizes: every size must be >= 1");
  }
  return sizes;
}

FitSamples measure_collectives(const ClusterSpec& cluster, const ParallelLayout& layout,
                               const std::vector<std::int64_t>& sizes) {
  struct Probe {
    Collective kind;
    GroupKind group;
  };
  static constexpr Probe probes[] = {
      {Collective::AllGather, GroupKind::MP},  {Collective::AlltoAll, GroupKind::MP},
      {Collective::AlltoAll, GroupKind::EP},   {Collective::AlltoAll, GroupKind::EP_ESP},
      {Collective::AllGather, GroupKind::ESP}, {Collective::ReduceScatter, GroupKind::ESP},
      {Collective::AllReduce, GroupKind::ESP},
  };
  FitSamples samples;
  for (std::int64_t x : sizes) {
    const auto xd = static_cast<double>(x);
    for (const Probe& p : probes) {
      if (layout.group_size(p.group) == 1) continue;
      samples[{p.kind, p.group}].emplace_back(xd, collective_time(p.kind, layout, p.group, x, cluster));
    }
    if (layout.group_size(GroupKind::EP_ESP) > 1) {
      // S2 gathers ETM while the fused AlltoAll moves ETM * N_ESP / N_MP.
      const std::int64_t gathered = x * layout.n_mp() / layout.n_esp();
      const double saa = saa_time(layout, GroupKind::EP_ESP, x, GroupKind::MP, gathered, cluster).seconds;
      const double hidden = collective_time(Collective::AllGather, layout, GroupKind::MP, gathered, cluster);
      samples[{Collective::Overlap, GroupKind::EP_ESP}].emplace_back(xd, saa - hidden);
    }
  }
  return samples;
}

std::uint64_t resolve_seed(const CommandOptions& opts, const RunConfig& run) {
  if (opts.seed) return *opts.seed;
  if (const char* env = std::getenv("PARM_SEED"); env != nullptr && *env != '\0') {
    return parse_value<std::uint64_t>(env, "PARM_SEED");
  }
  return run.seed;
}

int cmd_fit(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    auto in = open_input(opts.input, "fit input");
    const CostProfile profile = fit_profile(read_fit_samples(in));
    for (const auto& ab : profile.entries()) {
      if (ab.alpha_clamped) {
        err << fmt::format("warning: {},{} fitted a negative alpha; clamped to 0\n", to_string(ab.collective),
                           to_string(ab.group));
      }
    }
    CsvSink sink(opts.out, out);
    write_profile(sink.stream(), profile);
    return static_cast<int>(kExitOk);
  });
}

int cmd_predict(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig run = load_run_config(opts.config);
    const CostProfile profile = load_profile(opts.profile);
    const CostReport r = opts.literal_selector ? select_schedule_literal(run.moe, run.layout, profile)
                                               : select_schedule(run.moe, run.layout, profile);
    CsvSink sink(opts.out, out);
    sink.stream() << "config_id,t_B,t_D,t_D1,t_D2,chosen\n";
    sink.stream() << fmt::format("{},{},{},{},{},{}\n", config_id_of(opts.config), num(r.t_B), num(r.t_D), num(r.t_D1),
                                 num(r.t_D2), r.chosen == ScheduleKind::S1 ? "S1" : "S2");
    return static_cast<int>(kExitOk);
  });
}

int cmd_simulate(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig run = load_run_config(opts.config);
    std::vector<ScheduleKind> kinds;
    if (opts.schedule == "all") {
      kinds = {ScheduleKind::Baseline, ScheduleKind::S1, ScheduleKind::S2};
    } else {
      kinds = {parse_schedule_kind(opts.schedule)};
    }
    const std::uint64_t seed = resolve_seed(opts, run);
    const ExpertWeights weights = ExpertWeights::random(run.moe.M, run.moe.H, run.moe.E, seed);
    const auto inputs = random_inputs(run.moe, run.layout, seed + 1);

    ExpertWeights used = weights;
    if (opts.corrupt_weights) used.w1.front()(0, 0) += 1.0;

    CsvSink sink(opts.out, out);
    std::ostream& os = sink.stream();
    bool ok = true;
    std::vector<std::pair<ScheduleKind, ScheduleResult>> results;
    os << "schedule,result,relative_error,dropped,ffn_multiplies\n";
    for (ScheduleKind kind : kinds) {
      ScheduleResult result = run_schedule(kind, run.moe, run.layout, run.cluster, used, inputs);
      double worst = 0.0;
      for (int r = 0; r < run.layout.world_size(); ++r) {
        const Matrix expected = reference_forward(run.moe, weights, inputs[r], run.layout.n_mp());
        worst = std::max(worst, relative_error(result.outputs[r], expected));
      }
      const bool pass = worst <= 1e-9;
      ok = ok && pass;
      std::size_t dropped = 0;
      for (const auto& d : result.dropped) dropped += d.size();
      os << fmt::format("{},{},{:.3e},{},{}\n", to_string(kind), pass ? "PASS" : "FAIL", worst, dropped,
                        result.ffn_multiplies);
      results.emplace_back(kind, std::move(result));
    }
    os << "schedule,collective,group,group_size,elements_in,elements_moved,phases,overlapped\n";
    for (const auto& [kind, result] : results) {
      for (const auto& rec : result.trace.records()) {
        os << fmt::format("{},{},{},{},{},{},{},{}\n", to_string(kind), to_string(rec.kind), to_string(rec.group),
                          rec.group_size, rec.elements_in, rec.elements_moved, rec.phases,
                          rec.overlapped ? "yes" : "no");
      }
    }
    return static_cast<int>(ok ? kExitOk : kExitFailure);
  });
}

int cmd_verify(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig run = load_run_config(opts.config);
    const auto sizes = opts.sizes.empty() ? geometric_sizes(10, 24) : parse_sizes(opts.sizes);
    const InequalityReport report = verify_inequalities(run.cluster, run.layout, sizes);
    if (!report.note.empty()) err << "note: " << report.note << '\n';
    CsvSink sink(opts.out, out);
    sink.stream() << "case,inequality,x,lhs_seconds,rhs_seconds,pass\n";
    for (const auto& row : report.rows) {
      sink.stream() << fmt::format("{},{},{},{:.12g},{:.12g},{}\n", case_number(row.placement), row.name, row.x,
                                   row.lhs, row.rhs, row.pass ? "true" : "false");
    }
    if (!report.all_pass()) err << report.violations() << " inequality violations\n";
    return static_cast<int>(report.all_pass() ? kExitOk : kExitFailure);
  });
}

int cmd_sweep(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    SweepGrid grid = SweepGrid::default_grid();
    if (!opts.grid.empty()) {
      auto in = open_input(opts.grid, "grid");
      grid = SweepGrid::parse(in);
    }
    const CostProfile profile = load_profile(opts.profile);
    const ExpandedGrid expanded = expand_grid(grid);
    if (expanded.points.empty()) {
      throw std::invalid_argument(fmt::format("grid has no valid points ({} skipped)", expanded.skipped));
    }
    const auto rows = evaluate_sweep(expanded.points, profile, opts.literal_selector);

    CsvSink sink(opts.out, out);
    std::ostream& os = sink.stream();
    os << "config_id,P,N_MP,N_EP,N_ESP,B,L,M,H,f,t_B,t_D1,t_D2,chosen,predicted_speedup\n";
    double sum = 0.0;
    double lo = std::numeric_limits<double>::infinity();
    double hi = 0.0;
    std::size_t above4 = 0;
    std::size_t s1 = 0;
    for (const auto& row : rows) {
      const auto& p = row.point;
      os << fmt::format("g{:05d},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6f}\n", p.index, p.layout.world_size(),
                        p.layout.n_mp(), p.layout.n_ep(), p.layout.n_esp(), p.moe.B, p.moe.L, p.moe.M, p.moe.H, p.moe.f,
                        num(row.report.t_B), num(row.report.t_D1), num(row.report.t_D2),
                        row.report.chosen == ScheduleKind::S1 ? "S1" : "S2", row.speedup);
      sum += row.speedup;
      lo = std::min(lo, row.speedup);
      hi = std::max(hi, row.speedup);
      above4 += row.speedup > 4.0 ? 1 : 0;
      s1 += row.report.chosen == ScheduleKind::S1 ? 1 : 0;
    }
    std::ostream& summary = sink.to_file() ? out : err;
    const auto n = static_cast<double>(rows.size());
    summary << fmt::format("points {} valid {} skipped {}\n", expanded.total, rows.size(), expanded.skipped);
    summary << fmt::format("speedup mean {:.4f} min {:.4f} max {:.4f}\n", sum / n, lo, hi);
    summary << fmt::format("speedup > 4x {:.4f}\n", static_cast<double>(above4) / n);
    summary << fmt::format("chosen S1 {} S2 {}\n", s1, rows.size() - s1);
    const auto violations = constraint_violations(profile);
    summary << fmt::format("profile in constraint set {}\n", violations.empty() ? "yes" : "no");
    return static_cast<int>(kExitOk);
  });
}

int cmd_measure(const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const RunConfig run = load_run_config(opts.config);
    const auto sizes = opts.sizes.empty() ? geometric_sizes(18, 33) : parse_sizes(opts.sizes);
    CsvSink sink(opts.out, out);
    write_fit_samples(sink.stream(), measure_collectives(run.cluster, run.layout, sizes));
    return static_cast<int>(kExitOk);
  });
}

}  // namespace moesched
