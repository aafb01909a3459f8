// Copyright 2026 The moesched Authors
// SPDX-License-Identifier: Apache-2.0

#include "moesched/cost_model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace moesched {

namespace {

std::string entry_name(Collective c, GroupKind g) {
  if (c == Collective::Overlap) return "OVERLAP";
  return fmt::format("{}_{}", to_string(c), to_string(g));
}

/// Accumulates terms and the names of required entries the profile lacks.
class Pricer {
 public:
  Pricer(const ParallelLayout& layout, const CostProfile& profile) : layout_(layout), profile_(profile) {}

  double term(Collective c, GroupKind g, double x, std::string label = {}) {
    const GroupKind key = c == Collective::Overlap ? GroupKind::EP_ESP : g;
    double seconds = 0.0;
    if (const AlphaBeta* ab = profile_.find(c, key)) {
      seconds = predict_collective(*ab, x);
    } else if (layout_.group_size(key) > 1) {
      missing_.insert(entry_name(c, key));
    }
    terms_.push_back({label.empty() ? entry_name(c, key) : std::move(label), seconds});
    return seconds;
  }

  void finish() const {
    if (missing_.empty()) return;
    std::string names;
    for (const auto& n : missing_) names += (names.empty() ? "" : ", ") + n;
    throw std::invalid_argument(fmt::format("cost profile is missing {}", names));
  }

  std::vector<CostTerm> take_terms() { return std::move(terms_); }

 private:
  const ParallelLayout& layout_;
  const CostProfile& profile_;
  std::set<std::string> missing_;
  std::vector<CostTerm> terms_;
};

void check_volumes(const ScheduleVolumes& v, const ParallelLayout& layout) {
  if (v.blm < 0 || v.etm < 0) throw std::invalid_argument("schedule volumes must be non-negative");
  if (v.n_mp != layout.n_mp() || v.n_esp != layout.n_esp()) {
    throw std::invalid_argument("schedule volumes were derived for a different layout");
  }
}

double price_baseline(Pricer& p, const ScheduleVolumes& v) {
  const auto y = static_cast<double>(v.dispatch());
  return p.term(Collective::AllGather, GroupKind::ESP, static_cast<double>(v.blm * v.n_esp), "t_B AG_ESP") +
         p.term(Collective::AllReduce, GroupKind::ESP, y, "t_B AR_ESP") +
         2.0 * p.term(Collective::AlltoAll, GroupKind::EP, y, "t_B A2A_EP (x2)");
}

double price_fused(Pricer& p, const ScheduleVolumes& v) {
  return 2.0 *
         p.term(Collective::AlltoAll, GroupKind::EP_ESP, static_cast<double>(v.dispatch()), "t_D A2A_EP_ESP (x2)");
}

double price_s1(Pricer& p, const ScheduleVolumes& v) {
  const double shard = static_cast<double>(v.dispatch()) / v.n_mp;
  return 2.0 * p.term(Collective::AlltoAll, GroupKind::EP_ESP, shard, "t_D1 A2A_EP_ESP (x2)") +
         p.term(Collective::AllGather, GroupKind::MP, static_cast<double>(v.blm), "t_D1 AG_MP");
}

double price_s2(Pricer& p, const ScheduleVolumes& v) {
  const double shard = static_cast<double>(v.dispatch()) / v.n_mp;
  return p.term(Collective::AlltoAll, GroupKind::EP_ESP, shard, "t_D2 A2A_EP_ESP") +
         p.term(Collective::Overlap, GroupKind::EP_ESP, shard, "t_D2 OVERLAP") +
         p.term(Collective::AllGather, GroupKind::MP, static_cast<double>(v.etm), "t_D2 AG_MP");
}

template <typename F>
double price_one(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile, F price) {
  check_volumes(v, layout);
  Pricer p(layout, profile);
  const double t = price(p, v);
  p.finish();
  return t;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_field(const std::string& text, int line_no, const char* what) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(value)) {
    throw std::invalid_argument(fmt::format("line {}: {} '{}' is not a number", line_no, what, text));
  }
  return value;
}

std::string strip(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

/// Yields (line number, fields) for each data row after checking the header.
template <typename F>
void for_each_row(std::istream& in, const std::string& header, std::size_t width, F fn) {
  std::string line;
  int line_no = 0;
  bool seen_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip(line);
    if (line.empty()) continue;
    if (!seen_header) {
      if (line != header) {
        throw std::invalid_argument(fmt::format("line {}: expected header '{}'", line_no, header));
      }
      seen_header = true;
      continue;
    }
    auto fields = split_csv(line);
    if (fields.size() != width) {
      throw std::invalid_argument(fmt::format("line {}: expected {} fields, found {}", line_no, width, fields.size()));
    }
    fn(line_no, fields);
  }
  if (!seen_header) throw std::invalid_argument(fmt::format("missing header '{}'", header));
}

std::pair<Collective, GroupKind> parse_key(const std::vector<std::string>& fields, int line_no) {
  try {
    return {parse_collective(fields[0]), parse_group_kind(fields[1])};
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(fmt::format("line {}: {}", line_no, e.what()));
  }
}

}  // namespace

AlphaBeta fit_alpha_beta(const std::vector<std::pair<double, double>>& samples) {
  std::set<double> sizes;
  for (const auto& [x, t] : samples) {
    if (!std::isfinite(x) || !std::isfinite(t) || x < 0.0) {
      throw std::invalid_argument("fit_alpha_beta: sizes must be finite and non-negative, times finite");
    }
    sizes.insert(x);
  }
  if (sizes.size() < 2) throw std::invalid_argument("fit_alpha_beta: need at least two distinct sizes");

  const auto n = static_cast<double>(samples.size());
  double mean_x = 0.0;
  double mean_t = 0.0;
  for (const auto& [x, t] : samples) {
    mean_x += x;
    mean_t += t;
  }
  mean_x /= n;
  mean_t /= n;
  double sxx = 0.0;
  double sxt = 0.0;
  double stt = 0.0;
  for (const auto& [x, t] : samples) {
    sxx += (x - mean_x) * (x - mean_x);
    sxt += (x - mean_x) * (t - mean_t);
    stt += (t - mean_t) * (t - mean_t);
  }
  if (sxx <= 0.0) throw std::invalid_argument("fit_alpha_beta: sizes have zero variance");

  AlphaBeta ab;
  ab.beta = sxt / sxx;
  ab.alpha = mean_t - ab.beta * mean_x;
  if (ab.alpha < 0.0) {
    double sx2 = 0.0;
    double sxt0 = 0.0;
    for (const auto& [x, t] : samples) {
      sx2 += x * x;
      sxt0 += x * t;
    }
    ab.alpha = 0.0;
    ab.beta = sxt0 / sx2;
    ab.alpha_clamped = true;
  }
  if (!(ab.beta > 0.0)) {
    throw std::invalid_argument(fmt::format("fit_alpha_beta: fitted beta {} is not positive", ab.beta));
  }
  double ss_res = 0.0;
  for (const auto& [x, t] : samples) {
    const double r = t - (ab.alpha + ab.beta * x);
    ss_res += r * r;
  }
  ab.r_squared = stt > 0.0 ? std::clamp(1.0 - ss_res / stt, 0.0, 1.0) : 1.0;
  return ab;
}

double predict_collective(const AlphaBeta& ab, double x) {
  if (x < 0.0) throw std::invalid_argument("predict_collective: negative element count");
  return ab.alpha + ab.beta * x;
}

void CostProfile::set(AlphaBeta entry) {
  if (entry.collective == Collective::Overlap) entry.group = GroupKind::EP_ESP;
  if (entry.alpha < 0.0 || !(entry.beta > 0.0) || !std::isfinite(entry.alpha) || !std::isfinite(entry.beta)) {
    throw std::invalid_argument(
        fmt::format("profile entry {} needs alpha >= 0 and beta > 0", entry_name(entry.collective, entry.group)));
  }
  entries_[{entry.collective, entry.group}] = entry;
}

const AlphaBeta* CostProfile::find(Collective collective, GroupKind group) const {
  if (collective == Collective::Overlap) group = GroupKind::EP_ESP;
  const auto it = entries_.find({collective, group});
  return it == entries_.end() ? nullptr : &it->second;
}

const AlphaBeta& CostProfile::at(Collective collective, GroupKind group) const {
  const AlphaBeta* ab = find(collective, group);
  if (ab == nullptr) {
    throw std::invalid_argument(fmt::format("cost profile is missing {}", entry_name(collective, group)));
  }
  return *ab;
}

std::vector<AlphaBeta> CostProfile::entries() const {
  std::vector<AlphaBeta> out;
  for (const auto& [key, ab] : entries_) out.push_back(ab);
  return out;
}

double cost_baseline(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile) {
  return price_one(v, layout, profile, price_baseline);
}

double cost_fused(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile) {
  return price_one(v, layout, profile, price_fused);
}

double cost_s1(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile) {
  return price_one(v, layout, profile, price_s1);
}

double cost_s2(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile) {
  return price_one(v, layout, profile, price_s2);
}

double cost_baseline(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile) {
  return cost_baseline(schedule_volumes(cfg, layout), layout, profile);
}

double cost_fused(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile) {
  return cost_fused(schedule_volumes(cfg, layout), layout, profile);
}

double cost_s1(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile) {
  return cost_s1(schedule_volumes(cfg, layout), layout, profile);
}

double cost_s2(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile) {
  return cost_s2(schedule_volumes(cfg, layout), layout, profile);
}

CostReport select_schedule(const ScheduleVolumes& v, const ParallelLayout& layout, const CostProfile& profile) {
  check_volumes(v, layout);
  Pricer p(layout, profile);
  CostReport report;
  report.t_B = price_baseline(p, v);
  report.t_D = price_fused(p, v);
  report.t_D1 = price_s1(p, v);
  report.t_D2 = price_s2(p, v);
  p.finish();
  report.terms = p.take_terms();
  report.chosen = report.t_D1 <= report.t_D2 ? ScheduleKind::S1 : ScheduleKind::S2;
  return report;
}

CostReport select_schedule(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile) {
  return select_schedule(schedule_volumes(cfg, layout), layout, profile);
}

CostReport select_schedule_literal(const MoEConfig& cfg, const ParallelLayout& layout, const CostProfile& profile) {
  cfg.validate();
  const ScheduleVolumes v = schedule_volumes(cfg, layout);
  Pricer p(layout, profile);
  CostReport report;
  report.t_B = price_baseline(p, v);
  report.t_D = price_fused(p, v);

  const double x = static_cast<double>(cfg.tokens()) * cfg.M;
  const double t = cfg.k * cfg.f * static_cast<double>(cfg.tokens()) * cfg.M / cfg.E;
  const double y = cfg.E * t * cfg.M * layout.n_esp();
  const double a2a = p.term(Collective::AlltoAll, GroupKind::EP_ESP, y / layout.n_mp(), "literal A2A_EP_ESP");
  report.t_D1 = 2.0 * a2a + p.term(Collective::AllGather, GroupKind::MP, x, "literal AG_MP");
  report.t_D2 = a2a + p.term(Collective::Overlap, GroupKind::EP_ESP, y, "literal OVERLAP");
  p.finish();
  report.terms = p.take_terms();
  report.chosen = report.t_D1 <= report.t_D2 ? ScheduleKind::S1 : ScheduleKind::S2;
  return report;
}

std::vector<std::string> constraint_violations(const CostProfile& profile, double tolerance) {
  std::vector<std::string> failed;
  const AlphaBeta* ag_mp = profile.find(Collective::AllGather, GroupKind::MP);
  const AlphaBeta* a2a_mp = profile.find(Collective::AlltoAll, GroupKind::MP);
  const AlphaBeta* a2a_fused = profile.find(Collective::AlltoAll, GroupKind::EP_ESP);
  const AlphaBeta* a2a_ep = profile.find(Collective::AlltoAll, GroupKind::EP);
  const AlphaBeta* ag_esp = profile.find(Collective::AllGather, GroupKind::ESP);
  const AlphaBeta* rs_esp = profile.find(Collective::ReduceScatter, GroupKind::ESP);
  const AlphaBeta* ar_esp = profile.find(Collective::AllReduce, GroupKind::ESP);
  const AlphaBeta* overlap = profile.find(Collective::Overlap, GroupKind::EP_ESP);
  if (!ag_mp || !a2a_fused || !a2a_ep || !ag_esp || !rs_esp || !ar_esp || !overlap) {
    failed.emplace_back("incomplete profile");
    return failed;
  }
  auto le = [](const AlphaBeta& a, const AlphaBeta& b) { return a.alpha <= b.alpha && a.beta <= b.beta; };
  auto le_sum = [](const AlphaBeta& a, const AlphaBeta& b, const AlphaBeta& c) {
    return a.alpha <= b.alpha + c.alpha && a.beta <= b.beta + c.beta;
  };
  auto close = [tolerance](double a, double b) {
    return std::abs(a - b) <= tolerance * std::max(std::abs(a), std::abs(b));
  };

  if (a2a_mp ? !(le(*ag_mp, *a2a_mp) && le(*a2a_mp, *a2a_fused)) : !le(*ag_mp, *a2a_fused)) {
    failed.emplace_back("AG_MP <= A2A_MP <= A2A_EP_ESP");
  }
  if (!le_sum(*a2a_fused, *ag_esp, *a2a_ep)) failed.emplace_back("A2A_EP_ESP <= AG_ESP + A2A_EP");
  if (!le_sum(*a2a_fused, *rs_esp, *a2a_ep)) failed.emplace_back("A2A_EP_ESP <= RS_ESP + A2A_EP");
  if (!close(ar_esp->alpha, ag_esp->alpha + rs_esp->alpha) || !close(ar_esp->beta, ag_esp->beta + rs_esp->beta)) {
    failed.emplace_back("AR_ESP = AG_ESP + RS_ESP");
  }
  if (!(overlap->beta <= a2a_fused->beta && overlap->alpha + ag_mp->alpha <= a2a_fused->alpha)) {
    failed.emplace_back("OVERLAP + AG_MP startup <= A2A_EP_ESP");
  }
  if (!le(*ag_mp, *ag_esp)) failed.emplace_back("AG_MP <= AG_ESP");
  return failed;
}

FitSamples read_fit_samples(std::istream& in) {
  FitSamples samples;
  for_each_row(in, "collective,group,elements,seconds", 4, [&](int line_no, const std::vector<std::string>& f) {
    const auto key = parse_key(f, line_no);
    const double x = parse_field(f[2], line_no, "elements");
    const double t = parse_field(f[3], line_no, "seconds");
    if (x < 0.0 || t < 0.0) throw std::invalid_argument(fmt::format("line {}: negative value", line_no));
    samples[key].emplace_back(x, t);
  });
  return samples;
}

void write_fit_samples(std::ostream& out, const FitSamples& samples) {
  out << "collective,group,elements,seconds\n";
  for (const auto& [key, points] : samples) {
    for (const auto& [x, t] : points) {
      out << fmt::format("{},{},{},{}\n", to_string(key.first), to_string(key.second), x, t);
    }
  }
}

CostProfile fit_profile(const FitSamples& samples) {
  if (samples.empty()) throw std::invalid_argument("no samples to fit");
  CostProfile profile;
  for (const auto& [key, points] : samples) {
    AlphaBeta ab;
    try {
      ab = fit_alpha_beta(points);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(fmt::format("{}: {}", entry_name(key.first, key.second), e.what()));
    }
    ab.collective = key.first;
    ab.group = key.second;
    profile.set(ab);
  }
  return profile;
}

CostProfile read_profile(std::istream& in) {
  CostProfile profile;
  for_each_row(in, "collective,group,alpha,beta,r_squared", 5, [&](int line_no, const std::vector<std::string>& f) {
    const auto key = parse_key(f, line_no);
    AlphaBeta ab;
    ab.collective = key.first;
    ab.group = key.second;
    ab.alpha = parse_field(f[2], line_no, "alpha");
    ab.beta = parse_field(f[3], line_no, "beta");
    ab.r_squared = parse_field(f[4], line_no, "r_squared");
    try {
      profile.set(ab);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(fmt::format("line {}: {}", line_no, e.what()));
    }
  });
  return profile;
}

void write_profile(std::ostream& out, const CostProfile& profile) {
  out << "collective,group,alpha,beta,r_squared\n";
  for (const auto& ab : profile.entries()) {
    out << fmt::format("{},{},{},{},{}\n", to_string(ab.collective), to_string(ab.group), ab.alpha, ab.beta,
                       ab.r_squared);
  }
}

}  // namespace moesched
