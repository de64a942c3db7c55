#include "pmpd/solver.hpp"

#include <algorithm>
#include <cmath>

#include "pmpd/errors.hpp"
#include "pmpd/metrics.hpp"
#include "pmpd/util.hpp"

namespace pmpd::schedule {
namespace {

void check_precisions(std::span<const int> precisions) {
  if (precisions.empty()) throw ConfigError("schedule needs at least one decode precision");
  for (std::size_t k = 1; k < precisions.size(); ++k) {
    if (precisions[k - 1] <= precisions[k]) {
      throw ConfigError("decode precisions must be strictly descending");
    }
  }
}

// Lower (bit-token sum, switch points) wins among feasible candidates.
bool better(const PrecisionSchedule& a, std::int64_t a_bits, const PrecisionSchedule& b,
            std::int64_t b_bits) {
  if (a_bits != b_bits) return a_bits < b_bits;
  return a.switch_points < b.switch_points;
}

PrecisionSchedule all_high(std::span<const int> precisions, int prefill, int horizon) {
  PrecisionSchedule s;
  s.precisions.assign(precisions.begin(), precisions.end());
  s.switch_points.assign(precisions.size(), horizon);
  s.switch_points[0] = 0;
  s.prefill = prefill;
  s.horizon = horizon;
  return s;
}

}  // namespace

void QualityTarget::validate() const {
  if (!std::isfinite(q_ref)) throw ConfigError("q_ref must be finite");
  if (std::isnan(epsilon) || epsilon < 0.0) throw ConfigError("epsilon must be >= 0");
}

std::vector<PrecisionSchedule> enumerate_schedules(std::span<const int> precisions, int prefill,
                                                   std::span<const int> points, int horizon) {
  check_precisions(precisions);
  std::vector<int> pts(points.begin(), points.end());
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());

  std::vector<PrecisionSchedule> out;
  PrecisionSchedule current = all_high(precisions, prefill, horizon);
  // Switch points of the lower precisions form a non-decreasing tuple over pts.
  auto recurse = [&](auto&& self, std::size_t slot, std::size_t min_index) -> void {
    if (slot == precisions.size()) {
      out.push_back(current);
      return;
    }
    for (std::size_t j = min_index; j < pts.size(); ++j) {
      current.switch_points[slot] = pts[j];
      self(self, slot + 1, j);
    }
  };
  recurse(recurse, 1, 0);
  return out;
}

SolveReport solve_static(std::span<const int> precisions, int prefill, const SwitchGrid& grid,
                         const QualityTarget& target, const ScheduleQuality& quality,
                         unsigned threads) {
  target.validate();
  SolveReport report;
  auto candidates = enumerate_schedules(precisions, prefill, grid.points, grid.horizon);
  report.candidates.resize(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t i) {
    auto& c = report.candidates[i];
    c.schedule = candidates[i];
    c.quality = quality(c.schedule);
    c.avg_bits = static_cast<double>(bit_token_sum(c.schedule)) / grid.horizon;
    c.feasible = c.quality >= target.floor();
    c.schedule.feasible = c.feasible;
  });

  const EvaluatedSchedule* best = nullptr;
  std::int64_t best_bits = 0;
  for (const auto& c : report.candidates) {
    if (!c.feasible) continue;
    const std::int64_t bits = bit_token_sum(c.schedule);
    if (!best || better(c.schedule, bits, best->schedule, best_bits)) {
      best = &c;
      best_bits = bits;
    }
  }
  if (best) {
    report.schedule = best->schedule;
    report.quality = best->quality;
    report.avg_bits = best->avg_bits;
    return report;
  }
  report.schedule = all_high(precisions, prefill, grid.horizon);
  report.schedule.feasible = false;
  for (const auto& c : report.candidates) {
    if (c.schedule.switch_points == report.schedule.switch_points) report.quality = c.quality;
  }
  report.avg_bits = static_cast<double>(bit_token_sum(report.schedule)) / grid.horizon;
  return report;
}

SolveReport brute_force_best(std::span<const int> precisions, int prefill, int horizon,
                             const QualityTarget& target, const ScheduleQuality& quality) {
  target.validate();
  check_precisions(precisions);
  if (horizon < 1 || horizon > 16 || precisions.size() > 3) {
    throw ConfigError("brute force refused: needs 1 <= OL <= 16 and at most 3 precisions");
  }
  const std::size_t k = precisions.size();

  // Walk every per-token precision sequence that never increases, then read
  // the switch points back off the sequence.
  SolveReport report;
  std::vector<std::size_t> seq(static_cast<std::size_t>(horizon));
  const EvaluatedSchedule* best = nullptr;
  std::int64_t best_bits = 0;
  auto visit = [&] {
    PrecisionSchedule s;
    s.precisions.assign(precisions.begin(), precisions.end());
    s.prefill = prefill;
    s.horizon = horizon;
    std::int64_t bits = 0;
    for (std::size_t i = 0; i < seq.size(); ++i) bits += precisions[seq[i]];
    for (std::size_t slot = 0; slot < k; ++slot) {
      int st = horizon;
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] >= slot) {
          st = static_cast<int>(i);
          break;
        }
      }
      s.switch_points.push_back(slot == 0 ? 0 : st);
    }
    EvaluatedSchedule e{s, quality(s), static_cast<double>(bits) / horizon, false};
    e.feasible = e.quality >= target.floor();
    e.schedule.feasible = e.feasible;
    report.candidates.push_back(std::move(e));
  };
  auto recurse = [&](auto&& self, std::size_t i, std::size_t min_slot) -> void {
    if (i == seq.size()) {
      visit();
      return;
    }
    for (std::size_t slot = min_slot; slot < k; ++slot) {
      seq[i] = slot;
      self(self, i + 1, slot);
    }
  };
  recurse(recurse, 0, 0);

  for (const auto& c : report.candidates) {
    if (!c.feasible) continue;
    const auto bits = static_cast<std::int64_t>(std::llround(c.avg_bits * horizon));
    if (!best || bits < best_bits ||
        (bits == best_bits && c.schedule.switch_points < best->schedule.switch_points)) {
      best = &c;
      best_bits = bits;
    }
  }
  if (best) {
    report.schedule = best->schedule;
    report.quality = best->quality;
    report.avg_bits = best->avg_bits;
  } else {
    report.schedule = all_high(precisions, prefill, horizon);
    report.schedule.feasible = false;
    report.avg_bits = precisions[0];
    for (const auto& c : report.candidates) {
      if (c.schedule.switch_points == report.schedule.switch_points) report.quality = c.quality;
    }
  }
  return report;
}

CalibrationReport allocate_phase_precisions(const quant::PrecisionSet& precisions,
                                            const QualityTarget& target,
                                            const PairQuality& quality) {
  target.validate();
  CalibrationReport report;
  report.target = target;
  std::vector<int> ascending(precisions.bits().rbegin(), precisions.bits().rend());
  for (int decode : ascending) {
    for (int prefill : ascending) {
      if (prefill < decode) continue;
      PairResult r{prefill, decode, quality(prefill, decode), false};
      r.qualifies = r.quality >= target.floor();
      report.table.push_back(r);
    }
  }
  // Table order is (decode, prefill) ascending, so the first qualifying entry wins.
  for (const auto& r : report.table) {
    if (r.qualifies) {
      report.prefill = r.prefill;
      report.decode = r.decode;
      report.chosen_quality = r.quality;
      return report;
    }
  }
  report.prefill = report.decode = precisions.max();
  report.fallback = true;
  for (const auto& r : report.table) {
    if (r.prefill == report.prefill && r.decode == report.decode) report.chosen_quality = r.quality;
  }
  return report;
}

ModelQualityEvaluator::ModelQualityEvaluator(const lm::ModelVariants& model,
                                             std::vector<std::vector<lm::Token>> prompts,
                                             lm::GenerationSettings settings, int horizon,
                                             unsigned threads)
    : model_(model), prompts_(std::move(prompts)), settings_(settings), horizon_(horizon),
      threads_(threads),
      reference_precision_(model.has_reference() ? kFullPrecision : model.p_max()) {
  if (prompts_.empty()) throw InputError("evaluation prompt set is empty");
  references_ = generate_all(PrecisionSchedule::constant(reference_precision_, horizon_));
  for (std::size_t i = 0; i < references_.size(); ++i) {
    const auto& out = references_[i].output;
    const bool empty = std::all_of(out.begin(), out.end(),
                                   [&](lm::Token t) { return t == settings_.eos; });
    if (!empty) scored_.push_back(i);
  }
}

std::vector<lm::GenerationTrace> ModelQualityEvaluator::generate_all(
    const PrecisionSchedule& s) const {
  const lm::StaticScheduler scheduler(s);
  std::vector<lm::GenerationTrace> traces(prompts_.size());
  parallel_for(prompts_.size(), threads_, [&](std::size_t i) {
    traces[i] = lm::generate(model_, prompts_[i], scheduler, settings_);
  });
  return traces;
}

double ModelQualityEvaluator::quality(const PrecisionSchedule& s) const {
  if (scored_.empty()) return 0.0;
  const auto traces = generate_all(s);
  double sum = 0.0;
  for (std::size_t i : scored_) sum += metrics::fidelity(traces[i], references_[i]);
  return sum / static_cast<double>(scored_.size());
}

double ModelQualityEvaluator::pair_quality(int prefill, int decode) const {
  return quality(PrecisionSchedule::constant(decode, horizon_, prefill));
}

}  // namespace pmpd::schedule
