#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pmpd/quant.hpp"
#include "pmpd/schedule.hpp"
#include "pmpd/tinylm.hpp"

namespace pmpd::schedule {

struct QualityTarget {
  double q_ref = 1.0;
  double epsilon = 0.0;  // may be +infinity
  std::string metric = "rouge-l-f1";

  double floor() const noexcept { return q_ref - epsilon; }
  /// Throws ConfigError when epsilon < 0 or q_ref is not finite.
  void validate() const;
};

/// Mean quality of a schedule; any deterministic function works (tests use synthetic ones).
using ScheduleQuality = std::function<double(const PrecisionSchedule&)>;
/// Mean quality of a (prefill, decode) precision pair.
using PairQuality = std::function<double(int prefill, int decode)>;

struct EvaluatedSchedule {
  PrecisionSchedule schedule;
  double quality = 0.0;
  double avg_bits = 0.0;
  bool feasible = false;
};

struct SolveReport {
  PrecisionSchedule schedule;  // schedule.feasible is false for the all-high fallback
  double quality = 0.0;
  double avg_bits = 0.0;
  std::vector<EvaluatedSchedule> candidates;  // every schedule examined, enumeration order
};

/// All precedence-respecting schedules whose switch points come from `points`
/// (st(highest) fixed at 0). Order: lexicographic in the switch-point tuple.
std::vector<PrecisionSchedule> enumerate_schedules(std::span<const int> precisions, int prefill,
                                                   std::span<const int> points, int horizon);

/// Grid-restricted offline search: the feasible schedule (quality >= q_ref - eps)
/// minimizing the bit-token sum over the horizon, ties broken by earlier switch
/// points for higher precisions. Infeasible => all-high schedule, feasible=false.
/// Evaluations may run on `threads` workers; the choice does not depend on it.
SolveReport solve_static(std::span<const int> precisions, int prefill, const SwitchGrid& grid,
                         const QualityTarget& target, const ScheduleQuality& quality,
                         unsigned threads = 1);

/// Exact optimum over every integer switch point in [0, horizon]. Refuses
/// (ConfigError) when horizon > 16 or more than 3 precisions.
SolveReport brute_force_best(std::span<const int> precisions, int prefill, int horizon,
                             const QualityTarget& target, const ScheduleQuality& quality);

struct PairResult {
  int prefill = 0;
  int decode = 0;
  double quality = 0.0;
  bool qualifies = false;
};

struct CalibrationReport {
  std::vector<PairResult> table;
  int prefill = 0;
  int decode = 0;
  bool fallback = false;
  double chosen_quality = 0.0;
  QualityTarget target;
  std::size_t prompts = 0;
  std::size_t skipped_prompts = 0;
};

/// Phase-aware allocation: among pairs with prefill >= decode, both in the set,
/// the qualifying pair with the smallest decode precision, then smallest prefill.
/// No qualifying pair => (p_max, p_max) with fallback set.
CalibrationReport allocate_phase_precisions(const quant::PrecisionSet& precisions,
                                            const QualityTarget& target,
                                            const PairQuality& quality);

/// Scores generations from a model against full-precision greedy references.
/// References come from the unquantized weights when the model stores them,
/// otherwise from p_max (reference_precision() reports which).
class ModelQualityEvaluator {
 public:
  /// Throws InputError for an empty prompt list.
  ModelQualityEvaluator(const lm::ModelVariants& model, std::vector<std::vector<lm::Token>> prompts,
                        lm::GenerationSettings settings, int horizon, unsigned threads = 1);

  /// Arithmetic mean of fidelity over prompts with a non-empty reference.
  double quality(const PrecisionSchedule& s) const;
  double pair_quality(int prefill, int decode) const;
  std::vector<lm::GenerationTrace> generate_all(const PrecisionSchedule& s) const;

  const std::vector<lm::GenerationTrace>& references() const noexcept { return references_; }
  std::size_t prompts() const noexcept { return prompts_.size(); }
  std::size_t skipped() const noexcept { return prompts_.size() - scored_.size(); }
  int reference_precision() const noexcept { return reference_precision_; }
  int horizon() const noexcept { return horizon_; }

 private:
  const lm::ModelVariants& model_;
  std::vector<std::vector<lm::Token>> prompts_;
  lm::GenerationSettings settings_;
  int horizon_;
  unsigned threads_;
  int reference_precision_;
  std::vector<lm::GenerationTrace> references_;
  std::vector<std::size_t> scored_;
};

}  // namespace pmpd::schedule
