#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pmpd::schedule {

/// Sentinel bit width for the unquantized (full real precision) weights.
inline constexpr int kFullPrecision = 16;

/// Switch points st(p) for a descending set of decode precisions.
///
/// Decode step i (the i-th token produced after the prefill token) runs at
/// the lowest precision p whose switch point satisfies st(p) <= i.
/// st(p) == horizon means p is never used.
struct PrecisionSchedule {
  std::vector<int> precisions;     // descending decode precisions
  std::vector<int> switch_points;  // st(precisions[k])
  int prefill = 0;
  int horizon = 0;  // OL
  bool feasible = true;

  /// Throws InputError if p is not one of the decode precisions.
  int st(int p) const;
  int highest() const { return precisions.front(); }
  int lowest() const { return precisions.back(); }

  static PrecisionSchedule constant(int p, int horizon, int prefill = 0);
  static PrecisionSchedule two_level(int high, int low, int switch_point, int horizon,
                                     int prefill = 0);

  bool operator==(const PrecisionSchedule&) const = default;
};

/// Lowest precision whose switch point has been reached at decode step i.
/// O(|precisions|), no allocation.
int precision_at(const PrecisionSchedule& s, std::size_t i) noexcept;

struct Violation {
  enum class Kind { kShape, kBits, kOrder, kRange, kPrecedence, kAnchor };
  Kind kind;
  int p = 0;
  int q = 0;
  std::string message;
};

/// Every violated constraint: range 0 <= st(p) <= OL, precedence
/// p > q => st(p) <= st(q), st(highest) == 0, plus structural checks. Never throws.
std::vector<Violation> validate(const PrecisionSchedule& s);

/// Number of precedence-respecting schedules, sum_{r=0}^{k-1} C(OL, r) C(k-1, r).
/// Throws OverflowError when the count does not fit in 64 bits.
std::uint64_t count_schedules(std::uint64_t horizon, std::uint64_t k);

/// Candidate switch points {0, OL/(N-1), ..., OL}, rounded half up to integers.
struct SwitchGrid {
  int n = 0;
  int horizon = 0;
  std::vector<int> points;

  /// Throws ConfigError unless n >= 2 and horizon >= n - 1 (points must be distinct).
  static SwitchGrid make(int n, int horizon);
};

/// Mean bits per decode step. Throws InputError on an empty sequence.
double avg_bitwidth(std::span<const int> decode_bits);
/// Mean bits over the first `tokens_generated` decode steps of a schedule.
double avg_bitwidth(const PrecisionSchedule& s, std::size_t tokens_generated);

/// Sum of bits over decode steps [0, horizon); the integer form of the objective.
std::int64_t bit_token_sum(const PrecisionSchedule& s);

}  // namespace pmpd::schedule
