#include "pmpd/schedule.hpp"

#include <algorithm>
#include <limits>

#include "pmpd/errors.hpp"

namespace pmpd::schedule {
namespace {

bool valid_bits(int p) { return (p >= 1 && p <= 8) || p == kFullPrecision; }

std::string fmt_st(int p, int st) { return "st(" + std::to_string(p) + ")=" + std::to_string(st); }

}  // namespace

int PrecisionSchedule::st(int p) const {
  for (std::size_t k = 0; k < precisions.size(); ++k) {
    if (precisions[k] == p) return switch_points.at(k);
  }
  throw InputError("precision " + std::to_string(p) + " is not part of the schedule");
}

PrecisionSchedule PrecisionSchedule::constant(int p, int horizon, int prefill) {
  return {{p}, {0}, prefill == 0 ? p : prefill, horizon, true};
}

PrecisionSchedule PrecisionSchedule::two_level(int high, int low, int switch_point, int horizon,
                                               int prefill) {
  return {{high, low}, {0, switch_point}, prefill == 0 ? high : prefill, horizon, true};
}

int precision_at(const PrecisionSchedule& s, std::size_t i) noexcept {
  int p = s.precisions.empty() ? 0 : s.precisions.front();
  for (std::size_t k = 0; k < s.precisions.size() && k < s.switch_points.size(); ++k) {
    if (s.switch_points[k] >= 0 && static_cast<std::size_t>(s.switch_points[k]) <= i) {
      p = s.precisions[k];
    }
  }
  return p;
}

std::vector<Violation> validate(const PrecisionSchedule& s) {
  std::vector<Violation> out;
  if (s.precisions.empty() || s.precisions.size() != s.switch_points.size()) {
    out.push_back({Violation::Kind::kShape, 0, 0,
                   "schedule needs one switch point per precision (got " +
                       std::to_string(s.precisions.size()) + " precisions, " +
                       std::to_string(s.switch_points.size()) + " switch points)"});
    return out;
  }
  if (s.horizon < 1) {
    out.push_back({Violation::Kind::kShape, 0, 0, "horizon OL must be >= 1"});
  }
  if (!valid_bits(s.prefill)) {
    out.push_back({Violation::Kind::kBits, s.prefill, 0,
                   "prefill precision " + std::to_string(s.prefill) + " is not a valid width"});
  }
  for (std::size_t k = 0; k < s.precisions.size(); ++k) {
    const int p = s.precisions[k];
    if (!valid_bits(p)) {
      out.push_back({Violation::Kind::kBits, p, 0,
                     "precision " + std::to_string(p) + " is not a valid width"});
    }
    if (k > 0 && s.precisions[k - 1] <= p) {
      out.push_back({Violation::Kind::kOrder, s.precisions[k - 1], p,
                     "precisions must be strictly descending"});
    }
    const int st = s.switch_points[k];
    if (st < 0 || st > s.horizon) {
      out.push_back({Violation::Kind::kRange, p, 0,
                     fmt_st(p, st) + " outside [0, " + std::to_string(s.horizon) + "]"});
    }
  }
  for (std::size_t a = 0; a < s.precisions.size(); ++a) {
    for (std::size_t b = 0; b < s.precisions.size(); ++b) {
      const int p = s.precisions[a];
      const int q = s.precisions[b];
      if (p > q && s.switch_points[a] > s.switch_points[b]) {
        out.push_back({Violation::Kind::kPrecedence, p, q,
                       std::to_string(p) + " > " + std::to_string(q) + " but " +
                           fmt_st(p, s.switch_points[a]) + " > " + fmt_st(q, s.switch_points[b])});
      }
    }
  }
  const auto top = std::max_element(s.precisions.begin(), s.precisions.end());
  const int top_st = s.switch_points[static_cast<std::size_t>(top - s.precisions.begin())];
  if (top_st != 0) {
    out.push_back({Violation::Kind::kAnchor, *top, 0,
                   "highest decode precision must start at 0, got " + fmt_st(*top, top_st)});
  }
  return out;
}

std::uint64_t count_schedules(std::uint64_t horizon, std::uint64_t k) {
  if (horizon < 1 || k < 1) throw InputError("count_schedules needs OL >= 1 and k >= 1");
  __extension__ typedef unsigned __int128 u128;
  constexpr u128 kMax = std::numeric_limits<std::uint64_t>::max();
  auto binom = [&](std::uint64_t n, std::uint64_t r) -> std::uint64_t {
    if (r > n) return 0;
    r = std::min(r, n - r);
    u128 c = 1;
    for (std::uint64_t i = 1; i <= r; ++i) {
      // c * (n - r + i) / i stays integral at every step.
      c = c * (n - r + i) / i;
      if (c > kMax) throw OverflowError("binomial coefficient overflows 64 bits");
    }
    return static_cast<std::uint64_t>(c);
  };
  u128 total = 0;
  for (std::uint64_t r = 0; r < k && r <= horizon; ++r) {
    total += static_cast<u128>(binom(horizon, r)) * binom(k - 1, r);
    if (total > kMax) throw OverflowError("schedule count overflows 64 bits");
  }
  return static_cast<std::uint64_t>(total);
}

SwitchGrid SwitchGrid::make(int n, int horizon) {
  if (n < 2) throw ConfigError("switch grid needs N >= 2");
  if (horizon < n - 1) {
    throw ConfigError("horizon " + std::to_string(horizon) + " too short for an N=" +
                      std::to_string(n) + " grid");
  }
  SwitchGrid g{n, horizon, {}};
  const std::int64_t denom = n - 1;
  for (std::int64_t j = 0; j < n; ++j) {
    g.points.push_back(static_cast<int>((2 * j * horizon + denom) / (2 * denom)));
  }
  return g;
}

double avg_bitwidth(std::span<const int> decode_bits) {
  if (decode_bits.empty()) throw InputError("average bitwidth of zero decode steps");
  std::int64_t sum = 0;
  for (int b : decode_bits) sum += b;
  return static_cast<double>(sum) / static_cast<double>(decode_bits.size());
}

double avg_bitwidth(const PrecisionSchedule& s, std::size_t tokens_generated) {
  if (tokens_generated == 0) throw InputError("average bitwidth of zero decode steps");
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < tokens_generated; ++i) sum += precision_at(s, i);
  return static_cast<double>(sum) / static_cast<double>(tokens_generated);
}

std::int64_t bit_token_sum(const PrecisionSchedule& s) {
  std::int64_t sum = 0;
  for (int i = 0; i < s.horizon; ++i) sum += precision_at(s, static_cast<std::size_t>(i));
  return sum;
}

}  // namespace pmpd::schedule
