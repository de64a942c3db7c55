#include "pmpd/metrics.hpp"

#include <algorithm>
#include <vector>

#include "pmpd/errors.hpp"
#include "pmpd/tinylm.hpp"

namespace pmpd::metrics {

std::size_t lcs_len(std::span<const Token> a, std::span<const Token> b) {
  if (a.size() < b.size()) std::swap(a, b);
  // Single rolling row over the shorter sequence.
  std::vector<std::size_t> row(b.size() + 1, 0);
  for (Token x : a) {
    std::size_t diag = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = x == b[j - 1] ? diag + 1 : std::max(up, row[j - 1]);
      diag = up;
    }
  }
  return row.back();
}

RougeScore rouge_l(std::span<const Token> candidate, std::span<const Token> reference) {
  const auto lcs = static_cast<double>(lcs_len(candidate, reference));
  RougeScore s;
  s.precision = candidate.empty() ? 0.0 : lcs / static_cast<double>(candidate.size());
  s.recall = reference.empty() ? 0.0 : lcs / static_cast<double>(reference.size());
  const double denom = s.precision + s.recall;
  s.f1 = denom == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / denom;
  return s;
}

double fidelity(const lm::GenerationTrace& output, const lm::GenerationTrace& reference) {
  if (output.prompt != reference.prompt) {
    throw InputError("fidelity: output and reference traces come from different prompts");
  }
  return rouge_l(output.output, reference.output).f1;
}

}  // namespace pmpd::metrics
