#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace pmpd::lm {
struct GenerationTrace;
}

namespace pmpd::metrics {

using Token = std::int32_t;

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Longest common subsequence length; O(|a||b|) time, O(min(|a|,|b|)) space.
std::size_t lcs_len(std::span<const Token> a, std::span<const Token> b);

/// Token-level Rouge-L with plain F1; empty denominators yield 0.
RougeScore rouge_l(std::span<const Token> candidate, std::span<const Token> reference);

/// Rouge-L F1 of an output trace against a reference trace of the same prompt.
/// Throws InputError when the prompts differ.
double fidelity(const lm::GenerationTrace& output, const lm::GenerationTrace& reference);

}  // namespace pmpd::metrics
