#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pmpd/errors.hpp"
#include "pmpd/tinylm.hpp"
#include "support.hpp"

using namespace pmpd;
using namespace pmpd::lm;
using schedule::PrecisionSchedule;

namespace {

const ModelVariants& model() {
  static const auto m = ModelVariants::random(testsupport::small_config(), 42, 4, 8, true);
  return m;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

class FixedPlan final : public PrecisionScheduler {
 public:
  explicit FixedPlan(PrecisionSchedule s, int prefill) : s_(std::move(s)), prefill_(prefill) {}
  int prefill_precision() const override { return prefill_; }
  int horizon() const override { return s_.horizon; }
  PrecisionSchedule plan(const KVCache&) const override { return s_; }

 private:
  PrecisionSchedule s_;
  int prefill_;
};

GenerationSettings settings(int max_new, Token eos = 1000) {
  GenerationSettings gs;
  gs.max_new = max_new;
  gs.eos = eos;
  return gs;
}

}  // namespace

TEST(ModelConfig, ValidationAndJson) {
  auto c = testsupport::small_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
  auto bad = c;
  bad.n_heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.vocab_size = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.max_context = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(ModelVariants, SupportsAndDeterministicWeights) {
  const auto& m = model();
  EXPECT_EQ(m.p_max(), 4);
  EXPECT_TRUE(m.supports(1));
  EXPECT_TRUE(m.supports(4));
  EXPECT_FALSE(m.supports(5));
  EXPECT_TRUE(m.supports(kFullPrecision));
  const auto again = ModelVariants::random(testsupport::small_config(), 42, 4, 8, true);
  EXPECT_EQ(again.archive(), m.archive());
  const auto plain = ModelVariants::random(testsupport::small_config(), 42, 4, 8, false);
  EXPECT_FALSE(plain.supports(kFullPrecision));
  EXPECT_THROW(plain.weights("layers.0.wq", kFullPrecision), ConfigError);
}

TEST(ModelVariants, PrecisionCacheStaysWithinBudget) {
  auto archive = model().archive();
  const auto small = ModelVariants::from_archive(archive, 4096);
  for (int p = 1; p <= 4; ++p) (void)prefill(small, p, std::vector<Token>{1, 2, 3});
  EXPECT_LE(small.cache_bytes(), 4096u);
}

TEST(Forward, IncrementalMatchesFullAtEveryPrecision) {
  const std::vector<Token> seq{3, 1, 4, 1, 5, 9, 2, 6, 5, 3};
  for (int p : {1, 2, 3, 4, kFullPrecision}) {
    const auto full = forward_full(model(), p, seq);
    auto pre = prefill(model(), p, std::span(seq).first(3));
    for (std::size_t j = 0; j < 3; ++j) {
      ASSERT_LT(rel_err(pre.logits[j], full.logits.row(2)[j]), 1e-9);
    }
    for (std::size_t t = 3; t < seq.size(); ++t) {
      const auto logits = decode_step(model(), p, seq[t], pre.cache);
      EXPECT_EQ(pre.cache.length(), t + 1);
      const auto ref = full.logits.row(t);
      for (std::size_t j = 0; j < logits.size(); ++j) ASSERT_LT(rel_err(logits[j], ref[j]), 1e-9);
    }
  }
}

TEST(Forward, PrefillIsDeterministicAndSetsCacheLength) {
  const std::vector<Token> prompt{7, 8, 9, 10};
  const auto a = prefill(model(), 3, prompt);
  const auto b = prefill(model(), 3, prompt);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_EQ(a.cache.length(), prompt.size());
  EXPECT_EQ(a.cache.n_layers(), 2);
  EXPECT_EQ(a.cache.width(), 16);
}

TEST(Forward, PrecisionChangesLogits) {
  const std::vector<Token> prompt{2, 4, 6};
  auto a = prefill(model(), 4, prompt);
  auto b = a;
  EXPECT_NE(decode_step(model(), 4, 5, a.cache), decode_step(model(), 2, 5, b.cache));
}

TEST(Forward, AttentionRowsSumToOne) {
  ForwardHooks hooks;
  std::size_t rows = 0;
  hooks.on_attention = [&](int, int, std::size_t pos, std::span<const double> probs) {
    EXPECT_EQ(probs.size(), pos + 1);
    EXPECT_NEAR(std::accumulate(probs.begin(), probs.end(), 0.0), 1.0, 1e-6);
    ++rows;
  };
  auto pre = prefill(model(), 2, std::vector<Token>{1, 2, 3, 4, 5}, &hooks);
  (void)decode_step(model(), 2, 6, pre.cache, &hooks);
  // 2 layers x 2 heads x (5 prefill + 1 decode) positions
  EXPECT_EQ(rows, 24u);
}

TEST(Forward, Errors) {
  EXPECT_THROW(prefill(model(), 4, std::vector<Token>{}), InputError);
  EXPECT_THROW(prefill(model(), 4, std::vector<Token>{19}), InputError);
  EXPECT_THROW(prefill(model(), 4, std::vector<Token>(48, 1)), LengthError);
  EXPECT_THROW(prefill(model(), 6, std::vector<Token>{1}), ConfigError);
  auto pre = prefill(model(), 4, std::vector<Token>(47, 1));
  (void)decode_step(model(), 4, 1, pre.cache);
  EXPECT_THROW(decode_step(model(), 4, 1, pre.cache), LengthError);
}

TEST(Sampler, Examples) {
  EXPECT_EQ(greedy(std::vector<double>{0.1, 2.0, -1.0}), 1);
  EXPECT_EQ(greedy(std::vector<double>{3.0, 3.0}), 0);
  EXPECT_THROW(greedy(std::vector<double>{1.0, NAN}), ValueError);
  SamplerConfig cfg{SamplerConfig::Mode::kTemperature, 0.7, 99};
  const std::vector<double> logits{0.5, 0.2, 0.1, 0.4};
  Sampler a(cfg), b(cfg);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(a.sample(logits), b.sample(logits));
  cfg.temperature = 0.0;
  EXPECT_THROW(Sampler{cfg}, ConfigError);
}

TEST(Sampler, TemperatureFrequenciesFollowSoftmax) {
  SamplerConfig cfg{SamplerConfig::Mode::kTemperature, 1.0, 5};
  Sampler s(cfg);
  const std::vector<double> logits{0.0, std::log(3.0)};
  int ones = 0;
  for (int i = 0; i < 20000; ++i) ones += s.sample(logits) == 1;
  EXPECT_NEAR(ones / 20000.0, 0.75, 0.02);
}

TEST(Generate, ConstantScheduleMatchesUniformBaseline) {
  const std::vector<Token> prompt{1, 2, 3};
  const StaticScheduler a(PrecisionSchedule::constant(4, 10));
  const auto t = generate(model(), prompt, a, settings(10));
  EXPECT_EQ(t.output.size(), 11u);
  EXPECT_EQ(t.termination, Termination::kLength);
  EXPECT_EQ(t.precisions, std::vector<int>(11, 4));

  // Same thing by hand: prefill, then greedy decode at 4 bits.
  auto pre = prefill(model(), 4, prompt);
  std::vector<Token> out{greedy(pre.logits)};
  for (int i = 0; i < 10; ++i) out.push_back(greedy(decode_step(model(), 4, out.back(), pre.cache)));
  EXPECT_EQ(t.output, out);
}

TEST(Generate, TwoLevelTracePrecisions) {
  const StaticScheduler s(PrecisionSchedule::two_level(4, 2, 3, 8, 4));
  const auto t = generate(model(), std::vector<Token>{5, 6}, s, settings(6));
  EXPECT_EQ(t.precisions, (std::vector<int>{4, 4, 4, 4, 2, 2, 2}));
  const auto d = t.decode_precisions();
  EXPECT_EQ(std::vector<int>(d.begin(), d.end()), (std::vector<int>{4, 4, 4, 2, 2, 2}));
  EXPECT_EQ(t.logits_hash.size(), t.output.size());
}

TEST(Generate, StopsAtEos) {
  const std::vector<Token> prompt{9, 8, 7};
  const StaticScheduler s(PrecisionSchedule::constant(3, 12));
  const auto free_run = generate(model(), prompt, s, settings(12));
  const Token eos = free_run.output[4];
  const auto k = static_cast<std::size_t>(
      std::find(free_run.output.begin(), free_run.output.end(), eos) - free_run.output.begin());
  const auto t = generate(model(), prompt, s, settings(12, eos));
  EXPECT_EQ(t.termination, Termination::kEos);
  EXPECT_EQ(t.output.size(), k + 1);
  EXPECT_EQ(t.output.back(), eos);
}

TEST(Generate, DeterministicAndRejectsBadInput) {
  const std::vector<Token> prompt{1, 1, 2};
  const StaticScheduler s(PrecisionSchedule::two_level(4, 3, 2, 8));
  EXPECT_EQ(generate(model(), prompt, s, settings(8)), generate(model(), prompt, s, settings(8)));
  EXPECT_THROW(generate(model(), prompt, s, settings(9)), ConfigError);

  const auto plain = ModelVariants::random(testsupport::small_config(), 42, 4, 8, false);
  const FixedPlan too_high(PrecisionSchedule::constant(5, 8), 4);
  EXPECT_THROW(generate(plain, prompt, too_high, settings(4)), ContractViolation);
  const FixedPlan bad_prefill(PrecisionSchedule::constant(4, 8), 6);
  EXPECT_THROW(generate(plain, prompt, bad_prefill, settings(4)), ContractViolation);
  const FixedPlan broken(PrecisionSchedule{{4, 3}, {2, 1}, 4, 8}, 4);
  EXPECT_THROW(generate(plain, prompt, broken, settings(4)), ContractViolation);
  EXPECT_THROW(StaticScheduler(PrecisionSchedule{{4, 3}, {2, 1}, 4, 8}), ConfigError);
}

TEST(Tokenizer, ByteLevelRoundTrip) {
  const auto t = Tokenizer::byte_level();
  EXPECT_EQ(t.vocab_size(), 257);
  EXPECT_EQ(t.eos(), 256);
  const auto ids = t.encode("hi!");
  EXPECT_EQ(ids, (std::vector<Token>{'h', 'i', '!'}));
  EXPECT_EQ(t.decode(ids), "hi!");
  auto with_eos = ids;
  with_eos.push_back(256);
  EXPECT_EQ(t.decode(with_eos), "hi!");
}

TEST(Tokenizer, VocabularyLongestMatch) {
  const auto t = Tokenizer::from_json(
      {{"tokens", {"<eos>", "a", "b", "ab", "abc"}}, {"eos", 0}});
  EXPECT_EQ(t.encode("abcab"), (std::vector<Token>{4, 3}));
  EXPECT_EQ(t.decode(std::vector<Token>{4, 0, 1}), "abca");
  EXPECT_THROW(t.encode("abx"), InputError);
  EXPECT_THROW(Tokenizer::from_json({{"tokens", {"a"}}, {"eos", 0}}), InputError);
}

TEST(KVCache, AppendChecksWidth) {
  KVCache c(2, 4);
  const std::vector<double> row(4, 1.0), bad(3, 1.0);
  c.append(0, row, row);
  c.append(1, row, row);
  EXPECT_EQ(c.length(), 1u);
  EXPECT_THROW(c.append(0, bad, row), ConfigError);
}
