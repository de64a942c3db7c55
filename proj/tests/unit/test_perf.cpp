#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "pmpd/errors.hpp"
#include "pmpd/perf.hpp"

using namespace pmpd;
using namespace pmpd::perf;
using schedule::PrecisionSchedule;

namespace {

constexpr PerfOptions kWeightsOnly{false, false, false};

// One 1.4e9-parameter matrix and nothing else.
ModelFootprint bare(std::int64_t params) {
  ModelFootprint fp;
  fp.name = "bare";
  fp.n_layers = 1;
  fp.matrices = {{"w", MatrixShape::Kind::kMlp, params / 1000, 1000, 1}};
  fp.kv_bytes_per_token_layer = 0;
  return fp;
}

}  // namespace

TEST(Hardware, PresetsAndJson) {
  const auto hw = HardwareConfig::npu_16k();
  EXPECT_EQ(hw.mac_units, 16384);
  EXPECT_EQ(hw.clock_hz, 1e9);
  EXPECT_EQ(hw.mem_bw_bytes_per_s, 32e9);
  const auto back = HardwareConfig::from_json(hw.to_json());
  EXPECT_EQ(back.mac_units, hw.mac_units);
  EXPECT_EQ(back.overlap, hw.overlap);
  auto j = hw.to_json();
  j["mem_bw_bytes_per_s"] = -1;
  EXPECT_ANY_THROW(HardwareConfig::from_json(j));
}

TEST(Footprint, PartsSumToTotal) {
  const auto fp = ModelFootprint::vicuna_7b();
  EXPECT_EQ(fp.linear_params(),
            fp.attention_params_per_layer() * 32 + fp.mlp_params_per_layer() * 32 + fp.head_params());
  EXPECT_EQ(fp.total_params(), fp.linear_params() + fp.embedding_params + fp.norm_params);
  EXPECT_EQ(fp.attention_params_per_layer(), 4LL * 4096 * 4096);
  EXPECT_EQ(fp.mlp_params_per_layer(), 3LL * 4096 * 11008);
  // Roughly 6.7e9 parameters
  EXPECT_NEAR(fp.total_params() / 1e9, 6.74, 0.01);
  EXPECT_NEAR(ModelFootprint::mobilellama_1_4b().total_params() / 1e9, 1.36, 0.01);
  EXPECT_THROW(ModelFootprint::preset("gpt-9"), ConfigError);
}

TEST(Footprint, GroupsAndMetadata) {
  const auto toy = ModelFootprint::from_model_config(lm::ModelConfig{}, 64);
  // q/k/v/o: 128 rows x 2 groups; gate/up: 256 x 2; down: 128 x 4; head: 257 x 2
  const std::int64_t per_layer = 4 * 128 * 2 + 2 * 256 * 2 + 128 * 4;
  EXPECT_EQ(toy.quant_groups(), 4 * per_layer + 257 * 2);
  const double meta = toy.quant_groups() * 8.0;
  EXPECT_DOUBLE_EQ(weight_bytes(toy, 4) - weight_bytes(toy, 4, kWeightsOnly), meta);
  EXPECT_DOUBLE_EQ(weight_bytes(toy, 16), weight_bytes(toy, 16, kWeightsOnly));
}

TEST(DecodeLatency, BandwidthRatioIsEight) {
  const auto fp = bare(1'400'000'000);
  const auto hw = HardwareConfig::npu_4k();
  EXPECT_DOUBLE_EQ(decode_token_latency(fp, 16, hw, 0, kWeightsOnly) /
                       decode_token_latency(fp, 2, hw, 0, kWeightsOnly),
                   8.0);
  const auto v = ModelFootprint::vicuna_7b();
  for (int b : {2, 3, 4, 8}) {
    const double ratio = decode_token_latency(v, 16, hw, 0, kWeightsOnly) /
                         decode_token_latency(v, b, hw, 0, kWeightsOnly);
    EXPECT_NEAR(ratio / (16.0 / b), 1.0, 0.01);
  }
}

TEST(DecodeLatency, MobileScaleMemoryBoundRate) {
  // 1.4e9 params * 2 bits = 0.35 GB per token at 32 GB/s
  const auto t = decode_token_latency(bare(1'400'000'000), 2, HardwareConfig::npu_4k(), 0, kWeightsOnly);
  EXPECT_NEAR(1.0 / t, 32e9 / 0.35e9, 1e-9);
  EXPECT_NEAR(1.0 / t, 91.43, 0.01);
}

TEST(DecodeLatency, MobileFootprintAboveFiftyTokensPerSecond) {
  const auto fp = ModelFootprint::mobilellama_1_4b();
  for (int b : {2, 3}) {
    const auto r = pipeline_perf(fp, PrecisionSchedule::constant(b, 256), HardwareConfig::npu_4k(), 512, 256);
    EXPECT_GT(r.tokens_per_s, 50.0) << b;
  }
}

TEST(DecodeLatency, RooflineBounds) {
  const auto fp = ModelFootprint::vicuna_7b();
  for (bool overlap : {true, false}) {
    auto hw = HardwareConfig::npu_16k();
    hw.overlap = overlap;
    for (int p : {2, 3, 16}) {
      const auto parts = decode_token_parts(fp, p, hw, 300);
      EXPECT_GE(parts.total_s, parts.compute_s);
      EXPECT_GE(parts.total_s, parts.memory_s);
      EXPECT_DOUBLE_EQ(parts.total_s,
                       overlap ? std::max(parts.compute_s, parts.memory_s) : parts.compute_s + parts.memory_s);
      EXPECT_DOUBLE_EQ(parts.compute_s, 2.0 * fp.linear_params() / (16384 * 1e9));
    }
  }
}

TEST(DecodeLatency, BandwidthScaling) {
  const auto fp = ModelFootprint::vicuna_7b();
  auto hw = HardwareConfig::npu_4k();
  const double base = decode_token_parts(fp, 3, hw, 100).memory_s;
  hw.mem_bw_bytes_per_s *= 2;
  EXPECT_DOUBLE_EQ(decode_token_parts(fp, 3, hw, 100).memory_s, base / 2);
}

TEST(DecodeLatency, MonotoneInPrecisionAndContext) {
  const auto fp = ModelFootprint::mobilellama_1_4b();
  const auto hw = HardwareConfig::npu_4k();
  for (int p = 1; p < 8; ++p) {
    EXPECT_LT(decode_token_latency(fp, p, hw, 10), decode_token_latency(fp, p + 1, hw, 10));
  }
  EXPECT_LT(decode_token_latency(fp, 8, hw, 10), decode_token_latency(fp, 16, hw, 10));
  EXPECT_LT(decode_token_latency(fp, 3, hw, 10), decode_token_latency(fp, 3, hw, 1000));
  // KV traffic: (context + 1) rows of 2 * d * 2 bytes per layer
  const double kv = decode_token_parts(fp, 3, hw, 99).memory_s - decode_token_parts(fp, 3, hw, 99, {false, true, true}).memory_s;
  EXPECT_NEAR(kv * 32e9, 100.0 * 2 * 2048 * 2 * 24, 1e-3);
}

TEST(PrefillLatency, SingleTokenEqualsDecodeWithEmptyCache) {
  const auto fp = ModelFootprint::vicuna_7b();
  for (const auto& hw : {HardwareConfig::npu_4k(), HardwareConfig::npu_16k()}) {
    for (int p : {2, 3, 4, 16}) {
      EXPECT_DOUBLE_EQ(prefill_latency(fp, p, hw, 1), decode_token_latency(fp, p, hw, 0));
    }
  }
}

TEST(PrefillLatency, ComputeBoundForLongPrompts) {
  const auto fp = ModelFootprint::vicuna_7b();
  const auto hw = HardwareConfig::npu_4k();
  const std::int64_t n = 100000;
  const double ideal = 2.0 * fp.linear_params() * n / (4096 * 1e9);
  for (int p : {2, 4, 16}) EXPECT_NEAR(prefill_latency(fp, p, hw, n) / ideal, 1.0, 1e-12);
  EXPECT_THROW(prefill_latency(fp, 2, hw, 0), InputError);
}

TEST(Pipeline, Fp16SelfSpeedupIsOne) {
  const auto r = pipeline_perf(ModelFootprint::vicuna_7b(), PrecisionSchedule::constant(16, 256),
                               HardwareConfig::npu_4k(), 512, 256);
  EXPECT_EQ(r.speedup_vs_fp16, 1.0);
  EXPECT_EQ(r.avg_bits, 16.0);
  EXPECT_FALSE(r.prefill_uplift_pct.has_value());
}

TEST(Pipeline, MixedScheduleBetweenUniformBaselines) {
  const auto fp = ModelFootprint::vicuna_7b();
  const auto hw = HardwareConfig::npu_16k();
  for (int st : {1, 64, 128, 255}) {
    const auto r = pipeline_perf(fp, PrecisionSchedule::two_level(3, 2, st, 256, 3), hw, 512, 256);
    EXPECT_LT(r.uniform_low_end_to_end_s, r.end_to_end_s);
    EXPECT_LT(r.end_to_end_s, r.uniform_high_end_to_end_s);
    EXPECT_GT(r.speedup_vs_uniform_high, 1.0);
  }
}

TEST(Pipeline, DecodeTimeDecomposes) {
  const auto fp = ModelFootprint::mobilellama_1_4b();
  const auto hw = HardwareConfig::npu_4k();
  const auto s = PrecisionSchedule::two_level(4, 2, 40, 100, 4);
  const auto r = pipeline_perf(fp, s, hw, 32, 100);
  double sum = 0.0;
  for (int i = 0; i < 100; ++i) sum += decode_token_latency(fp, i < 40 ? 4 : 2, hw, 32 + i);
  EXPECT_NEAR(r.decode_s, sum, 1e-12 * sum);
  EXPECT_DOUBLE_EQ(r.end_to_end_s, r.prefill_s + r.decode_s);
  EXPECT_DOUBLE_EQ(r.tokens_per_s, 100 / r.decode_s);
  EXPECT_EQ(r.decode_steps.at(4), 40);
  EXPECT_EQ(r.decode_steps.at(2), 60);
  EXPECT_DOUBLE_EQ(r.avg_bits, 2.8);
  EXPECT_DOUBLE_EQ(r.speedup_vs_fp16, r.fp16_end_to_end_s / r.end_to_end_s);
}

TEST(Pipeline, PrefillUpliftBelowTwoPercent) {
  for (const auto& fp : {ModelFootprint::vicuna_7b(), ModelFootprint::mobilellama_1_4b()}) {
    for (bool overlap : {true, false}) {
      auto hw = HardwareConfig::npu_4k();
      hw.overlap = overlap;
      const auto r = pipeline_perf(fp, PrecisionSchedule::two_level(3, 2, 64, 256, 3), hw, 512, 256);
      ASSERT_TRUE(r.prefill_uplift_pct.has_value());
      EXPECT_GE(*r.prefill_uplift_pct, 0.0);
      EXPECT_LT(*r.prefill_uplift_pct, 2.0);
    }
  }
}

TEST(Pipeline, RejectsBadLengths) {
  const auto fp = ModelFootprint::mobilellama_1_4b();
  const auto s = PrecisionSchedule::constant(3, 16);
  EXPECT_THROW(pipeline_perf(fp, s, HardwareConfig::npu_4k(), 8, 17), InputError);
  EXPECT_THROW(pipeline_perf(fp, s, HardwareConfig::npu_4k(), 8, 0), InputError);
  EXPECT_THROW(pipeline_perf(fp, s, HardwareConfig::npu_4k(), 0, 4), InputError);
}

TEST(Pipeline, CsvHasHeaderAndRows) {
  const auto fp = ModelFootprint::mobilellama_1_4b();
  const auto r = pipeline_perf(fp, PrecisionSchedule::constant(3, 16), HardwareConfig::npu_4k(), 8, 16);
  const auto csv = reports_to_csv({r, r});
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(r.to_json().at("gen_len"), 16);
}

TEST(WeightedGpu, Examples) {
  const std::map<int, double> k{{16, 97.1}, {3, 8.1}, {2, 7.0}};
  const auto single = weighted_gpu_latency(k, PrecisionSchedule::constant(3, 10), 10);
  EXPECT_DOUBLE_EQ(single.weighted_us, 8.1);
  const auto mixed = weighted_gpu_latency(k, PrecisionSchedule::two_level(3, 2, 40, 100), 100);
  EXPECT_NEAR(mixed.weighted_us, 7.44, 1e-12);
  EXPECT_NEAR(*mixed.speedup_vs_fp16, 97.1 / 7.44, 1e-12);
  for (int st = 0; st <= 100; st += 7) {
    const auto w = weighted_gpu_latency(k, PrecisionSchedule::two_level(3, 2, st, 100), 100);
    EXPECT_GE(w.weighted_us, 7.0 - 1e-12);
    EXPECT_LE(w.weighted_us, 8.1 + 1e-12);
  }
  EXPECT_THROW(weighted_gpu_latency(k, PrecisionSchedule::constant(4, 10), 10), InputError);
  const auto no_fp16 = weighted_gpu_latency({{3, 1.0}}, PrecisionSchedule::constant(3, 4), 4);
  EXPECT_FALSE(no_fp16.speedup_vs_fp16.has_value());
}

TEST(KernelTable, BundledTableValues) {
  std::ifstream in(std::string(PMPD_DATA_DIR) + "/kernels/rtx4090.json");
  ASSERT_TRUE(in);
  const auto t = KernelTable::from_json(nlohmann::json::parse(in));
  const auto& up = t.kernel("vicuna-7b-v1.5", "up_proj");
  EXPECT_EQ(up.at(16), 97.1);
  EXPECT_EQ(up.at(3), 8.1);
  EXPECT_EQ(up.at(2), 7.0);
  EXPECT_THROW(t.kernel("vicuna-7b-v1.5", "nope"), InputError);
  EXPECT_THROW(t.kernel("nope", "up_proj"), InputError);
  EXPECT_THROW(KernelTable::from_json({{"device", "x"}, {"models", {{"m", {{"k", {{"two", 1.0}}}}}}}}),
               InputError);
}
