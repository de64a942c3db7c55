#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmpd/schedule.hpp"
#include "pmpd/tinylm.hpp"

namespace pmpd::perf {

struct HardwareConfig {
  std::string name;
  std::int64_t mac_units = 0;
  double clock_hz = 0.0;
  double mem_bw_bytes_per_s = 0.0;
  bool overlap = true;  // roofline max of compute and memory time; false sums them

  /// Throws ConfigError unless every quantity is positive and finite.
  void validate() const;
  nlohmann::json to_json() const;
  static HardwareConfig from_json(const nlohmann::json& j);

  /// 4K / 16K MAC units at 1 GHz with 32 GB/s off-chip bandwidth.
  static HardwareConfig npu_4k();
  static HardwareConfig npu_16k();
};

struct MatrixShape {
  enum class Kind { kAttention, kMlp, kHead };
  std::string name;
  Kind kind = Kind::kAttention;
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::int64_t count = 1;  // instances in the model (n_layers for per-layer weights)

  std::int64_t params() const { return rows * cols * count; }
};

/// Parameter and KV sizes of a decoder-only model. Linear weights are streamed
/// every decode step; the embedding table is only gathered from, never streamed.
struct ModelFootprint {
  std::string name;
  int n_layers = 0;
  std::vector<MatrixShape> matrices;
  std::int64_t embedding_params = 0;
  std::int64_t norm_params = 0;              // unquantized, read at 16 bits
  std::int64_t kv_bytes_per_token_layer = 0;  // K and V rows at 16 bits
  std::int64_t group_size = 0;               // quantization group; 0 = one group per output row
  double metadata_bytes_per_group = 8.0;     // f32 min + f32 step

  std::int64_t attention_params_per_layer() const;
  std::int64_t mlp_params_per_layer() const;
  std::int64_t head_params() const;
  std::int64_t linear_params() const;
  std::int64_t total_params() const;
  std::int64_t quant_groups() const;

  void validate() const;
  nlohmann::json to_json() const;

  /// Footprint of the toy model with the archive's group size.
  static ModelFootprint from_model_config(const lm::ModelConfig& cfg, std::int64_t group_size = 64);
  /// Llama-style footprint with SiLU-gated MLP and untied head.
  static ModelFootprint llama_like(std::string name, int n_layers, int d_model, int d_ff, int vocab,
                                   std::int64_t group_size = 0);
  static ModelFootprint vicuna_7b();
  static ModelFootprint mobilellama_1_4b();
  /// "vicuna-7b", "mobilellama-1.4b"; ConfigError otherwise.
  static ModelFootprint preset(const std::string& name);
};

struct PerfOptions {
  bool include_kv = true;
  bool include_compute = true;
  bool include_metadata = true;

  nlohmann::json to_json() const;
};

struct LatencyParts {
  double compute_s = 0.0;
  double memory_s = 0.0;
  double total_s = 0.0;
};

/// Weight bytes read for one pass at p bits (metadata excluded for p == 16).
double weight_bytes(const ModelFootprint& fp, int p, const PerfOptions& opts = {});

/// One decode step with `context_len` cached tokens: reads them and writes one row per layer.
LatencyParts decode_token_parts(const ModelFootprint& fp, int p, const HardwareConfig& hw,
                                std::int64_t context_len, const PerfOptions& opts = {});
double decode_token_latency(const ModelFootprint& fp, int p, const HardwareConfig& hw,
                            std::int64_t context_len = 0, const PerfOptions& opts = {});

/// Compute for prompt_len tokens against one weight pass and prompt_len KV writes.
LatencyParts prefill_parts(const ModelFootprint& fp, int p, const HardwareConfig& hw,
                           std::int64_t prompt_len, const PerfOptions& opts = {});
double prefill_latency(const ModelFootprint& fp, int p, const HardwareConfig& hw,
                       std::int64_t prompt_len, const PerfOptions& opts = {});

struct PerfReport {
  std::string model;
  std::string hardware;
  std::int64_t prompt_len = 0;
  std::int64_t gen_len = 0;
  int prefill_bits = 0;
  double prefill_s = 0.0;
  double decode_s = 0.0;
  double end_to_end_s = 0.0;
  double tokens_per_s = 0.0;
  double avg_bits = 0.0;
  std::map<int, double> decode_token_s;  // per precision, at context = prompt_len
  std::map<int, std::int64_t> decode_steps;
  double fp16_end_to_end_s = 0.0;
  double uniform_high_end_to_end_s = 0.0;
  double uniform_low_end_to_end_s = 0.0;
  double speedup_vs_fp16 = 0.0;
  double speedup_vs_uniform_high = 0.0;
  /// End-to-end change from running prefill one bit higher, in percent.
  std::optional<double> prefill_uplift_pct;

  nlohmann::json to_json() const;
};

/// Decode step i runs at precision_at(schedule, i) with prompt_len + i cached tokens.
/// Throws InputError when gen_len is not in [1, horizon] or prompt_len < 1.
PerfReport pipeline_perf(const ModelFootprint& fp, const schedule::PrecisionSchedule& s,
                         const HardwareConfig& hw, std::int64_t prompt_len, std::int64_t gen_len,
                         const PerfOptions& opts = {});

std::string reports_to_csv(const std::vector<PerfReport>& reports);

struct WeightedLatency {
  double weighted_us = 0.0;
  std::optional<double> fp16_us;
  std::optional<double> speedup_vs_fp16;
};

/// Mean kernel latency over the first gen_len decode steps. Throws InputError
/// when a scheduled precision has no entry; speedup needs a 16-bit entry.
WeightedLatency weighted_gpu_latency(const std::map<int, double>& kernel_us,
                                     const schedule::PrecisionSchedule& s, std::int64_t gen_len);

/// {"device": ..., "unit": "us", "models": {model: {kernel: {"16": us, "2": us, ...}}}}
struct KernelTable {
  std::string device;
  std::map<std::string, std::map<std::string, std::map<int, double>>> models;

  static KernelTable from_json(const nlohmann::json& j);
  /// Throws InputError when the model or kernel is absent.
  const std::map<int, double>& kernel(const std::string& model, const std::string& name) const;
};

}  // namespace pmpd::perf
