#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmpd/quant.hpp"
#include "pmpd/schedule.hpp"
#include "pmpd/weight_file.hpp"

namespace pmpd::lm {

using Token = std::int32_t;
using schedule::kFullPrecision;

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 256;
  int vocab_size = 257;
  int max_context = 512;  // KV cache capacity in positions
  double rope_theta = 10000.0;

  int d_head() const noexcept { return d_model / n_heads; }
  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  bool quantized;  // false for RMSNorm gains
};

/// Every parameter tensor of the decoder, in file order.
std::vector<TensorSpec> tensor_layout(const ModelConfig& cfg);

struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::size_t bytes() const noexcept { return data.size() * sizeof(double); }
};

/// One stored set of nested-quantized weights, readable at any p in [1, p_max]
/// and, when the archive carries unquantized copies, at kFullPrecision.
///
/// Dequantized matrices are materialized lazily per (tensor, precision) and
/// kept in an LRU cache bounded by a byte budget. Safe to share across threads.
class ModelVariants {
 public:
  static constexpr std::size_t kDefaultCacheBudget = std::size_t{256} << 20;

  /// Seeded Gaussian weights scaled by 1/sqrt(d_model), RMSNorm gains of 1.
  static ModelVariants random(const ModelConfig& cfg, std::uint64_t seed, int p_max,
                              std::size_t group_size = quant::kDefaultGroupSize,
                              bool keep_reference = true);
  /// Quantizes caller-provided full-precision tensors (names per tensor_layout).
  static ModelVariants from_dense(const ModelConfig& cfg, std::vector<quant::DenseTensor> tensors,
                                  const quant::WeightQuantizer& quantizer,
                                  bool keep_reference = true);
  static ModelVariants from_archive(quant::WeightArchive archive,
                                    std::size_t cache_budget_bytes = kDefaultCacheBudget);
  static ModelVariants load(const std::filesystem::path& path,
                            std::size_t cache_budget_bytes = kDefaultCacheBudget);

  ModelVariants(ModelVariants&&) noexcept;
  ModelVariants& operator=(ModelVariants&&) noexcept;
  ~ModelVariants();

  const ModelConfig& config() const noexcept;
  const quant::WeightArchive& archive() const noexcept;
  int p_max() const noexcept;
  bool has_reference() const noexcept;
  /// True for p in [1, p_max], or kFullPrecision when reference weights exist.
  bool supports(int p) const noexcept;

  /// Throws ConfigError for an unsupported precision or unknown tensor.
  std::shared_ptr<const DenseMatrix> weights(std::string_view name, int p) const;
  std::span<const float> norm(std::string_view name) const;

  std::size_t cache_bytes() const;
  std::size_t cache_entries() const;

 private:
  struct State;
  explicit ModelVariants(std::unique_ptr<State> state);
  std::unique_ptr<State> state_;
};

/// Per-layer keys (after rotary embedding) and values, each [T x d_model].
class KVCache {
 public:
  KVCache() = default;
  KVCache(int n_layers, int width);

  std::size_t length() const noexcept;
  int n_layers() const noexcept { return static_cast<int>(keys_.size()); }
  int width() const noexcept { return width_; }

  std::span<const double> keys(int layer) const { return keys_.at(layer); }
  std::span<const double> values(int layer) const { return values_.at(layer); }

  void append(int layer, std::span<const double> key, std::span<const double> value);

 private:
  int width_ = 0;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
};

/// Optional observation points inside the forward pass (tests, diagnostics).
struct ForwardHooks {
  /// Called with the softmax row of every (layer, head, query position).
  std::function<void(int layer, int head, std::size_t pos, std::span<const double> probs)>
      on_attention;
};

struct FullForward {
  DenseMatrix logits;  // [T x vocab]
  KVCache cache;
};

/// Causal forward pass over the whole sequence at weight precision p.
FullForward forward_full(const ModelVariants& model, int p, std::span<const Token> tokens,
                         const ForwardHooks* hooks = nullptr);

struct PrefillResult {
  std::vector<double> logits;  // last position
  KVCache cache;
};

/// Throws InputError for an empty prompt or unknown token, LengthError when
/// the prompt does not fit below max_context, ConfigError for an unsupported p.
PrefillResult prefill(const ModelVariants& model, int p, std::span<const Token> prompt,
                      const ForwardHooks* hooks = nullptr);

/// Single-token forward using and extending the cache. LengthError when the
/// cache is already at max_context.
std::vector<double> decode_step(const ModelVariants& model, int p, Token token, KVCache& cache,
                                const ForwardHooks* hooks = nullptr);

struct SamplerConfig {
  enum class Mode { kGreedy, kTemperature };
  Mode mode = Mode::kGreedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

/// Argmax with lowest-index tie-break, or seeded draws from softmax(logits / T).
class Sampler {
 public:
  /// Throws ConfigError when temperature mode has T <= 0.
  explicit Sampler(const SamplerConfig& cfg);
  Token sample(std::span<const double> logits);

 private:
  SamplerConfig cfg_;
  std::mt19937_64 rng_;
};

Token greedy(std::span<const double> logits);
/// One draw with a fresh generator seeded from cfg.seed.
Token sample(std::span<const double> logits, const SamplerConfig& cfg);

/// Decides the precisions of one generation. Implementations are immutable;
/// plan() sees the prefilled cache so prompt-adaptive schedulers can use it.
class PrecisionScheduler {
 public:
  virtual ~PrecisionScheduler() = default;
  virtual int prefill_precision() const = 0;
  virtual int horizon() const = 0;
  virtual schedule::PrecisionSchedule plan(const KVCache& prefilled) const = 0;
};

/// Replays a fixed schedule for every prompt.
class StaticScheduler final : public PrecisionScheduler {
 public:
  explicit StaticScheduler(schedule::PrecisionSchedule s);
  int prefill_precision() const override { return schedule_.prefill; }
  int horizon() const override { return schedule_.horizon; }
  schedule::PrecisionSchedule plan(const KVCache&) const override { return schedule_; }

 private:
  schedule::PrecisionSchedule schedule_;
};

enum class Termination { kEos, kLength };

struct GenerationTrace {
  std::vector<Token> prompt;
  std::vector<Token> output;         // t_0 (from prefill), t_1, ...
  std::vector<int> precisions;       // per output token; [0] is the prefill precision
  std::vector<std::string> logits_hash;
  Termination termination = Termination::kLength;
  schedule::PrecisionSchedule schedule;  // the plan actually followed

  std::span<const int> decode_precisions() const {
    return std::span(precisions).subspan(precisions.empty() ? 0 : 1);
  }
  bool operator==(const GenerationTrace&) const = default;
};

struct GenerationSettings {
  SamplerConfig sampler;
  Token eos = 256;
  int max_new = 64;  // decode steps after t_0; at most the scheduler horizon
};

/// Prefill at the scheduler's prefill precision, sample t_0, let the scheduler
/// plan from the prefilled cache, then decode step i at precision_at(plan, i)
/// until EOS or max_new decode steps. Past KV entries are never recomputed.
/// Throws ContractViolation if the plan names a precision the model lacks or is invalid.
GenerationTrace generate(const ModelVariants& model, std::span<const Token> prompt,
                         const PrecisionScheduler& scheduler, const GenerationSettings& settings);

/// Byte-level tokenizer (256 bytes + EOS = 256), or a JSON vocabulary
/// {"tokens": [...], "eos": id} with greedy longest-match encoding.
class Tokenizer {
 public:
  static Tokenizer byte_level();
  static Tokenizer from_json(const nlohmann::json& vocab);
  static Tokenizer from_file(const std::filesystem::path& path);

  std::vector<Token> encode(std::string_view text) const;
  std::string decode(std::span<const Token> tokens) const;
  Token eos() const noexcept { return eos_; }
  int vocab_size() const noexcept { return static_cast<int>(pieces_.size()); }

 private:
  std::vector<std::string> pieces_;
  Token eos_ = 256;
  std::size_t longest_ = 1;
  bool byte_level_ = true;
};

}  // namespace pmpd::lm
