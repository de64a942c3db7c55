#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmpd/schedule.hpp"
#include "pmpd/tinylm.hpp"

namespace pmpd::learnsched {

/// Keys and values of one attention block, flattened across heads: [T x d_k], [T x d_v].
struct KVFeatures {
  std::size_t length = 0;
  int d_k = 0;
  int d_v = 0;
  std::vector<double> keys;
  std::vector<double> values;
};

/// Negative layer indices count from the end (-1 = last block).
KVFeatures extract_features(const lm::KVCache& cache, int layer = -1);

/// Attention pooling with a learned query followed by a one-hidden-layer ReLU
/// MLP producing one logit per switch-grid point.
struct SchedulerNet {
  int d_k = 0;
  int d_v = 0;
  int hidden = 64;
  schedule::SwitchGrid grid;
  int feature_layer = -1;
  int high = 0;     // decode precision before the switch
  int low = 0;      // decode precision after the switch
  int prefill = 0;

  std::vector<double> query;  // [d_k]
  std::vector<double> w1;     // [hidden x d_v]
  std::vector<double> b1;     // [hidden]
  std::vector<double> w2;     // [classes x hidden]
  std::vector<double> b2;     // [classes]

  int classes() const noexcept { return grid.n; }

  /// Seeded Gaussian initialization (He for w1, 1/sqrt(fan_in) otherwise), zero biases.
  static SchedulerNet init(int d_k, int d_v, int hidden, schedule::SwitchGrid grid,
                           std::uint64_t seed);
  /// Throws ConfigError on inconsistent shapes or non-finite parameters.
  void validate() const;

  nlohmann::json to_json() const;
  static SchedulerNet from_json(const nlohmann::json& j);
};

inline constexpr const char* kNetFormatTag = "pmpd-sched-v1";

struct Pooled {
  std::vector<double> weights;  // softmax over positions, sums to 1
  std::vector<double> output;   // [d_v]
};

/// softmax(q K^T / sqrt(d_k)) V. Throws ConfigError on width mismatch or T == 0.
Pooled pool_kv(const SchedulerNet& net, std::span<const double> keys,
               std::span<const double> values, std::size_t length);
Pooled pool_kv(const SchedulerNet& net, const KVFeatures& f);

std::vector<double> class_logits(const SchedulerNet& net, const KVFeatures& f);
/// argmax of the class logits; exact ties go to the lowest index (earliest switch).
int predict_class(std::span<const double> logits);
/// Two-precision schedule switching from net.high to net.low at grid.points[class].
schedule::PrecisionSchedule schedule_for_class(const SchedulerNet& net, int cls);
schedule::PrecisionSchedule predict_schedule(const SchedulerNet& net, const lm::KVCache& cache);

/// Derives a per-prompt schedule from the prefilled cache.
class LearnedScheduler final : public lm::PrecisionScheduler {
 public:
  explicit LearnedScheduler(SchedulerNet net);
  int prefill_precision() const override { return net_.prefill; }
  int horizon() const override { return net_.grid.horizon; }
  schedule::PrecisionSchedule plan(const lm::KVCache& prefilled) const override;
  const SchedulerNet& net() const noexcept { return net_; }

 private:
  SchedulerNet net_;
};

struct Gradients {
  std::vector<double> query, w1, b1, w2, b2;
  static Gradients zeros_like(const SchedulerNet& net);
};

/// Cross-entropy of softmax(class logits) against `label`; adds d(loss)/d(params) into grad when given.
double loss_and_gradients(const SchedulerNet& net, const KVFeatures& f, int label,
                          Gradients* grad);

struct LabeledExample {
  std::vector<lm::Token> prompt;
  KVFeatures features;
  int label = 0;
  std::vector<double> qualities;  // Rouge-L F1 per grid point
};

struct LabelConfig {
  int high = 0;
  int low = 0;
  int prefill = 0;
  schedule::SwitchGrid grid;
  lm::GenerationSettings generation;  // max_new must not exceed grid.horizon
  std::uint64_t truncation_seed = 0;
  int feature_layer = -1;
  unsigned threads = 1;
};

struct LabelResult {
  std::vector<LabeledExample> examples;
  std::size_t skipped = 0;  // prompts whose reference generation was empty
  int reference_precision = 0;
};

/// Smallest grid index whose quality reaches the all-high (last grid point)
/// quality, with a 1e-9 float guard.
int label_from_qualities(std::span<const double> qualities);

/// Truncates each seed prompt at a seeded random point, generates a
/// full-precision reference and one generation per grid point, and labels the
/// prompt with label_from_qualities. Features come from the prefill cache.
LabelResult generate_labels(const lm::ModelVariants& model,
                            const std::vector<std::vector<lm::Token>>& seed_prompts,
                            const LabelConfig& cfg);

struct TrainConfig {
  double lr = 1e-2;
  double momentum = 0.9;
  int epochs = 100;
  int batch = 16;  // <= 0 means whole-batch
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> loss_curve;  // dataset mean loss after each epoch
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double accuracy = 0.0;
};

double mean_loss(const SchedulerNet& net, std::span<const LabeledExample> data);
double accuracy(const SchedulerNet& net, std::span<const LabeledExample> data);

/// Mini-batch gradient descent with momentum on mean cross-entropy. Batch
/// order comes from `seed`. Throws TrainingDiverged on a non-finite loss.
TrainReport train(SchedulerNet& net, std::span<const LabeledExample> data, const TrainConfig& cfg);

/// JSON-lines record with f32 feature tensors encoded as base64.
nlohmann::json example_to_json(const LabeledExample& e);
LabeledExample example_from_json(const nlohmann::json& j);

}  // namespace pmpd::learnsched
