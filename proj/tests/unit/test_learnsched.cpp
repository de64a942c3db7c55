#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "pmpd/errors.hpp"
#include "pmpd/learnsched.hpp"
#include "support.hpp"

using namespace pmpd;
using namespace pmpd::learnsched;
using schedule::SwitchGrid;

namespace {

KVFeatures random_features(std::mt19937_64& rng, std::size_t t, int dk, int dv) {
  std::normal_distribution<double> d(0.0, 1.0);
  KVFeatures f{t, dk, dv, std::vector<double>(t * dk), std::vector<double>(t * dv)};
  for (auto& x : f.keys) x = d(rng);
  for (auto& x : f.values) x = d(rng);
  return f;
}

SchedulerNet tiny_net(std::uint64_t seed, int dk = 4, int dv = 4, int hidden = 3, int classes = 3) {
  auto net = SchedulerNet::init(dk, dv, hidden, SwitchGrid::make(classes, 8), seed);
  net.high = 4;
  net.low = 2;
  net.prefill = 4;
  return net;
}

// Five classes, each a tight cluster around 3*e_k in an 8-dim pooled space.
// T = 1 so the pooled output is exactly the value row. Points whose nearest
// axis is not their own class are dropped, so e_k separates the classes.
std::vector<LabeledExample> separable_dataset(std::uint64_t seed, int per_class) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.4);
  std::vector<LabeledExample> data;
  for (int c = 0; c < 5; ++c) {
    for (int i = 0; i < per_class; ++i) {
      LabeledExample e;
      e.label = c;
      e.features = {1, 4, 8, std::vector<double>(4), std::vector<double>(8)};
      for (auto& k : e.features.keys) k = noise(rng);
      for (int j = 0; j < 8; ++j) e.features.values[j] = (j == c ? 3.0 : 0.0) + noise(rng);
      const auto& v = e.features.values;
      if (std::max_element(v.begin(), v.begin() + 5) - v.begin() != c) continue;
      data.push_back(std::move(e));
    }
  }
  return data;
}

}  // namespace

TEST(PoolKv, SingletonReturnsValueRow) {
  auto net = tiny_net(1);
  const std::vector<double> k{0.3, -1.0, 2.0, 0.5}, v{1.0, 2.0, 3.0, 4.0};
  const auto p = pool_kv(net, k, v, 1);
  EXPECT_EQ(p.weights, std::vector<double>{1.0});
  for (int j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(p.output[j], v[j]);
}

TEST(PoolKv, ZeroQueryGivesColumnMean) {
  auto net = tiny_net(2);
  std::fill(net.query.begin(), net.query.end(), 0.0);
  std::mt19937_64 rng(3);
  const auto f = random_features(rng, 5, 4, 4);
  const auto p = pool_kv(net, f);
  for (double w : p.weights) EXPECT_DOUBLE_EQ(w, 0.2);
  for (int j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (int t = 0; t < 5; ++t) mean += f.values[t * 4 + j];
    EXPECT_NEAR(p.output[j], mean / 5, 1e-12);
  }
}

TEST(PoolKv, WeightsNormalizedUnderKeyScaling) {
  auto net = tiny_net(4);
  std::mt19937_64 rng(5);
  auto f = random_features(rng, 7, 4, 4);
  for (double c : {0.01, 1.0, 30.0, 1e3}) {
    auto g = f;
    for (auto& x : g.keys) x *= c;
    const auto p = pool_kv(net, g);
    EXPECT_NEAR(std::accumulate(p.weights.begin(), p.weights.end(), 0.0), 1.0, 1e-9);
  }
}

TEST(PoolKv, RejectsMismatchedShapes) {
  auto net = tiny_net(6);
  const std::vector<double> k(8), v(8);
  EXPECT_THROW(pool_kv(net, k, v, 0), ConfigError);
  EXPECT_THROW(pool_kv(net, k, std::vector<double>(6), 2), ConfigError);
  KVFeatures f{2, 5, 4, std::vector<double>(10), std::vector<double>(8)};
  EXPECT_THROW(pool_kv(net, f), ConfigError);
}

TEST(Predict, ArgmaxAndTies) {
  EXPECT_EQ(predict_class(std::vector<double>{0.1, 5.0, 0.2, 0.1, 0.1}), 1);
  EXPECT_EQ(predict_class(std::vector<double>{2.0, 1.0, 2.0}), 0);
  auto net = SchedulerNet::init(4, 4, 3, SwitchGrid::make(5, 256), 1);
  net.high = 3;
  net.low = 2;
  net.prefill = 3;
  const auto s = schedule_for_class(net, 1);
  EXPECT_EQ(s.st(2), 64);
  EXPECT_EQ(s.prefill, 3);
  EXPECT_THROW(schedule_for_class(net, 5), InputError);
}

TEST(Predict, ScheduleAlwaysValid) {
  const auto model = lm::ModelVariants::random(testsupport::small_config(), 8, 4, 8, false);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto net = SchedulerNet::init(16, 16, 5, SwitchGrid::make(4, 12), seed);
    net.high = 4;
    net.low = 3;
    net.prefill = 4;
    std::vector<lm::Token> prompt;
    for (std::uint64_t i = 0; i < 2 + seed % 6; ++i) prompt.push_back(static_cast<lm::Token>((seed * 7 + i) % 19));
    const auto pre = lm::prefill(model, 4, prompt);
    const auto s = predict_schedule(net, pre.cache);
    EXPECT_TRUE(schedule::validate(s).empty());
    EXPECT_EQ(s.precisions, (std::vector<int>{4, 3}));
  }
}

TEST(Predict, WidthMismatchIsConfigError) {
  const auto model = lm::ModelVariants::random(testsupport::small_config(), 8, 4, 8, false);
  const auto pre = lm::prefill(model, 4, std::vector<lm::Token>{1, 2});
  EXPECT_THROW(predict_schedule(tiny_net(1), pre.cache), ConfigError);
}

TEST(LearnedScheduler, DrivesGeneration) {
  const auto model = lm::ModelVariants::random(testsupport::small_config(), 8, 4, 8, false);
  auto net = SchedulerNet::init(16, 16, 5, SwitchGrid::make(3, 8), 3);
  net.high = 4;
  net.low = 2;
  net.prefill = 4;
  const LearnedScheduler sched(net);
  const std::vector<lm::Token> prompt{5, 6, 7};
  lm::GenerationSettings gs;
  gs.eos = 1000;
  gs.max_new = 8;
  const auto t = lm::generate(model, prompt, sched, gs);
  EXPECT_EQ(t.schedule, predict_schedule(net, lm::prefill(model, 4, prompt).cache));
  EXPECT_EQ(t.precisions.front(), 4);
}

TEST(ExtractFeatures, LayerSelection) {
  const auto model = lm::ModelVariants::random(testsupport::small_config(), 8, 4, 8, false);
  const auto pre = lm::prefill(model, 4, std::vector<lm::Token>{1, 2, 3});
  const auto last = extract_features(pre.cache);
  const auto one = extract_features(pre.cache, 1);
  EXPECT_EQ(last.length, 3u);
  EXPECT_EQ(last.d_k, 16);
  EXPECT_EQ(last.keys, one.keys);
  EXPECT_NE(extract_features(pre.cache, 0).keys, last.keys);
  EXPECT_THROW(extract_features(pre.cache, 2), ConfigError);
}

TEST(Gradients, MatchCentralDifferences) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    auto net = tiny_net(100 + trial);
    // Non-zero biases so every parameter has a non-trivial gradient path.
    std::normal_distribution<double> d(0.0, 0.5);
    for (auto& b : net.b1) b = d(rng);
    for (auto& b : net.b2) b = d(rng);
    const auto f = random_features(rng, 5, 4, 4);
    const int label = trial % 3;
    auto g = Gradients::zeros_like(net);
    loss_and_gradients(net, f, label, &g);

    auto check = [&](std::vector<double> SchedulerNet::*param, const std::vector<double>& grad) {
      for (std::size_t i = 0; i < grad.size(); ++i) {
        const double h = 1e-6;
        auto plus = net, minus = net;
        (plus.*param)[i] += h;
        (minus.*param)[i] -= h;
        const double numeric = (loss_and_gradients(plus, f, label, nullptr) -
                                loss_and_gradients(minus, f, label, nullptr)) / (2 * h);
        const double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-6});
        EXPECT_LE(std::abs(numeric - grad[i]) / denom, 1e-4) << "index " << i;
      }
    };
    check(&SchedulerNet::query, g.query);
    check(&SchedulerNet::w1, g.w1);
    check(&SchedulerNet::b1, g.b1);
    check(&SchedulerNet::w2, g.w2);
    check(&SchedulerNet::b2, g.b2);
  }
}

TEST(Gradients, AccumulateAcrossCalls) {
  std::mt19937_64 rng(2);
  const auto net = tiny_net(2);
  const auto f = random_features(rng, 3, 4, 4);
  auto once = Gradients::zeros_like(net), twice = Gradients::zeros_like(net);
  loss_and_gradients(net, f, 1, &once);
  loss_and_gradients(net, f, 1, &twice);
  loss_and_gradients(net, f, 1, &twice);
  for (std::size_t i = 0; i < once.w2.size(); ++i) EXPECT_NEAR(twice.w2[i], 2 * once.w2[i], 1e-12);
}

TEST(Training, SingleExampleIsFit) {
  std::mt19937_64 rng(9);
  auto net = tiny_net(9);
  std::vector<LabeledExample> data(1);
  data[0].features = random_features(rng, 4, 4, 4);
  data[0].label = 2;
  TrainConfig cfg;
  cfg.epochs = 400;
  cfg.lr = 0.05;
  const auto r = train(net, data, cfg);
  EXPECT_LT(r.final_loss, 0.01);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Training, SeparableFiveClass) {
  const auto data = separable_dataset(31, 40);
  ASSERT_GT(data.size(), 150u);
  auto net = SchedulerNet::init(4, 8, 16, SwitchGrid::make(5, 20), 4);
  TrainConfig cfg;
  cfg.epochs = 200;
  const auto r = train(net, data, cfg);
  EXPECT_GE(r.accuracy, 0.95);
  EXPECT_EQ(r.loss_curve.size(), 200u);
  EXPECT_LT(r.final_loss, r.initial_loss);
}

TEST(Training, WholeBatchLossNonIncreasing) {
  const auto data = separable_dataset(32, 20);
  auto net = SchedulerNet::init(4, 8, 16, SwitchGrid::make(5, 20), 5);
  TrainConfig cfg;
  cfg.batch = 0;
  cfg.momentum = 0.0;
  cfg.lr = 0.01;
  cfg.epochs = 60;
  const auto r = train(net, data, cfg);
  double prev = r.initial_loss;
  for (double l : r.loss_curve) {
    EXPECT_LE(l, prev + 1e-12);
    prev = l;
  }
}

TEST(Training, DeterministicGivenSeed) {
  const auto data = separable_dataset(33, 10);
  auto a = SchedulerNet::init(4, 8, 8, SwitchGrid::make(5, 20), 6);
  auto b = a;
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch = 7;
  cfg.seed = 12;
  EXPECT_EQ(train(a, data, cfg).loss_curve, train(b, data, cfg).loss_curve);
  EXPECT_EQ(a.to_json(), b.to_json());
}

TEST(Training, DivergenceIsReported) {
  const auto data = separable_dataset(34, 10);
  auto net = SchedulerNet::init(4, 8, 8, SwitchGrid::make(5, 20), 7);
  TrainConfig cfg;
  cfg.lr = 1e200;
  cfg.epochs = 20;
  EXPECT_THROW(train(net, data, cfg), TrainingDiverged);
}

TEST(Training, RejectsBadData) {
  auto net = tiny_net(1);
  EXPECT_THROW(train(net, std::vector<LabeledExample>{}, TrainConfig{}), InputError);
  std::mt19937_64 rng(1);
  std::vector<LabeledExample> data(1);
  data[0].features = random_features(rng, 2, 4, 4);
  data[0].label = 3;
  EXPECT_THROW(train(net, data, TrainConfig{}), InputError);
}

TEST(Labels, ThresholdRule) {
  EXPECT_EQ(label_from_qualities(std::vector<double>{1.0, 1.0, 1.0}), 0);
  EXPECT_EQ(label_from_qualities(std::vector<double>{0.1, 0.2, 0.9}), 2);
  EXPECT_EQ(label_from_qualities(std::vector<double>{0.5, 0.9, 0.8}), 1);
  EXPECT_EQ(label_from_qualities(std::vector<double>{0.8 - 1e-12, 0.0, 0.8}), 0);
}

TEST(Labels, GeneratedLabelsAreMinimalAndReproducible) {
  const auto model = lm::ModelVariants::random(testsupport::small_config(), 8, 4, 8, true);
  LabelConfig cfg;
  cfg.high = 4;
  cfg.low = 1;
  cfg.grid = SwitchGrid::make(4, 9);
  cfg.generation.eos = 1000;
  cfg.generation.max_new = 9;
  cfg.truncation_seed = 77;
  cfg.threads = 2;
  std::vector<std::vector<lm::Token>> seeds;
  for (int i = 0; i < 8; ++i) {
    std::vector<lm::Token> s;
    for (int j = 0; j < 6 + i; ++j) s.push_back((i * 5 + j * 3) % 18);
    seeds.push_back(s);
  }
  const auto a = generate_labels(model, seeds, cfg);
  EXPECT_EQ(a.reference_precision, schedule::kFullPrecision);
  ASSERT_EQ(a.examples.size() + a.skipped, seeds.size());
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    const auto& e = a.examples[i];
    ASSERT_EQ(e.qualities.size(), 4u);
    EXPECT_GE(e.qualities[e.label], e.qualities.back() - 1e-9);
    for (int j = 0; j < e.label; ++j) EXPECT_LT(e.qualities[j], e.qualities.back() - 1e-9);
    EXPECT_GE(e.prompt.size(), 1u);
    EXPECT_EQ(e.features.length, e.prompt.size());
    EXPECT_EQ(e.features.d_v, 16);
  }
  cfg.threads = 1;
  const auto b = generate_labels(model, seeds, cfg);
  ASSERT_EQ(a.examples.size(), b.examples.size());
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    EXPECT_EQ(example_to_json(a.examples[i]), example_to_json(b.examples[i]));
  }
  EXPECT_THROW(generate_labels(model, {}, cfg), InputError);
  cfg.low = 5;
  EXPECT_THROW(generate_labels(model, seeds, cfg), ConfigError);
}

TEST(Serialization, NetRoundTrip) {
  auto net = tiny_net(21);
  net.feature_layer = 0;
  const auto j = net.to_json();
  EXPECT_EQ(j.at("format"), kNetFormatTag);
  const auto back = SchedulerNet::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(back.w1, net.w1);
  EXPECT_EQ(back.grid.points, net.grid.points);
  auto bad = j;
  bad["format"] = "other";
  EXPECT_THROW(SchedulerNet::from_json(bad), ConfigError);
  bad = j;
  bad["w2"] = std::vector<double>{1.0};
  EXPECT_ANY_THROW(SchedulerNet::from_json(bad));
}

TEST(Serialization, ExampleRoundTrip) {
  LabeledExample e;
  e.prompt = {1, 2, 3};
  e.label = 1;
  e.qualities = {0.25, 1.0};
  e.features = {2, 2, 3, {0.5, -1.0, 2.0, 0.25}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0}};
  const auto back = example_from_json(example_to_json(e));
  EXPECT_EQ(back.prompt, e.prompt);
  EXPECT_EQ(back.label, e.label);
  EXPECT_EQ(back.qualities, e.qualities);
  EXPECT_EQ(back.features.keys, e.features.keys);
  EXPECT_EQ(back.features.values, e.features.values);
  EXPECT_EQ(back.features.length, 2u);
}
