#include "pmpd/learnsched.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <string>

#include "pmpd/errors.hpp"
#include "pmpd/metrics.hpp"
#include "pmpd/util.hpp"

namespace pmpd::learnsched {
namespace {

static_assert(std::endian::native == std::endian::little, "feature encoding assumes little-endian");

void softmax_inplace(std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double& x : v) {
    x = std::exp(x - m);
    sum += x;
  }
  for (double& x : v) x /= sum;
}

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - m);
  return m + std::log(sum);
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Intermediate activations of one forward pass, kept for backprop.
struct Activations {
  Pooled pooled;
  std::vector<double> z1;
  std::vector<double> h;
  std::vector<double> logits;
};

Activations forward(const SchedulerNet& net, const KVFeatures& f) {
  Activations act;
  act.pooled = pool_kv(net, f);
  const auto H = static_cast<std::size_t>(net.hidden);
  const auto Dv = static_cast<std::size_t>(net.d_v);
  act.z1.assign(net.b1.begin(), net.b1.end());
  act.h.resize(H);
  for (std::size_t j = 0; j < H; ++j) {
    for (std::size_t c = 0; c < Dv; ++c) act.z1[j] += net.w1[j * Dv + c] * act.pooled.output[c];
    act.h[j] = std::max(0.0, act.z1[j]);
  }
  const auto N = static_cast<std::size_t>(net.classes());
  act.logits.assign(net.b2.begin(), net.b2.end());
  for (std::size_t k = 0; k < N; ++k) {
    for (std::size_t j = 0; j < H; ++j) act.logits[k] += net.w2[k * H + j] * act.h[j];
  }
  return act;
}

std::vector<double> floats_from_b64(const std::string& text, std::size_t expected,
                                    const char* field) {
  const auto bytes = base64_decode(text);
  if (bytes.size() != expected * sizeof(float)) {
    throw InputError(std::string("dataset record: field '") + field + "' has " +
                     std::to_string(bytes.size()) + " bytes, expected " +
                     std::to_string(expected * sizeof(float)));
  }
  std::vector<double> out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    float x;
    std::memcpy(&x, bytes.data() + i * sizeof(float), sizeof(float));
    out[i] = x;
  }
  return out;
}

std::string floats_to_b64(std::span<const double> values) {
  std::vector<std::byte> bytes(values.size() * sizeof(float));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto x = static_cast<float>(values[i]);
    std::memcpy(bytes.data() + i * sizeof(float), &x, sizeof(float));
  }
  return base64_encode(bytes);
}

void check_example(const SchedulerNet& net, const LabeledExample& e) {
  if (e.label < 0 || e.label >= net.classes()) {
    throw InputError("label " + std::to_string(e.label) + " outside [0, " +
                     std::to_string(net.classes()) + ")");
  }
}

}  // namespace

KVFeatures extract_features(const lm::KVCache& cache, int layer) {
  const int n = cache.n_layers();
  const int l = layer < 0 ? n + layer : layer;
  if (l < 0 || l >= n) {
    throw ConfigError("feature layer " + std::to_string(layer) + " outside a " +
                      std::to_string(n) + "-layer cache");
  }
  KVFeatures f;
  f.length = cache.length();
  f.d_k = f.d_v = cache.width();
  const auto k = cache.keys(l);
  const auto v = cache.values(l);
  f.keys.assign(k.begin(), k.end());
  f.values.assign(v.begin(), v.end());
  return f;
}

SchedulerNet SchedulerNet::init(int d_k, int d_v, int hidden, schedule::SwitchGrid grid,
                                std::uint64_t seed) {
  if (d_k <= 0 || d_v <= 0 || hidden <= 0) throw ConfigError("scheduler net widths must be positive");
  if (grid.n < 2 || static_cast<int>(grid.points.size()) != grid.n) {
    throw ConfigError("scheduler net needs a switch grid with at least 2 points");
  }
  SchedulerNet net;
  net.d_k = d_k;
  net.d_v = d_v;
  net.hidden = hidden;
  net.grid = std::move(grid);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](std::vector<double>& v, std::size_t n, double scale) {
    v.resize(n);
    for (double& x : v) x = normal(rng) * scale;
  };
  const auto N = static_cast<std::size_t>(net.grid.n);
  const auto H = static_cast<std::size_t>(hidden);
  fill(net.query, static_cast<std::size_t>(d_k), 1.0 / std::sqrt(d_k));
  fill(net.w1, H * static_cast<std::size_t>(d_v), std::sqrt(2.0 / d_v));
  net.b1.assign(H, 0.0);
  fill(net.w2, N * H, 1.0 / std::sqrt(hidden));
  net.b2.assign(N, 0.0);
  return net;
}

void SchedulerNet::validate() const {
  if (d_k <= 0 || d_v <= 0 || hidden <= 0) throw ConfigError("scheduler net widths must be positive");
  if (grid.n < 2 || static_cast<int>(grid.points.size()) != grid.n) {
    throw ConfigError("scheduler net grid has " + std::to_string(grid.points.size()) +
                      " points, expected " + std::to_string(grid.n) + " (>= 2)");
  }
  const auto N = static_cast<std::size_t>(grid.n);
  const auto H = static_cast<std::size_t>(hidden);
  auto shape = [](const std::vector<double>& v, std::size_t n, const char* name) {
    if (v.size() != n) {
      throw ConfigError(std::string("scheduler net: ") + name + " has " + std::to_string(v.size()) +
                        " entries, expected " + std::to_string(n));
    }
    if (!all_finite(v)) throw ConfigError(std::string("scheduler net: ") + name + " is not finite");
  };
  shape(query, static_cast<std::size_t>(d_k), "query");
  shape(w1, H * static_cast<std::size_t>(d_v), "w1");
  shape(b1, H, "b1");
  shape(w2, N * H, "w2");
  shape(b2, N, "b2");
  if (high != 0 || low != 0) {
    if (high <= low || low < 1) throw ConfigError("scheduler net needs high > low >= 1");
  }
}

nlohmann::json SchedulerNet::to_json() const {
  return {{"format", kNetFormatTag},
          {"d_k", d_k},
          {"d_v", d_v},
          {"hidden", hidden},
          {"classes", grid.n},
          {"grid", {{"n", grid.n}, {"horizon", grid.horizon}, {"points", grid.points}}},
          {"feature_layer", feature_layer},
          {"high", high},
          {"low", low},
          {"prefill", prefill},
          {"query", query},
          {"w1", w1},
          {"b1", b1},
          {"w2", w2},
          {"b2", b2}};
}

SchedulerNet SchedulerNet::from_json(const nlohmann::json& j) {
  SchedulerNet net;
  try {
    if (j.at("format").get<std::string>() != kNetFormatTag) {
      throw ConfigError("scheduler net: unsupported format '" + j.at("format").get<std::string>() +
                        "'");
    }
    net.d_k = j.at("d_k").get<int>();
    net.d_v = j.at("d_v").get<int>();
    net.hidden = j.at("hidden").get<int>();
    const auto& g = j.at("grid");
    net.grid = schedule::SwitchGrid::make(g.at("n").get<int>(), g.at("horizon").get<int>());
    if (g.at("points").get<std::vector<int>>() != net.grid.points) {
      throw ConfigError("scheduler net: grid points do not match n/horizon");
    }
    if (j.at("classes").get<int>() != net.grid.n) throw ConfigError("scheduler net: classes != grid.n");
    net.feature_layer = j.at("feature_layer").get<int>();
    net.high = j.at("high").get<int>();
    net.low = j.at("low").get<int>();
    net.prefill = j.at("prefill").get<int>();
    net.query = j.at("query").get<std::vector<double>>();
    net.w1 = j.at("w1").get<std::vector<double>>();
    net.b1 = j.at("b1").get<std::vector<double>>();
    net.w2 = j.at("w2").get<std::vector<double>>();
    net.b2 = j.at("b2").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scheduler net JSON: ") + e.what());
  }
  net.validate();
  return net;
}

Pooled pool_kv(const SchedulerNet& net, std::span<const double> keys,
               std::span<const double> values, std::size_t length) {
  if (length == 0) throw ConfigError("pool_kv: empty key/value sequence");
  const auto Dk = static_cast<std::size_t>(net.d_k);
  const auto Dv = static_cast<std::size_t>(net.d_v);
  if (keys.size() != length * Dk || values.size() != length * Dv || net.query.size() != Dk) {
    throw ConfigError("pool_kv: K/V widths do not match the scheduler net (d_k=" +
                      std::to_string(Dk) + ", d_v=" + std::to_string(Dv) + ")");
  }
  Pooled out;
  out.weights.resize(length);
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dk));
  for (std::size_t t = 0; t < length; ++t) {
    double s = 0.0;
    for (std::size_t c = 0; c < Dk; ++c) s += net.query[c] * keys[t * Dk + c];
    out.weights[t] = s * scale;
  }
  softmax_inplace(out.weights);
  out.output.assign(Dv, 0.0);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t c = 0; c < Dv; ++c) out.output[c] += out.weights[t] * values[t * Dv + c];
  }
  return out;
}

Pooled pool_kv(const SchedulerNet& net, const KVFeatures& f) {
  if (f.d_k != net.d_k || f.d_v != net.d_v) {
    throw ConfigError("features have widths (" + std::to_string(f.d_k) + ", " +
                      std::to_string(f.d_v) + "), scheduler net expects (" +
                      std::to_string(net.d_k) + ", " + std::to_string(net.d_v) + ")");
  }
  return pool_kv(net, f.keys, f.values, f.length);
}

std::vector<double> class_logits(const SchedulerNet& net, const KVFeatures& f) {
  return forward(net, f).logits;
}

int predict_class(std::span<const double> logits) {
  if (logits.empty()) throw InputError("predict_class: no logits");
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

schedule::PrecisionSchedule schedule_for_class(const SchedulerNet& net, int cls) {
  if (cls < 0 || cls >= net.classes()) throw InputError("class index outside the grid");
  if (net.high <= net.low || net.low < 1) {
    throw ConfigError("scheduler net has no (high, low) precision pair configured");
  }
  return schedule::PrecisionSchedule::two_level(net.high, net.low, net.grid.points[cls],
                                                net.grid.horizon,
                                                net.prefill == 0 ? net.high : net.prefill);
}

schedule::PrecisionSchedule predict_schedule(const SchedulerNet& net, const lm::KVCache& cache) {
  const auto f = extract_features(cache, net.feature_layer);
  return schedule_for_class(net, predict_class(class_logits(net, f)));
}

LearnedScheduler::LearnedScheduler(SchedulerNet net) : net_(std::move(net)) {
  net_.validate();
  if (net_.high <= net_.low || net_.low < 1) {
    throw ConfigError("learned scheduler needs high > low >= 1");
  }
}

schedule::PrecisionSchedule LearnedScheduler::plan(const lm::KVCache& prefilled) const {
  return predict_schedule(net_, prefilled);
}

Gradients Gradients::zeros_like(const SchedulerNet& net) {
  Gradients g;
  g.query.assign(net.query.size(), 0.0);
  g.w1.assign(net.w1.size(), 0.0);
  g.b1.assign(net.b1.size(), 0.0);
  g.w2.assign(net.w2.size(), 0.0);
  g.b2.assign(net.b2.size(), 0.0);
  return g;
}

double loss_and_gradients(const SchedulerNet& net, const KVFeatures& f, int label,
                          Gradients* grad) {
  if (label < 0 || label >= net.classes()) throw InputError("label outside the grid");
  const Activations act = forward(net, f);
  const double loss = log_sum_exp(act.logits) - act.logits[static_cast<std::size_t>(label)];
  if (grad == nullptr) return loss;

  const auto N = static_cast<std::size_t>(net.classes());
  const auto H = static_cast<std::size_t>(net.hidden);
  const auto Dk = static_cast<std::size_t>(net.d_k);
  const auto Dv = static_cast<std::size_t>(net.d_v);
  const std::size_t T = f.length;

  std::vector<double> dz2 = act.logits;
  softmax_inplace(dz2);
  dz2[static_cast<std::size_t>(label)] -= 1.0;

  std::vector<double> dz1(H, 0.0);
  for (std::size_t k = 0; k < N; ++k) {
    grad->b2[k] += dz2[k];
    for (std::size_t j = 0; j < H; ++j) {
      grad->w2[k * H + j] += dz2[k] * act.h[j];
      dz1[j] += net.w2[k * H + j] * dz2[k];
    }
  }
  std::vector<double> dO(Dv, 0.0);
  for (std::size_t j = 0; j < H; ++j) {
    if (act.z1[j] <= 0.0) continue;
    grad->b1[j] += dz1[j];
    for (std::size_t c = 0; c < Dv; ++c) {
      grad->w1[j * Dv + c] += dz1[j] * act.pooled.output[c];
      dO[c] += net.w1[j * Dv + c] * dz1[j];
    }
  }

  // Back through O = a V and a = softmax(q K^T / sqrt(d_k)).
  const auto& a = act.pooled.weights;
  std::vector<double> da(T, 0.0);
  double mean_da = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < Dv; ++c) da[t] += dO[c] * f.values[t * Dv + c];
    mean_da += a[t] * da[t];
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dk));
  for (std::size_t t = 0; t < T; ++t) {
    const double ds = a[t] * (da[t] - mean_da) * scale;
    for (std::size_t c = 0; c < Dk; ++c) grad->query[c] += ds * f.keys[t * Dk + c];
  }
  return loss;
}

int label_from_qualities(std::span<const double> qualities) {
  if (qualities.empty()) throw InputError("label_from_qualities: no qualities");
  const double threshold = qualities.back() - 1e-9;
  for (std::size_t j = 0; j < qualities.size(); ++j) {
    if (qualities[j] >= threshold) return static_cast<int>(j);
  }
  return static_cast<int>(qualities.size()) - 1;
}

LabelResult generate_labels(const lm::ModelVariants& model,
                            const std::vector<std::vector<lm::Token>>& seed_prompts,
                            const LabelConfig& cfg) {
  if (seed_prompts.empty()) throw InputError("generate_labels: no seed prompts");
  if (cfg.grid.n < 2 || static_cast<int>(cfg.grid.points.size()) != cfg.grid.n) {
    throw ConfigError("generate_labels: invalid switch grid");
  }
  if (cfg.high <= cfg.low || cfg.low < 1 || !model.supports(cfg.high) ||
      !model.supports(cfg.low)) {
    throw ConfigError("generate_labels: need model-supported precisions high > low");
  }
  const int prefill_p = cfg.prefill == 0 ? cfg.high : cfg.prefill;
  if (!model.supports(prefill_p)) throw ConfigError("generate_labels: unsupported prefill precision");
  if (cfg.generation.max_new > cfg.grid.horizon) {
    throw ConfigError("generate_labels: max_new exceeds the grid horizon");
  }
  const int max_prompt = model.config().max_context - cfg.generation.max_new - 1;
  if (max_prompt < 1) throw ConfigError("generate_labels: max_new leaves no room for a prompt");

  LabelResult result;
  result.reference_precision = model.has_reference() ? schedule::kFullPrecision : model.p_max();
  const lm::StaticScheduler reference_sched(schedule::PrecisionSchedule::constant(
      result.reference_precision, cfg.grid.horizon, result.reference_precision));

  struct Slot {
    bool skipped = false;
    LabeledExample example;
  };
  std::vector<Slot> slots(seed_prompts.size());
  parallel_for(seed_prompts.size(), cfg.threads, [&](std::size_t i) {
    const auto& seed = seed_prompts[i];
    if (seed.empty()) throw InputError("generate_labels: seed prompt " + std::to_string(i) + " is empty");
    // Keep a random prefix of at least a quarter of the text, dropping at least one token.
    std::mt19937_64 rng(derive_seed(cfg.truncation_seed, "prompt-" + std::to_string(i)));
    const auto n = static_cast<std::int64_t>(seed.size());
    std::int64_t keep = n;
    if (n >= 2) {
      const std::int64_t lo = std::max<std::int64_t>(1, n / 4);
      const std::int64_t hi = n - 1;
      keep = lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    }
    keep = std::min<std::int64_t>(keep, max_prompt);
    std::vector<lm::Token> prompt(seed.begin(), seed.begin() + keep);

    const auto reference = lm::generate(model, prompt, reference_sched, cfg.generation);
    const bool empty = std::all_of(reference.output.begin(), reference.output.end(),
                                   [&](lm::Token t) { return t == cfg.generation.eos; });
    if (empty) {
      slots[i].skipped = true;
      return;
    }
    LabeledExample& ex = slots[i].example;
    ex.qualities.resize(static_cast<std::size_t>(cfg.grid.n));
    for (int j = 0; j < cfg.grid.n; ++j) {
      const lm::StaticScheduler sched(schedule::PrecisionSchedule::two_level(
          cfg.high, cfg.low, cfg.grid.points[static_cast<std::size_t>(j)], cfg.grid.horizon,
          prefill_p));
      const auto trace = lm::generate(model, prompt, sched, cfg.generation);
      ex.qualities[static_cast<std::size_t>(j)] = metrics::fidelity(trace, reference);
    }
    ex.label = label_from_qualities(ex.qualities);
    ex.features = extract_features(lm::prefill(model, prefill_p, prompt).cache, cfg.feature_layer);
    ex.prompt = std::move(prompt);
  });
  for (auto& s : slots) {
    if (s.skipped) {
      ++result.skipped;
    } else {
      result.examples.push_back(std::move(s.example));
    }
  }
  return result;
}

double mean_loss(const SchedulerNet& net, std::span<const LabeledExample> data) {
  if (data.empty()) throw InputError("mean_loss: empty dataset");
  double sum = 0.0;
  for (const auto& e : data) sum += loss_and_gradients(net, e.features, e.label, nullptr);
  return sum / static_cast<double>(data.size());
}

double accuracy(const SchedulerNet& net, std::span<const LabeledExample> data) {
  if (data.empty()) throw InputError("accuracy: empty dataset");
  std::size_t hits = 0;
  for (const auto& e : data) {
    if (predict_class(class_logits(net, e.features)) == e.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainReport train(SchedulerNet& net, std::span<const LabeledExample> data, const TrainConfig& cfg) {
  if (data.empty()) throw InputError("train: empty dataset");
  if (!(cfg.lr > 0.0) || cfg.momentum < 0.0 || cfg.momentum >= 1.0 || cfg.epochs < 0) {
    throw ConfigError("train: need lr > 0, momentum in [0, 1), epochs >= 0");
  }
  net.validate();
  for (const auto& e : data) check_example(net, e);

  const std::size_t batch =
      cfg.batch <= 0 ? data.size() : std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), data.size());
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Gradients velocity = Gradients::zeros_like(net);

  auto step = [&](std::vector<double>& param, std::vector<double>& vel, const std::vector<double>& g,
                  double inv_n) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      vel[i] = cfg.momentum * vel[i] - cfg.lr * g[i] * inv_n;
      param[i] += vel[i];
    }
  };

  TrainReport report;
  report.initial_loss = mean_loss(net, data);
  if (!std::isfinite(report.initial_loss)) throw TrainingDiverged("train: initial loss is not finite");
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with raw draws keeps the order independent of the standard library.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng() % i]);
    }
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      Gradients g = Gradients::zeros_like(net);
      for (std::size_t b = start; b < end; ++b) {
        const auto& e = data[order[b]];
        loss_and_gradients(net, e.features, e.label, &g);
      }
      const double inv_n = 1.0 / static_cast<double>(end - start);
      step(net.query, velocity.query, g.query, inv_n);
      step(net.w1, velocity.w1, g.w1, inv_n);
      step(net.b1, velocity.b1, g.b1, inv_n);
      step(net.w2, velocity.w2, g.w2, inv_n);
      step(net.b2, velocity.b2, g.b2, inv_n);
    }
    const double loss = mean_loss(net, data);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("train: loss became non-finite at epoch " + std::to_string(epoch + 1) +
                             " (lr " + std::to_string(cfg.lr) + " is likely too high)");
    }
    report.loss_curve.push_back(loss);
  }
  report.final_loss = report.loss_curve.empty() ? report.initial_loss : report.loss_curve.back();
  report.accuracy = accuracy(net, data);
  return report;
}

nlohmann::json example_to_json(const LabeledExample& e) {
  return {{"prompt", e.prompt},
          {"label", e.label},
          {"qualities", e.qualities},
          {"length", e.features.length},
          {"d_k", e.features.d_k},
          {"d_v", e.features.d_v},
          {"keys", floats_to_b64(e.features.keys)},
          {"values", floats_to_b64(e.features.values)}};
}

LabeledExample example_from_json(const nlohmann::json& j) {
  LabeledExample e;
  try {
    e.prompt = j.at("prompt").get<std::vector<lm::Token>>();
    e.label = j.at("label").get<int>();
    e.qualities = j.at("qualities").get<std::vector<double>>();
    e.features.length = j.at("length").get<std::size_t>();
    e.features.d_k = j.at("d_k").get<int>();
    e.features.d_v = j.at("d_v").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    throw InputError(std::string("dataset record: ") + ex.what());
  }
  if (e.features.length == 0 || e.features.d_k <= 0 || e.features.d_v <= 0) {
    throw InputError("dataset record: features must be non-empty");
  }
  e.features.keys = floats_from_b64(j.at("keys").get<std::string>(),
                                    e.features.length * static_cast<std::size_t>(e.features.d_k), "keys");
  e.features.values = floats_from_b64(j.at("values").get<std::string>(),
                                      e.features.length * static_cast<std::size_t>(e.features.d_v), "values");
  if (e.label < 0) throw InputError("dataset record: negative label");
  return e;
}

}  // namespace pmpd::learnsched
