#include "pmpd/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <list>
#include <map>
#include <mutex>
#include <unordered_map>

#include "pmpd/errors.hpp"
#include "pmpd/util.hpp"

namespace pmpd::lm {
namespace {

constexpr double kRmsEps = 1e-5;

std::string layer_name(int layer, std::string_view leaf) {
  return "layers." + std::to_string(layer) + "." + std::string(leaf);
}

}  // namespace

// ---------------------------------------------------------------- config

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (d_head() % 2 != 0) throw ConfigError("rotary embedding needs an even head width");
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (max_context < 2) throw ConfigError("max_context must be >= 2");
  if (!(rope_theta > 0.0)) throw ConfigError("rope_theta must be positive");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers},     {"n_heads", n_heads},       {"d_model", d_model},
          {"d_ff", d_ff},             {"vocab_size", vocab_size}, {"max_context", max_context},
          {"rope_theta", rope_theta}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_context = j.at("max_context").get<int>();
    c.rope_theta = j.at("rope_theta").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<TensorSpec> tensor_layout(const ModelConfig& cfg) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  std::vector<TensorSpec> out;
  out.push_back({"tok_embedding", vocab, d, true});
  for (int l = 0; l < cfg.n_layers; ++l) {
    out.push_back({layer_name(l, "attn_norm"), 1, d, false});
    for (const char* w : {"wq", "wk", "wv", "wo"}) out.push_back({layer_name(l, w), d, d, true});
    out.push_back({layer_name(l, "mlp_norm"), 1, d, false});
    out.push_back({layer_name(l, "w_gate"), ff, d, true});
    out.push_back({layer_name(l, "w_up"), ff, d, true});
    out.push_back({layer_name(l, "w_down"), d, ff, true});
  }
  out.push_back({"final_norm", 1, d, false});
  out.push_back({"lm_head", vocab, d, true});
  return out;
}

// ---------------------------------------------------------------- variants

struct ModelVariants::State {
  using Key = std::pair<std::string, int>;
  struct Entry {
    std::shared_ptr<const DenseMatrix> matrix;
    std::list<Key>::iterator lru_pos;
  };

  ModelConfig cfg;
  quant::WeightArchive archive;
  std::unordered_map<std::string, std::size_t> quantized_index;
  std::unordered_map<std::string, std::size_t> dense_index;
  std::unordered_map<std::string, std::size_t> reference_index;
  std::size_t budget = kDefaultCacheBudget;

  mutable std::mutex mu;
  mutable std::list<Key> lru;  // front = most recently used
  mutable std::map<Key, Entry> entries;
  mutable std::size_t bytes = 0;
};

ModelVariants::ModelVariants(std::unique_ptr<State> state) : state_(std::move(state)) {}
ModelVariants::ModelVariants(ModelVariants&&) noexcept = default;
ModelVariants& ModelVariants::operator=(ModelVariants&&) noexcept = default;
ModelVariants::~ModelVariants() = default;

ModelVariants ModelVariants::random(const ModelConfig& cfg, std::uint64_t seed, int p_max,
                                    std::size_t group_size, bool keep_reference) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  std::vector<quant::DenseTensor> tensors;
  for (const auto& spec : tensor_layout(cfg)) {
    quant::DenseTensor t{spec.name, spec.rows, spec.cols, {}};
    t.values.resize(spec.rows * spec.cols);
    for (auto& v : t.values) {
      v = spec.quantized ? static_cast<float>(normal(rng) * scale) : 1.0f;
    }
    tensors.push_back(std::move(t));
  }
  return from_dense(cfg, std::move(tensors), quant::UniformNestedQuantizer(p_max, group_size),
                    keep_reference);
}

ModelVariants ModelVariants::from_dense(const ModelConfig& cfg,
                                        std::vector<quant::DenseTensor> tensors,
                                        const quant::WeightQuantizer& quantizer,
                                        bool keep_reference) {
  std::unordered_map<std::string, quant::DenseTensor*> by_name;
  for (auto& t : tensors) by_name[t.name] = &t;

  quant::WeightArchive archive;
  archive.model = cfg.to_json();
  for (const auto& spec : tensor_layout(cfg)) {
    auto it = by_name.find(spec.name);
    if (it == by_name.end()) throw InputError("missing tensor '" + spec.name + "'");
    auto& t = *it->second;
    if (t.rows != spec.rows || t.cols != spec.cols || t.values.size() != spec.rows * spec.cols) {
      throw InputError("tensor '" + spec.name + "' has the wrong shape");
    }
    if (spec.quantized) {
      auto qt = quantizer.quantize(t.values, t.rows, t.cols);
      archive.p_max = qt.p_max;
      archive.group_size = qt.group_size;
      archive.quantized.push_back({spec.name, std::move(qt)});
      if (keep_reference) archive.reference.push_back(t);
    } else {
      for (float v : t.values) {
        if (!std::isfinite(v)) throw ValueError("non-finite norm gain in '" + spec.name + "'");
      }
      archive.dense.push_back(t);
    }
  }
  return from_archive(std::move(archive));
}

ModelVariants ModelVariants::from_archive(quant::WeightArchive archive,
                                          std::size_t cache_budget_bytes) {
  auto state = std::make_unique<State>();
  state->cfg = ModelConfig::from_json(archive.model);
  state->budget = cache_budget_bytes;
  for (std::size_t i = 0; i < archive.quantized.size(); ++i) {
    state->quantized_index[archive.quantized[i].name] = i;
  }
  for (std::size_t i = 0; i < archive.dense.size(); ++i) {
    state->dense_index[archive.dense[i].name] = i;
  }
  for (std::size_t i = 0; i < archive.reference.size(); ++i) {
    state->reference_index[archive.reference[i].name] = i;
  }
  const bool has_reference = !archive.reference.empty();
  for (const auto& spec : tensor_layout(state->cfg)) {
    if (spec.quantized) {
      auto it = state->quantized_index.find(spec.name);
      if (it == state->quantized_index.end()) {
        throw InputError("weight archive lacks tensor '" + spec.name + "'");
      }
      const auto& qt = archive.quantized[it->second].tensor;
      if (qt.rows != spec.rows || qt.cols != spec.cols) {
        throw InputError("tensor '" + spec.name + "' has the wrong shape");
      }
      if (has_reference) {
        auto rit = state->reference_index.find(spec.name);
        if (rit == state->reference_index.end() ||
            archive.reference[rit->second].values.size() != spec.rows * spec.cols) {
          throw InputError("reference weights incomplete for '" + spec.name + "'");
        }
      }
    } else {
      auto it = state->dense_index.find(spec.name);
      if (it == state->dense_index.end() ||
          archive.dense[it->second].values.size() != spec.rows * spec.cols) {
        throw InputError("weight archive lacks norm gains '" + spec.name + "'");
      }
    }
  }
  state->archive = std::move(archive);
  return ModelVariants(std::move(state));
}

ModelVariants ModelVariants::load(const std::filesystem::path& path,
                                  std::size_t cache_budget_bytes) {
  return from_archive(quant::read_model_file(path), cache_budget_bytes);
}

const ModelConfig& ModelVariants::config() const noexcept { return state_->cfg; }
const quant::WeightArchive& ModelVariants::archive() const noexcept { return state_->archive; }
int ModelVariants::p_max() const noexcept { return state_->archive.p_max; }
bool ModelVariants::has_reference() const noexcept { return !state_->archive.reference.empty(); }

bool ModelVariants::supports(int p) const noexcept {
  return (p >= 1 && p <= p_max()) || (p == kFullPrecision && has_reference());
}

std::shared_ptr<const DenseMatrix> ModelVariants::weights(std::string_view name, int p) const {
  if (!supports(p)) {
    throw ConfigError("model cannot serve precision " + std::to_string(p) +
                      (p == kFullPrecision ? " (no reference weights stored)" : ""));
  }
  State& s = *state_;
  State::Key key{std::string(name), p};
  {
    std::lock_guard lock(s.mu);
    if (auto it = s.entries.find(key); it != s.entries.end()) {
      s.lru.splice(s.lru.begin(), s.lru, it->second.lru_pos);
      return it->second.matrix;
    }
  }

  auto it = s.quantized_index.find(key.first);
  if (it == s.quantized_index.end()) throw ConfigError("unknown tensor '" + key.first + "'");
  const auto& qt = s.archive.quantized[it->second].tensor;
  auto matrix = std::make_shared<DenseMatrix>();
  matrix->rows = qt.rows;
  matrix->cols = qt.cols;
  if (p == kFullPrecision) {
    const auto& ref = s.archive.reference[s.reference_index.at(key.first)].values;
    matrix->data.assign(ref.begin(), ref.end());
  } else {
    matrix->data = quant::dequantize(qt, p);
  }

  std::lock_guard lock(s.mu);
  if (auto existing = s.entries.find(key); existing != s.entries.end()) {
    return existing->second.matrix;  // another thread materialized it first
  }
  s.lru.push_front(key);
  s.entries.emplace(key, State::Entry{matrix, s.lru.begin()});
  s.bytes += matrix->bytes();
  while (s.bytes > s.budget && s.lru.size() > 1) {
    auto victim = s.entries.find(s.lru.back());
    s.bytes -= victim->second.matrix->bytes();
    s.entries.erase(victim);
    s.lru.pop_back();
  }
  return matrix;
}

std::span<const float> ModelVariants::norm(std::string_view name) const {
  auto it = state_->dense_index.find(std::string(name));
  if (it == state_->dense_index.end()) throw ConfigError("unknown norm '" + std::string(name) + "'");
  return state_->archive.dense[it->second].values;
}

std::size_t ModelVariants::cache_bytes() const {
  std::lock_guard lock(state_->mu);
  return state_->bytes;
}

std::size_t ModelVariants::cache_entries() const {
  std::lock_guard lock(state_->mu);
  return state_->entries.size();
}

// ---------------------------------------------------------------- cache

KVCache::KVCache(int n_layers, int width)
    : width_(width), keys_(static_cast<std::size_t>(n_layers)),
      values_(static_cast<std::size_t>(n_layers)) {}

std::size_t KVCache::length() const noexcept {
  return keys_.empty() || width_ == 0 ? 0 : keys_.back().size() / static_cast<std::size_t>(width_);
}

void KVCache::append(int layer, std::span<const double> key, std::span<const double> value) {
  if (key.size() != static_cast<std::size_t>(width_) || value.size() != key.size()) {
    throw ConfigError("KV row width mismatch");
  }
  auto& k = keys_.at(layer);
  auto& v = values_.at(layer);
  k.insert(k.end(), key.begin(), key.end());
  v.insert(v.end(), value.begin(), value.end());
}

// ---------------------------------------------------------------- forward

namespace {

struct LayerView {
  std::shared_ptr<const DenseMatrix> wq, wk, wv, wo, gate, up, down;
  std::span<const float> attn_norm, mlp_norm;
};

struct WeightView {
  std::shared_ptr<const DenseMatrix> embed, head;
  std::vector<LayerView> layers;
  std::span<const float> final_norm;
};

WeightView resolve(const ModelVariants& m, int p) {
  if (!m.supports(p)) {
    throw ConfigError("model cannot serve precision " + std::to_string(p));
  }
  WeightView w;
  w.embed = m.weights("tok_embedding", p);
  w.head = m.weights("lm_head", p);
  w.final_norm = m.norm("final_norm");
  for (int l = 0; l < m.config().n_layers; ++l) {
    LayerView lv;
    lv.wq = m.weights(layer_name(l, "wq"), p);
    lv.wk = m.weights(layer_name(l, "wk"), p);
    lv.wv = m.weights(layer_name(l, "wv"), p);
    lv.wo = m.weights(layer_name(l, "wo"), p);
    lv.gate = m.weights(layer_name(l, "w_gate"), p);
    lv.up = m.weights(layer_name(l, "w_up"), p);
    lv.down = m.weights(layer_name(l, "w_down"), p);
    lv.attn_norm = m.norm(layer_name(l, "attn_norm"));
    lv.mlp_norm = m.norm(layer_name(l, "mlp_norm"));
    w.layers.push_back(std::move(lv));
  }
  return w;
}

void rmsnorm(std::span<const double> x, std::span<const float> gain, std::span<double> out) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
}

void matvec(const DenseMatrix& w, std::span<const double> x, std::span<double> y) {
  for (std::size_t r = 0; r < w.rows; ++r) {
    const double* row = w.data.data() + r * w.cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < w.cols; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
}

void apply_rope(std::span<double> v, std::size_t pos, const ModelConfig& cfg) {
  const int dh = cfg.d_head();
  for (int h = 0; h < cfg.n_heads; ++h) {
    double* head = v.data() + static_cast<std::size_t>(h) * dh;
    for (int j = 0; j < dh / 2; ++j) {
      const double freq = std::pow(cfg.rope_theta, -2.0 * j / dh);
      const double angle = static_cast<double>(pos) * freq;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      const double a = head[2 * j];
      const double b = head[2 * j + 1];
      head[2 * j] = a * c - b * s;
      head[2 * j + 1] = a * s + b * c;
    }
  }
}

void softmax_inplace(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : row) v /= sum;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

void check_token(Token t, const ModelConfig& cfg) {
  if (t < 0 || t >= cfg.vocab_size) {
    throw InputError("token id " + std::to_string(t) + " outside vocabulary of " +
                     std::to_string(cfg.vocab_size));
  }
}

void embed(const WeightView& w, Token t, std::span<double> x) {
  const auto row = w.embed->row(static_cast<std::size_t>(t));
  std::copy(row.begin(), row.end(), x.begin());
}

// Attention of one query row over cached rows [0, n) for every head.
void attend(std::span<const double> q, std::span<const double> keys, std::span<const double> values,
            std::size_t n, const ModelConfig& cfg, int layer, std::size_t pos,
            const ForwardHooks* hooks, std::span<double> out, std::vector<double>& scores) {
  const int dh = cfg.d_head();
  const std::size_t width = static_cast<std::size_t>(cfg.d_model);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::fill(out.begin(), out.end(), 0.0);
  scores.resize(n);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    for (std::size_t u = 0; u < n; ++u) {
      const double* k = keys.data() + u * width + off;
      double dot = 0.0;
      for (int d = 0; d < dh; ++d) dot += q[off + d] * k[d];
      scores[u] = dot * inv_sqrt;
    }
    softmax_inplace(scores);
    if (hooks && hooks->on_attention) hooks->on_attention(layer, h, pos, scores);
    for (std::size_t u = 0; u < n; ++u) {
      const double* v = values.data() + u * width + off;
      for (int d = 0; d < dh; ++d) out[off + d] += scores[u] * v[d];
    }
  }
}

}  // namespace

FullForward forward_full(const ModelVariants& model, int p, std::span<const Token> tokens,
                         const ForwardHooks* hooks) {
  const ModelConfig& cfg = model.config();
  for (Token t : tokens) check_token(t, cfg);
  const WeightView w = resolve(model, p);
  const std::size_t T = tokens.size();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);

  // Layer-major traversal: every position passes through a layer before the next layer.
  DenseMatrix x{T, d, std::vector<double>(T * d)};
  for (std::size_t t = 0; t < T; ++t) embed(w, tokens[t], {x.data.data() + t * d, d});

  FullForward result{{}, KVCache(cfg.n_layers, cfg.d_model)};
  std::vector<double> norm(d), q(T * d), k(T * d), v(T * d), attn(d), proj(d), g(ff), u(ff),
      scores;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerView& lw = w.layers[static_cast<std::size_t>(l)];
    for (std::size_t t = 0; t < T; ++t) {
      rmsnorm(x.row(t), lw.attn_norm, norm);
      std::span<double> qt(q.data() + t * d, d), kt(k.data() + t * d, d), vt(v.data() + t * d, d);
      matvec(*lw.wq, norm, qt);
      matvec(*lw.wk, norm, kt);
      matvec(*lw.wv, norm, vt);
      apply_rope(qt, t, cfg);
      apply_rope(kt, t, cfg);
      result.cache.append(l, kt, vt);
    }
    for (std::size_t t = 0; t < T; ++t) {
      attend({q.data() + t * d, d}, k, v, t + 1, cfg, l, t, hooks, attn, scores);
      matvec(*lw.wo, attn, proj);
      for (std::size_t i = 0; i < d; ++i) x.data[t * d + i] += proj[i];
    }
    for (std::size_t t = 0; t < T; ++t) {
      rmsnorm(x.row(t), lw.mlp_norm, norm);
      matvec(*lw.gate, norm, g);
      matvec(*lw.up, norm, u);
      for (std::size_t i = 0; i < ff; ++i) g[i] = silu(g[i]) * u[i];
      matvec(*lw.down, g, proj);
      for (std::size_t i = 0; i < d; ++i) x.data[t * d + i] += proj[i];
    }
  }

  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  result.logits = DenseMatrix{T, vocab, std::vector<double>(T * vocab)};
  for (std::size_t t = 0; t < T; ++t) {
    rmsnorm(x.row(t), w.final_norm, norm);
    matvec(*w.head, norm, {result.logits.data.data() + t * vocab, vocab});
  }
  return result;
}

PrefillResult prefill(const ModelVariants& model, int p, std::span<const Token> prompt,
                      const ForwardHooks* hooks) {
  if (prompt.empty()) throw InputError("prompt is empty");
  const ModelConfig& cfg = model.config();
  if (prompt.size() >= static_cast<std::size_t>(cfg.max_context)) {
    throw LengthError("prompt of " + std::to_string(prompt.size()) +
                      " tokens does not fit below max_context " + std::to_string(cfg.max_context));
  }
  auto full = forward_full(model, p, prompt, hooks);
  const auto last = full.logits.row(full.logits.rows - 1);
  return {std::vector<double>(last.begin(), last.end()), std::move(full.cache)};
}

std::vector<double> decode_step(const ModelVariants& model, int p, Token token, KVCache& cache,
                                const ForwardHooks* hooks) {
  const ModelConfig& cfg = model.config();
  check_token(token, cfg);
  if (cache.n_layers() != cfg.n_layers || cache.width() != cfg.d_model) {
    throw ConfigError("KV cache does not belong to this model");
  }
  const std::size_t pos = cache.length();
  if (pos < 1) throw InputError("decode_step needs a prefilled cache");
  if (pos >= static_cast<std::size_t>(cfg.max_context)) {
    throw LengthError("KV cache is full at max_context " + std::to_string(cfg.max_context));
  }
  const WeightView w = resolve(model, p);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);

  std::vector<double> x(d), norm(d), q(d), k(d), v(d), attn(d), proj(d), g(ff), u(ff), scores;
  embed(w, token, x);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerView& lw = w.layers[static_cast<std::size_t>(l)];
    rmsnorm(x, lw.attn_norm, norm);
    matvec(*lw.wq, norm, q);
    matvec(*lw.wk, norm, k);
    matvec(*lw.wv, norm, v);
    apply_rope(q, pos, cfg);
    apply_rope(k, pos, cfg);
    cache.append(l, k, v);
    attend(q, cache.keys(l), cache.values(l), pos + 1, cfg, l, pos, hooks, attn, scores);
    matvec(*lw.wo, attn, proj);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
    rmsnorm(x, lw.mlp_norm, norm);
    matvec(*lw.gate, norm, g);
    matvec(*lw.up, norm, u);
    for (std::size_t i = 0; i < ff; ++i) g[i] = silu(g[i]) * u[i];
    matvec(*lw.down, g, proj);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
  }
  std::vector<double> logits(static_cast<std::size_t>(cfg.vocab_size));
  rmsnorm(x, w.final_norm, norm);
  matvec(*w.head, norm, logits);
  return logits;
}

// ---------------------------------------------------------------- sampling

namespace {

void check_finite(std::span<const double> logits) {
  if (logits.empty()) throw InputError("cannot sample from empty logits");
  for (double v : logits) {
    if (!std::isfinite(v)) throw ValueError("cannot sample from non-finite logits");
  }
}

}  // namespace

Token greedy(std::span<const double> logits) {
  check_finite(logits);
  // max_element returns the first maximum, i.e. the lowest index on ties.
  return static_cast<Token>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

Sampler::Sampler(const SamplerConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
  if (cfg.mode == SamplerConfig::Mode::kTemperature && !(cfg.temperature > 0.0)) {
    throw ConfigError("sampling temperature must be > 0");
  }
}

Token Sampler::sample(std::span<const double> logits) {
  if (cfg_.mode == SamplerConfig::Mode::kGreedy) return greedy(logits);
  check_finite(logits);
  std::vector<double> probs(logits.begin(), logits.end());
  for (double& v : probs) v /= cfg_.temperature;
  softmax_inplace(probs);
  const double draw = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (draw < acc) return static_cast<Token>(i);
  }
  return static_cast<Token>(probs.size() - 1);
}

Token sample(std::span<const double> logits, const SamplerConfig& cfg) {
  return Sampler(cfg).sample(logits);
}

// ---------------------------------------------------------------- generation

StaticScheduler::StaticScheduler(schedule::PrecisionSchedule s) : schedule_(std::move(s)) {
  const auto violations = schedule::validate(schedule_);
  if (!violations.empty()) {
    throw ConfigError("invalid schedule: " + violations.front().message);
  }
}

namespace {

std::string logits_digest(std::span<const double> logits) {
  return hash_hex(std::as_bytes(logits), 8);
}

}  // namespace

GenerationTrace generate(const ModelVariants& model, std::span<const Token> prompt,
                         const PrecisionScheduler& scheduler, const GenerationSettings& settings) {
  if (settings.max_new < 0 || settings.max_new > scheduler.horizon()) {
    throw ConfigError("max_new " + std::to_string(settings.max_new) + " exceeds horizon OL=" +
                      std::to_string(scheduler.horizon()));
  }
  const int pf = scheduler.prefill_precision();
  if (!model.supports(pf)) {
    throw ContractViolation("scheduler requested prefill precision " + std::to_string(pf) +
                            " which the model cannot serve");
  }

  GenerationTrace trace;
  trace.prompt.assign(prompt.begin(), prompt.end());
  Sampler sampler(settings.sampler);

  auto [logits, cache] = prefill(model, pf, prompt);
  trace.output.push_back(sampler.sample(logits));
  trace.precisions.push_back(pf);
  trace.logits_hash.push_back(logits_digest(logits));
  trace.schedule = scheduler.plan(cache);
  if (const auto violations = schedule::validate(trace.schedule); !violations.empty()) {
    throw ContractViolation("scheduler produced an invalid schedule: " +
                            violations.front().message);
  }
  if (trace.output.back() == settings.eos) {
    trace.termination = Termination::kEos;
    return trace;
  }

  for (int i = 0; i < settings.max_new; ++i) {
    const int p = schedule::precision_at(trace.schedule, static_cast<std::size_t>(i));
    if (!model.supports(p)) {
      throw ContractViolation("scheduler emitted precision " + std::to_string(p) +
                              " outside the model's precision set");
    }
    logits = decode_step(model, p, trace.output.back(), cache);
    trace.output.push_back(sampler.sample(logits));
    trace.precisions.push_back(p);
    trace.logits_hash.push_back(logits_digest(logits));
    if (trace.output.back() == settings.eos) {
      trace.termination = Termination::kEos;
      return trace;
    }
  }
  trace.termination = Termination::kLength;
  return trace;
}

// ---------------------------------------------------------------- tokenizer

Tokenizer Tokenizer::byte_level() {
  Tokenizer t;
  t.pieces_.resize(257);
  for (int b = 0; b < 256; ++b) t.pieces_[b] = std::string(1, static_cast<char>(b));
  t.pieces_[256] = "";
  t.eos_ = 256;
  t.longest_ = 1;
  t.byte_level_ = true;
  return t;
}

Tokenizer Tokenizer::from_json(const nlohmann::json& vocab) {
  Tokenizer t;
  t.byte_level_ = false;
  try {
    t.pieces_ = vocab.at("tokens").get<std::vector<std::string>>();
    t.eos_ = vocab.at("eos").get<Token>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("invalid vocabulary: ") + e.what());
  }
  if (t.pieces_.size() < 2 || t.eos_ < 0 || t.eos_ >= static_cast<Token>(t.pieces_.size())) {
    throw InputError("vocabulary needs >= 2 tokens and a valid eos id");
  }
  t.longest_ = 1;
  for (const auto& p : t.pieces_) t.longest_ = std::max(t.longest_, p.size());
  return t;
}

Tokenizer Tokenizer::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open vocabulary '" + path.string() + "'");
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(std::string("vocabulary is not valid JSON: ") + e.what());
  }
}

std::vector<Token> Tokenizer::encode(std::string_view text) const {
  std::vector<Token> out;
  if (byte_level_) {
    for (unsigned char c : text) out.push_back(static_cast<Token>(c));
    return out;
  }
  std::unordered_map<std::string_view, Token> lookup;
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (static_cast<Token>(i) != eos_ && !pieces_[i].empty()) {
      lookup.emplace(pieces_[i], static_cast<Token>(i));
    }
  }
  std::size_t pos = 0;
  while (pos < text.size()) {
    bool matched = false;
    for (std::size_t len = std::min(longest_, text.size() - pos); len > 0; --len) {
      if (auto it = lookup.find(text.substr(pos, len)); it != lookup.end()) {
        out.push_back(it->second);
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) {
      throw InputError("text at byte " + std::to_string(pos) + " has no vocabulary entry");
    }
  }
  return out;
}

std::string Tokenizer::decode(std::span<const Token> tokens) const {
  std::string out;
  for (Token t : tokens) {
    if (t == eos_) continue;
    if (t < 0 || t >= static_cast<Token>(pieces_.size())) {
      throw InputError("token id " + std::to_string(t) + " outside vocabulary");
    }
    out += pieces_[static_cast<std::size_t>(t)];
  }
  return out;
}

}  // namespace pmpd::lm
