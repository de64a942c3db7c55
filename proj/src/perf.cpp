#include "pmpd/perf.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pmpd/errors.hpp"

namespace pmpd::perf {
namespace {

using schedule::kFullPrecision;

double combine(const HardwareConfig& hw, double compute, double memory) {
  return hw.overlap ? std::max(compute, memory) : compute + memory;
}

double positive(const nlohmann::json& j, const char* key) {
  const double v = j.at(key).get<double>();
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw ConfigError(std::string("hardware config: '") + key + "' must be positive");
  }
  return v;
}

const char* kind_name(MatrixShape::Kind k) {
  switch (k) {
    case MatrixShape::Kind::kAttention: return "attention";
    case MatrixShape::Kind::kMlp: return "mlp";
    case MatrixShape::Kind::kHead: return "head";
  }
  return "?";
}

std::int64_t sum_kind(const ModelFootprint& fp, MatrixShape::Kind kind) {
  std::int64_t n = 0;
  for (const auto& m : fp.matrices) {
    if (m.kind == kind) n += m.params();
  }
  return n;
}

}  // namespace

void HardwareConfig::validate() const {
  if (mac_units <= 0) throw ConfigError("hardware config: mac_units must be positive");
  if (!(clock_hz > 0.0) || !std::isfinite(clock_hz)) {
    throw ConfigError("hardware config: clock_hz must be positive");
  }
  if (!(mem_bw_bytes_per_s > 0.0) || !std::isfinite(mem_bw_bytes_per_s)) {
    throw ConfigError("hardware config: mem_bw_bytes_per_s must be positive");
  }
}

nlohmann::json HardwareConfig::to_json() const {
  return {{"name", name},
          {"mac_units", mac_units},
          {"clock_hz", clock_hz},
          {"mem_bw_bytes_per_s", mem_bw_bytes_per_s},
          {"overlap", overlap}};
}

HardwareConfig HardwareConfig::from_json(const nlohmann::json& j) {
  HardwareConfig hw;
  try {
    hw.name = j.value("name", std::string{});
    hw.mac_units = j.at("mac_units").get<std::int64_t>();
    hw.clock_hz = positive(j, "clock_hz");
    hw.mem_bw_bytes_per_s = positive(j, "mem_bw_bytes_per_s");
    hw.overlap = j.value("overlap", true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("hardware config: ") + e.what());
  }
  hw.validate();
  return hw;
}

HardwareConfig HardwareConfig::npu_4k() { return {"npu-4k", 4096, 1e9, 32e9, true}; }
HardwareConfig HardwareConfig::npu_16k() { return {"npu-16k", 16384, 1e9, 32e9, true}; }

std::int64_t ModelFootprint::attention_params_per_layer() const {
  return n_layers == 0 ? 0 : sum_kind(*this, MatrixShape::Kind::kAttention) / n_layers;
}
std::int64_t ModelFootprint::mlp_params_per_layer() const {
  return n_layers == 0 ? 0 : sum_kind(*this, MatrixShape::Kind::kMlp) / n_layers;
}
std::int64_t ModelFootprint::head_params() const { return sum_kind(*this, MatrixShape::Kind::kHead); }

std::int64_t ModelFootprint::linear_params() const {
  std::int64_t n = 0;
  for (const auto& m : matrices) n += m.params();
  return n;
}

std::int64_t ModelFootprint::total_params() const {
  return linear_params() + embedding_params + norm_params;
}

std::int64_t ModelFootprint::quant_groups() const {
  std::int64_t g = 0;
  for (const auto& m : matrices) {
    const std::int64_t per_row = group_size <= 0 ? 1 : (m.cols + group_size - 1) / group_size;
    g += m.rows * per_row * m.count;
  }
  return g;
}

void ModelFootprint::validate() const {
  if (n_layers <= 0 || matrices.empty()) throw ConfigError("footprint: needs layers and matrices");
  for (const auto& m : matrices) {
    if (m.rows <= 0 || m.cols <= 0 || m.count <= 0) {
      throw ConfigError("footprint: matrix '" + m.name + "' has a non-positive dimension");
    }
  }
  if (embedding_params < 0 || norm_params < 0 || kv_bytes_per_token_layer < 0 || group_size < 0 ||
      metadata_bytes_per_group < 0.0) {
    throw ConfigError("footprint: negative size");
  }
}

nlohmann::json ModelFootprint::to_json() const {
  nlohmann::json mats = nlohmann::json::array();
  for (const auto& m : matrices) {
    mats.push_back({{"name", m.name},
                    {"kind", kind_name(m.kind)},
                    {"rows", m.rows},
                    {"cols", m.cols},
                    {"count", m.count}});
  }
  return {{"name", name},
          {"n_layers", n_layers},
          {"matrices", mats},
          {"attention_params_per_layer", attention_params_per_layer()},
          {"mlp_params_per_layer", mlp_params_per_layer()},
          {"head_params", head_params()},
          {"embedding_params", embedding_params},
          {"norm_params", norm_params},
          {"total_params", total_params()},
          {"kv_bytes_per_token_layer", kv_bytes_per_token_layer},
          {"group_size", group_size},
          {"metadata_bytes_per_group", metadata_bytes_per_group}};
}

ModelFootprint ModelFootprint::llama_like(std::string name, int n_layers, int d_model, int d_ff,
                                          int vocab, std::int64_t group_size) {
  using K = MatrixShape::Kind;
  ModelFootprint fp;
  fp.name = std::move(name);
  fp.n_layers = n_layers;
  const std::int64_t d = d_model;
  const std::int64_t f = d_ff;
  const std::int64_t L = n_layers;
  fp.matrices = {{"q_proj", K::kAttention, d, d, L},  {"k_proj", K::kAttention, d, d, L},
                 {"v_proj", K::kAttention, d, d, L},  {"o_proj", K::kAttention, d, d, L},
                 {"gate_proj", K::kMlp, f, d, L},     {"up_proj", K::kMlp, f, d, L},
                 {"down_proj", K::kMlp, d, f, L},     {"lm_head", K::kHead, vocab, d, 1}};
  fp.embedding_params = static_cast<std::int64_t>(vocab) * d;
  fp.norm_params = (2 * L + 1) * d;
  fp.kv_bytes_per_token_layer = 2 * d * 2;
  fp.group_size = group_size;
  fp.validate();
  return fp;
}

ModelFootprint ModelFootprint::from_model_config(const lm::ModelConfig& cfg,
                                                 std::int64_t group_size) {
  cfg.validate();
  auto fp = llama_like("tinylm", cfg.n_layers, cfg.d_model, cfg.d_ff, cfg.vocab_size, group_size);
  return fp;
}

ModelFootprint ModelFootprint::vicuna_7b() {
  return llama_like("vicuna-7b", 32, 4096, 11008, 32000, 0);
}

ModelFootprint ModelFootprint::mobilellama_1_4b() {
  return llama_like("mobilellama-1.4b", 24, 2048, 5632, 32000, 0);
}

ModelFootprint ModelFootprint::preset(const std::string& name) {
  if (name == "vicuna-7b") return vicuna_7b();
  if (name == "mobilellama-1.4b") return mobilellama_1_4b();
  throw ConfigError("unknown footprint preset '" + name + "' (vicuna-7b, mobilellama-1.4b)");
}

nlohmann::json PerfOptions::to_json() const {
  return {{"include_kv", include_kv},
          {"include_compute", include_compute},
          {"include_metadata", include_metadata}};
}

double weight_bytes(const ModelFootprint& fp, int p, const PerfOptions& opts) {
  if (p < 1) throw ConfigError("weight_bytes: precision must be >= 1");
  double bytes = static_cast<double>(fp.linear_params()) * p / 8.0;
  bytes += static_cast<double>(fp.norm_params) * 2.0;
  if (opts.include_metadata && p != kFullPrecision) {
    bytes += static_cast<double>(fp.quant_groups()) * fp.metadata_bytes_per_group;
  }
  return bytes;
}

LatencyParts decode_token_parts(const ModelFootprint& fp, int p, const HardwareConfig& hw,
                                std::int64_t context_len, const PerfOptions& opts) {
  if (context_len < 0) throw InputError("decode_token_latency: negative context length");
  LatencyParts parts;
  double bytes = weight_bytes(fp, p, opts);
  if (opts.include_kv) {
    bytes += static_cast<double>(context_len + 1) * static_cast<double>(fp.kv_bytes_per_token_layer) *
             fp.n_layers;
  }
  parts.memory_s = bytes / hw.mem_bw_bytes_per_s;
  if (opts.include_compute) {
    parts.compute_s = 2.0 * static_cast<double>(fp.linear_params()) /
                      (static_cast<double>(hw.mac_units) * hw.clock_hz);
  }
  parts.total_s = combine(hw, parts.compute_s, parts.memory_s);
  return parts;
}

double decode_token_latency(const ModelFootprint& fp, int p, const HardwareConfig& hw,
                            std::int64_t context_len, const PerfOptions& opts) {
  return decode_token_parts(fp, p, hw, context_len, opts).total_s;
}

LatencyParts prefill_parts(const ModelFootprint& fp, int p, const HardwareConfig& hw,
                           std::int64_t prompt_len, const PerfOptions& opts) {
  if (prompt_len < 1) throw InputError("prefill_latency: prompt_len must be >= 1");
  LatencyParts parts;
  double bytes = weight_bytes(fp, p, opts);
  if (opts.include_kv) {
    bytes += static_cast<double>(prompt_len) * static_cast<double>(fp.kv_bytes_per_token_layer) *
             fp.n_layers;
  }
  parts.memory_s = bytes / hw.mem_bw_bytes_per_s;
  if (opts.include_compute) {
    parts.compute_s = 2.0 * static_cast<double>(fp.linear_params()) * static_cast<double>(prompt_len) /
                      (static_cast<double>(hw.mac_units) * hw.clock_hz);
  }
  parts.total_s = combine(hw, parts.compute_s, parts.memory_s);
  return parts;
}

double prefill_latency(const ModelFootprint& fp, int p, const HardwareConfig& hw,
                       std::int64_t prompt_len, const PerfOptions& opts) {
  return prefill_parts(fp, p, hw, prompt_len, opts).total_s;
}

namespace {

double decode_total(const ModelFootprint& fp, const schedule::PrecisionSchedule& s,
                    const HardwareConfig& hw, std::int64_t prompt_len, std::int64_t gen_len,
                    const PerfOptions& opts) {
  double t = 0.0;
  for (std::int64_t i = 0; i < gen_len; ++i) {
    t += decode_token_latency(fp, schedule::precision_at(s, static_cast<std::size_t>(i)), hw,
                              prompt_len + i, opts);
  }
  return t;
}

double end_to_end(const ModelFootprint& fp, const schedule::PrecisionSchedule& s,
                  const HardwareConfig& hw, std::int64_t prompt_len, std::int64_t gen_len,
                  const PerfOptions& opts) {
  return prefill_latency(fp, s.prefill, hw, prompt_len, opts) +
         decode_total(fp, s, hw, prompt_len, gen_len, opts);
}

}  // namespace

PerfReport pipeline_perf(const ModelFootprint& fp, const schedule::PrecisionSchedule& s,
                         const HardwareConfig& hw, std::int64_t prompt_len, std::int64_t gen_len,
                         const PerfOptions& opts) {
  hw.validate();
  fp.validate();
  if (!schedule::validate(s).empty()) throw InputError("pipeline_perf: invalid schedule");
  if (prompt_len < 1) throw InputError("pipeline_perf: prompt_len must be >= 1");
  if (gen_len < 1 || gen_len > s.horizon) {
    throw InputError("pipeline_perf: gen_len must be in [1, horizon=" + std::to_string(s.horizon) + "]");
  }
  PerfReport r;
  r.model = fp.name;
  r.hardware = hw.name;
  r.prompt_len = prompt_len;
  r.gen_len = gen_len;
  r.prefill_bits = s.prefill;
  r.prefill_s = prefill_latency(fp, s.prefill, hw, prompt_len, opts);
  r.decode_s = decode_total(fp, s, hw, prompt_len, gen_len, opts);
  r.end_to_end_s = r.prefill_s + r.decode_s;
  r.tokens_per_s = static_cast<double>(gen_len) / r.decode_s;
  r.avg_bits = schedule::avg_bitwidth(s, static_cast<std::size_t>(gen_len));
  for (std::int64_t i = 0; i < gen_len; ++i) {
    ++r.decode_steps[schedule::precision_at(s, static_cast<std::size_t>(i))];
  }
  for (int p : s.precisions) r.decode_token_s[p] = decode_token_latency(fp, p, hw, prompt_len, opts);
  r.decode_token_s[kFullPrecision] = decode_token_latency(fp, kFullPrecision, hw, prompt_len, opts);

  const int H = s.horizon;
  r.fp16_end_to_end_s = end_to_end(fp, schedule::PrecisionSchedule::constant(kFullPrecision, H),
                                   hw, prompt_len, gen_len, opts);
  r.uniform_high_end_to_end_s = end_to_end(
      fp, schedule::PrecisionSchedule::constant(s.highest(), H, s.prefill), hw, prompt_len, gen_len, opts);
  r.uniform_low_end_to_end_s = end_to_end(
      fp, schedule::PrecisionSchedule::constant(s.lowest(), H, s.prefill), hw, prompt_len, gen_len, opts);
  r.speedup_vs_fp16 = r.fp16_end_to_end_s / r.end_to_end_s;
  r.speedup_vs_uniform_high = r.uniform_high_end_to_end_s / r.end_to_end_s;
  if (s.prefill < kFullPrecision) {
    const double raised = prefill_latency(fp, s.prefill + 1, hw, prompt_len, opts) + r.decode_s;
    r.prefill_uplift_pct = 100.0 * (raised - r.end_to_end_s) / r.end_to_end_s;
  }
  return r;
}

nlohmann::json PerfReport::to_json() const {
  nlohmann::json per_p = nlohmann::json::object();
  for (const auto& [p, t] : decode_token_s) per_p[std::to_string(p)] = t;
  nlohmann::json steps = nlohmann::json::object();
  for (const auto& [p, n] : decode_steps) steps[std::to_string(p)] = n;
  return {{"model", model},
          {"hardware", hardware},
          {"prompt_len", prompt_len},
          {"gen_len", gen_len},
          {"prefill_bits", prefill_bits},
          {"prefill_s", prefill_s},
          {"decode_s", decode_s},
          {"end_to_end_s", end_to_end_s},
          {"tokens_per_s", tokens_per_s},
          {"avg_bits", avg_bits},
          {"decode_token_s", per_p},
          {"decode_steps", steps},
          {"fp16_end_to_end_s", fp16_end_to_end_s},
          {"uniform_high_end_to_end_s", uniform_high_end_to_end_s},
          {"uniform_low_end_to_end_s", uniform_low_end_to_end_s},
          {"speedup_vs_fp16", speedup_vs_fp16},
          {"speedup_vs_uniform_high", speedup_vs_uniform_high},
          {"prefill_uplift_pct",
           prefill_uplift_pct ? nlohmann::json(*prefill_uplift_pct) : nlohmann::json(nullptr)}};
}

std::string reports_to_csv(const std::vector<PerfReport>& reports) {
  std::ostringstream out;
  out.precision(10);
  out << "model,hardware,prompt_len,gen_len,prefill_bits,avg_bits,prefill_s,decode_s,"
         "end_to_end_s,tokens_per_s,speedup_vs_fp16,speedup_vs_uniform_high\n";
  for (const auto& r : reports) {
    out << r.model << ',' << r.hardware << ',' << r.prompt_len << ',' << r.gen_len << ','
        << r.prefill_bits << ',' << r.avg_bits << ',' << r.prefill_s << ',' << r.decode_s << ','
        << r.end_to_end_s << ',' << r.tokens_per_s << ',' << r.speedup_vs_fp16 << ','
        << r.speedup_vs_uniform_high << '\n';
  }
  return out.str();
}

WeightedLatency weighted_gpu_latency(const std::map<int, double>& kernel_us,
                                     const schedule::PrecisionSchedule& s, std::int64_t gen_len) {
  if (gen_len < 1) throw InputError("weighted_gpu_latency: gen_len must be >= 1");
  WeightedLatency w;
  double sum = 0.0;
  for (std::int64_t i = 0; i < gen_len; ++i) {
    const int p = schedule::precision_at(s, static_cast<std::size_t>(i));
    const auto it = kernel_us.find(p);
    if (it == kernel_us.end()) {
      throw InputError("weighted_gpu_latency: no kernel latency for " + std::to_string(p) + " bits");
    }
    sum += it->second;
  }
  w.weighted_us = sum / static_cast<double>(gen_len);
  if (const auto it = kernel_us.find(kFullPrecision); it != kernel_us.end()) {
    w.fp16_us = it->second;
    w.speedup_vs_fp16 = it->second / w.weighted_us;
  }
  return w;
}

KernelTable KernelTable::from_json(const nlohmann::json& j) {
  KernelTable t;
  try {
    t.device = j.at("device").get<std::string>();
    for (const auto& [model, kernels] : j.at("models").items()) {
      for (const auto& [kernel, entries] : kernels.items()) {
        auto& dst = t.models[model][kernel];
        for (const auto& [bits, us] : entries.items()) {
          const double v = us.get<double>();
          if (!(v > 0.0)) throw InputError("kernel table: latency must be positive");
          dst[std::stoi(bits)] = v;
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("kernel table: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw InputError("kernel table: precision keys must be integers");
  }
  return t;
}

const std::map<int, double>& KernelTable::kernel(const std::string& model,
                                                 const std::string& name) const {
  const auto m = models.find(model);
  if (m == models.end()) throw InputError("kernel table has no model '" + model + "'");
  const auto k = m->second.find(name);
  if (k == m->second.end()) throw InputError("kernel table has no kernel '" + name + "' for " + model);
  return k->second;
}

}  // namespace pmpd::perf
