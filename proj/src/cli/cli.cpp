#include "pmpd/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>
#include <tuple>
#include <utility>

#include <CLI11.hpp>

#include "pmpd/errors.hpp"
#include "pmpd/io.hpp"
#include "pmpd/learnsched.hpp"
#include "pmpd/metrics.hpp"
#include "pmpd/perf.hpp"
#include "pmpd/quant.hpp"
#include "pmpd/solver.hpp"
#include "pmpd/util.hpp"
#include "pmpd/weight_file.hpp"

namespace pmpd::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double epsilon_from_json(const json& v) {
  if (v.is_string()) {
    if (v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
    throw ConfigError("quality.epsilon must be a number or \"inf\"");
  }
  return v.get<double>();
}

json epsilon_to_json(double e) {
  if (std::isinf(e)) return "inf";
  return e;
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

void read_path(const json& j, const char* key, fs::path& dst) {
  if (j.contains(key)) dst = j.at(key).get<std::string>();
}

}  // namespace

RunConfig RunConfig::from_json(const json& j, fs::path base_dir) {
  RunConfig c;
  c.base_dir = std::move(base_dir);
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  try {
    reject_unknown(j,
                   {"model", "model_config", "p_max", "group_size", "precisions", "quality", "grid_n",
                    "horizon", "max_prompt_tokens", "max_prompts", "sampler", "tokenizer", "corpus",
                    "hardware", "footprint", "perf", "learnsched", "output_dir", "seed", "threads"},
                   "run config");
    if (j.contains("model") && !j.at("model").is_null()) c.model = j.at("model").get<std::string>();
    if (j.contains("model_config")) c.model_config = lm::ModelConfig::from_json(j.at("model_config"));
    read_opt(j, "p_max", c.p_max);
    read_opt(j, "group_size", c.group_size);
    read_opt(j, "precisions", c.precisions);
    if (j.contains("quality")) {
      const auto& q = j.at("quality");
      reject_unknown(q, {"q_ref", "epsilon"}, "quality");
      if (q.contains("q_ref") && !q.at("q_ref").is_null()) c.q_ref = q.at("q_ref").get<double>();
      if (q.contains("epsilon")) c.epsilon = epsilon_from_json(q.at("epsilon"));
    }
    read_opt(j, "grid_n", c.grid_n);
    read_opt(j, "horizon", c.horizon);
    read_opt(j, "max_prompt_tokens", c.max_prompt_tokens);
    read_opt(j, "max_prompts", c.max_prompts);
    if (j.contains("sampler")) {
      const auto& s = j.at("sampler");
      reject_unknown(s, {"mode", "temperature"}, "sampler");
      const auto mode = s.value("mode", std::string("greedy"));
      if (mode == "greedy") {
        c.sampler.mode = lm::SamplerConfig::Mode::kGreedy;
      } else if (mode == "temperature") {
        c.sampler.mode = lm::SamplerConfig::Mode::kTemperature;
      } else {
        throw ConfigError("sampler.mode must be \"greedy\" or \"temperature\"");
      }
      read_opt(s, "temperature", c.sampler.temperature);
    }
    if (j.contains("tokenizer") && !j.at("tokenizer").is_null()) {
      c.tokenizer = j.at("tokenizer").get<std::string>();
    }
    if (j.contains("corpus")) {
      const auto& k = j.at("corpus");
      reject_unknown(k, {"calibration", "validation", "labels", "test"}, "corpus");
      read_path(k, "calibration", c.corpus_calibration);
      read_path(k, "validation", c.corpus_validation);
      read_path(k, "labels", c.corpus_labels);
      read_path(k, "test", c.corpus_test);
    }
    if (j.contains("hardware") && !j.at("hardware").is_null()) {
      c.hardware = j.at("hardware").get<std::string>();
    }
    read_opt(j, "footprint", c.footprint);
    if (j.contains("perf")) {
      const auto& p = j.at("perf");
      reject_unknown(p, {"prompt_len", "gen_len"}, "perf");
      read_opt(p, "prompt_len", c.perf_prompt_len);
      read_opt(p, "gen_len", c.perf_gen_len);
    }
    if (j.contains("learnsched")) {
      const auto& l = j.at("learnsched");
      reject_unknown(l, {"hidden", "lr", "momentum", "epochs", "batch", "feature_layer"}, "learnsched");
      read_opt(l, "hidden", c.sched_hidden);
      read_opt(l, "lr", c.sched_lr);
      read_opt(l, "momentum", c.sched_momentum);
      read_opt(l, "epochs", c.sched_epochs);
      read_opt(l, "batch", c.sched_batch);
      read_opt(l, "feature_layer", c.sched_feature_layer);
    }
    read_path(j, "output_dir", c.output_dir);
    read_opt(j, "seed", c.seed);
    read_opt(j, "threads", c.threads);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }

  c.model_config.validate();
  if (c.p_max < 1 || c.p_max > quant::kMaxStoredBits) throw ConfigError("p_max must be in [1, 8]");
  if (c.group_size < 1) throw ConfigError("group_size must be positive");
  quant::PrecisionSet set(c.precisions);
  if (set.max() > c.p_max) throw ConfigError("precisions exceed p_max");
  c.precisions.assign(set.bits().begin(), set.bits().end());
  if (!(c.epsilon >= 0.0)) throw ConfigError("quality.epsilon must be >= 0");
  if (c.q_ref && !std::isfinite(*c.q_ref)) throw ConfigError("quality.q_ref must be finite");
  if (c.grid_n < 2) throw ConfigError("grid_n must be >= 2");
  if (c.horizon < c.grid_n - 1) throw ConfigError("horizon must be >= grid_n - 1");
  if (c.max_prompt_tokens < 1) throw ConfigError("max_prompt_tokens must be positive");
  if (c.max_prompt_tokens + c.horizon + 1 > c.model_config.max_context) {
    throw ConfigError("max_prompt_tokens + horizon must stay below model max_context");
  }
  if (c.max_prompts < 0) throw ConfigError("max_prompts must be >= 0");
  if (c.perf_prompt_len < 1 || c.perf_gen_len < 1) throw ConfigError("perf lengths must be positive");
  if (c.threads < 1) c.threads = 1;
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  const auto j = io::read_json(path);
  auto base = path.parent_path();
  if (base.empty()) base = ".";
  return from_json(j, base);
}

json RunConfig::to_json() const {
  json j = {{"model_config", model_config.to_json()},
            {"p_max", p_max},
            {"group_size", group_size},
            {"precisions", precisions},
            {"quality", {{"q_ref", q_ref ? json(*q_ref) : json(nullptr)}, {"epsilon", epsilon_to_json(epsilon)}}},
            {"grid_n", grid_n},
            {"horizon", horizon},
            {"max_prompt_tokens", max_prompt_tokens},
            {"max_prompts", max_prompts},
            {"sampler",
             {{"mode", sampler.mode == lm::SamplerConfig::Mode::kGreedy ? "greedy" : "temperature"},
              {"temperature", sampler.temperature}}},
            {"corpus",
             {{"calibration", corpus_calibration.generic_string()},
              {"validation", corpus_validation.generic_string()},
              {"labels", corpus_labels.generic_string()},
              {"test", corpus_test.generic_string()}}},
            {"footprint", footprint},
            {"perf", {{"prompt_len", perf_prompt_len}, {"gen_len", perf_gen_len}}},
            {"learnsched",
             {{"hidden", sched_hidden},
              {"lr", sched_lr},
              {"momentum", sched_momentum},
              {"epochs", sched_epochs},
              {"batch", sched_batch},
              {"feature_layer", sched_feature_layer}}},
            {"seed", seed}};
  j["model"] = model ? json(model->generic_string()) : json(nullptr);
  j["tokenizer"] = tokenizer ? json(tokenizer->generic_string()) : json(nullptr);
  j["hardware"] = hardware ? json(hardware->generic_string()) : json(nullptr);
  return j;
}

std::string RunConfig::hash() const { return hash_hex(to_json().dump(), 16); }

fs::path RunConfig::resolve(const fs::path& p) const {
  return p.is_absolute() ? p : base_dir / p;
}

fs::path RunConfig::model_path() const {
  return model ? resolve(*model) : output("model.pmpd");
}

fs::path RunConfig::output(const std::string& name) const { return resolve(output_dir) / name; }

lm::Tokenizer make_tokenizer(const RunConfig& cfg) {
  return cfg.tokenizer ? lm::Tokenizer::from_file(cfg.resolve(*cfg.tokenizer)) : lm::Tokenizer::byte_level();
}

std::vector<std::vector<lm::Token>> load_prompts(const RunConfig& cfg, const fs::path& path) {
  const auto tok = make_tokenizer(cfg);
  std::vector<std::vector<lm::Token>> prompts;
  for (const auto& line : io::read_lines(path)) {
    auto ids = tok.encode(line);
    if (ids.size() > static_cast<std::size_t>(cfg.max_prompt_tokens)) {
      ids.resize(static_cast<std::size_t>(cfg.max_prompt_tokens));
    }
    if (ids.empty()) continue;
    prompts.push_back(std::move(ids));
    if (cfg.max_prompts > 0 && prompts.size() >= static_cast<std::size_t>(cfg.max_prompts)) break;
  }
  if (prompts.empty()) throw InputError("corpus " + path.string() + " has no prompts");
  return prompts;
}

lm::GenerationSettings generation_settings(const RunConfig& cfg) {
  lm::GenerationSettings s;
  s.sampler = cfg.sampler;
  s.sampler.seed = derive_seed(cfg.seed, "sampler");
  s.eos = make_tokenizer(cfg).eos();
  s.max_new = cfg.horizon;
  return s;
}

namespace {

// ---- shared helpers --------------------------------------------------------

struct Context {
  RunConfig cfg;
  std::ostream& out;
};

lm::ModelVariants load_model(const RunConfig& cfg) {
  auto model = lm::ModelVariants::load(cfg.model_path());
  for (int p : cfg.precisions) {
    if (!model.supports(p)) {
      throw ConfigError("model file stores p_max=" + std::to_string(model.p_max()) +
                        ", config asks for " + std::to_string(p) + " bits");
    }
  }
  return model;
}


json header(const RunConfig& cfg, const char* format) {
  return {{"format", format}, {"config_hash", cfg.hash()}, {"seed", cfg.seed}};
}

// Next precision below p in the configured set, if any.
std::optional<int> next_lower(const RunConfig& cfg, int p) {
  for (int q : cfg.precisions) {
    if (q < p) return q;
  }
  return std::nullopt;
}

// Decode pair derived from the calibrated precision: (decode, next lower), or
// (next higher, decode) when calibration already landed on the lowest.
std::optional<int> next_higher(const RunConfig& cfg, int p) {
  std::optional<int> higher;
  for (int q : cfg.precisions) {
    if (q > p && (!higher || q < *higher)) higher = q;
  }
  return higher;
}

std::pair<int, int> decode_pair(const RunConfig& cfg, int decode) {
  if (auto low = next_lower(cfg, decode)) return {decode, *low};
  if (auto high = next_higher(cfg, decode)) return {*high, decode};
  throw ConfigError("the configured precision set needs at least two precisions");
}

struct Calibration {
  int prefill = 0;
  int decode = 0;
  schedule::QualityTarget target;
};

Calibration read_calibration(const fs::path& path) {
  const auto j = io::read_json(path);
  Calibration c;
  try {
    c.prefill = j.at("prefill").get<int>();
    c.decode = j.at("decode").get<int>();
    c.target.q_ref = j.at("target").at("q_ref").get<double>();
    c.target.epsilon = epsilon_from_json(j.at("target").at("epsilon"));
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  if (c.prefill < c.decode || c.decode < 1) throw InputError(path.string() + ": inconsistent precisions");
  return c;
}

fs::path out_path(const RunConfig& cfg, const std::string& flag, const std::string& fallback) {
  return flag.empty() ? cfg.output(fallback) : fs::path(flag);
}

fs::path in_path(const RunConfig& cfg, const std::string& flag, const std::string& fallback) {
  return flag.empty() ? cfg.output(fallback) : fs::path(flag);
}

// ---- quantize --------------------------------------------------------------

struct QuantizeArgs {
  std::string from;
  int pmax = 0;
  int group_size = 0;
  bool no_reference = false;
  std::string out;
};

void cmd_quantize(Context& ctx, const QuantizeArgs& a) {
  auto& cfg = ctx.cfg;
  const int p_max = a.pmax > 0 ? a.pmax : cfg.p_max;
  const int group = a.group_size > 0 ? a.group_size : cfg.group_size;
  const quant::UniformNestedQuantizer quantizer(p_max, static_cast<std::size_t>(group));

  lm::ModelConfig mcfg = cfg.model_config;
  std::string source = "random";
  std::optional<lm::ModelVariants> model;
  if (!a.from.empty()) {
    auto src = quant::read_model_file(a.from);
    if (src.reference.empty()) {
      throw InputError(a.from + " stores no unquantized tensors to quantize from");
    }
    mcfg = lm::ModelConfig::from_json(src.model);
    std::vector<quant::DenseTensor> tensors = src.reference;
    tensors.insert(tensors.end(), src.dense.begin(), src.dense.end());
    model.emplace(lm::ModelVariants::from_dense(mcfg, std::move(tensors), quantizer, true));
    source = fs::path(a.from).filename().string();
  } else {
    model.emplace(lm::ModelVariants::random(mcfg, derive_seed(cfg.seed, "weights"), p_max,
                                            static_cast<std::size_t>(group), true));
  }

  quant::WeightArchive archive = model->archive();
  json tensors = json::array();
  bool all_ok = true;
  for (std::size_t t = 0; t < archive.quantized.size(); ++t) {
    const auto& nt = archive.quantized[t];
    const auto& ref = archive.reference.at(t).values;
    const auto& qt = nt.tensor;
    double max_err = 0.0;
    double max_ratio = 0.0;
    double max_step = 0.0;
    json rmse = json::object();
    for (int p = p_max; p >= 1; --p) {
      const auto deq = quant::dequantize(qt, p);
      double sq = 0.0;
      for (std::size_t i = 0; i < deq.size(); ++i) {
        const double e = std::abs(deq[i] - static_cast<double>(ref[i]));
        sq += e * e;
        if (p == p_max) {
          const double step = qt.steps[qt.group_of(i / qt.cols, i % qt.cols)];
          max_err = std::max(max_err, e);
          max_step = std::max(max_step, static_cast<double>(step));
          if (step > 0.0f) max_ratio = std::max(max_ratio, e / step);
        }
      }
      rmse[std::to_string(p)] = std::sqrt(sq / static_cast<double>(deq.size()));
    }
    // Half a step plus slack for the f32 rounding of min and step.
    const bool ok = max_ratio <= 0.5 + 1e-4;
    all_ok = all_ok && ok;
    tensors.push_back({{"name", nt.name},
                       {"rows", qt.rows},
                       {"cols", qt.cols},
                       {"groups", qt.num_groups()},
                       {"max_abs_error", max_err},
                       {"max_step", max_step},
                       {"max_error_over_step", max_ratio},
                       {"within_half_step", ok},
                       {"rmse", rmse}});
  }
  if (a.no_reference) archive.reference.clear();

  const fs::path dst = a.out.empty() ? cfg.model_path() : fs::path(a.out);
  if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
  quant::write_model_file(dst, archive);
  const auto bytes = quant::serialize_model(archive);

  json report = header(cfg, "pmpd-quantize-report");
  report["source"] = source;
  report["quantizer"] = quantizer.name();
  report["p_max"] = p_max;
  report["group_size"] = group;
  report["model"] = mcfg.to_json();
  report["file_bytes"] = bytes.size();
  report["file_hash"] = hash_hex(bytes, 16);
  report["has_reference"] = !archive.reference.empty();
  report["all_within_half_step"] = all_ok;
  report["tensors"] = tensors;
  io::write_json(cfg.output("quantize_report.json"), report);
  ctx.out << "wrote " << dst.string() << " (" << bytes.size() << " bytes)\n";
  for (const auto& t : tensors) {
    ctx.out << "  " << t["name"].get<std::string>() << " max_err=" << t["max_abs_error"].get<double>()
            << " max_err/step=" << t["max_error_over_step"].get<double>() << "\n";
  }
  if (!all_ok) throw ContractViolation("quantization error exceeded half a step");
}

// ---- calibrate -------------------------------------------------------------

struct CalibrateArgs {
  std::optional<double> q_ref;
  std::string epsilon;
  std::string out;
};

void cmd_calibrate(Context& ctx, const CalibrateArgs& a) {
  auto& cfg = ctx.cfg;
  const auto model = load_model(cfg);
  const quant::PrecisionSet set(cfg.precisions);
  const schedule::ModelQualityEvaluator ev(model, load_prompts(cfg, cfg.resolve(cfg.corpus_calibration)),
                                           generation_settings(cfg), cfg.horizon, cfg.threads);
  std::map<std::pair<int, int>, double> memo;
  auto pair_quality = [&](int prefill, int decode) {
    const auto key = std::make_pair(prefill, decode);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    return memo[key] = ev.pair_quality(prefill, decode);
  };
  schedule::QualityTarget target;
  target.q_ref = a.q_ref ? *a.q_ref : cfg.q_ref ? *cfg.q_ref : pair_quality(set.max(), set.max());
  target.epsilon = a.epsilon.empty() ? cfg.epsilon : epsilon_from_json(a.epsilon == "inf" ? json("inf") : json(std::stod(a.epsilon)));
  auto report = schedule::allocate_phase_precisions(set, target, pair_quality);
  report.prompts = ev.prompts();
  report.skipped_prompts = ev.skipped();

  json j = header(cfg, "pmpd-calibration");
  j.update(io::calibration_to_json(report));
  j["reference_precision"] = ev.reference_precision();
  j["q_ref_source"] = a.q_ref || cfg.q_ref ? "config" : "uniform-p_max";
  const auto dst = out_path(cfg, a.out, "calibration.json");
  io::write_json(dst, j);
  ctx.out << "phase allocation: prefill " << report.prefill << " bits, decode " << report.decode
          << " bits, quality " << report.chosen_quality << (report.fallback ? " (fallback)" : "")
          << "\nwrote " << dst.string() << "\n";
}

// ---- solve -----------------------------------------------------------------

struct SolveArgs {
  std::string calibration;
  std::vector<int> precisions;
  int prefill = 0;
  std::string epsilon;
  std::string out;
};

void cmd_solve(Context& ctx, const SolveArgs& a) {
  auto& cfg = ctx.cfg;
  const auto cal = read_calibration(in_path(cfg, a.calibration, "calibration.json"));
  std::vector<int> precisions = a.precisions;
  if (precisions.empty()) {
    const auto [hi, lo] = decode_pair(cfg, cal.decode);
    precisions = {hi, lo};
  }
  const quant::PrecisionSet set(precisions);
  const std::vector<int> desc(set.bits().begin(), set.bits().end());
  const int prefill = a.prefill > 0 ? a.prefill : cal.prefill;
  schedule::QualityTarget target = cal.target;
  if (!a.epsilon.empty()) target.epsilon = a.epsilon == "inf" ? std::numeric_limits<double>::infinity() : std::stod(a.epsilon);

  const auto model = load_model(cfg);
  const schedule::ModelQualityEvaluator ev(model, load_prompts(cfg, cfg.resolve(cfg.corpus_validation)),
                                           generation_settings(cfg), cfg.horizon, cfg.threads);
  // Without a configured q_ref the reference is re-measured on the prompts being scored.
  std::string q_ref_source = "calibration";
  if (cfg.q_ref) {
    target.q_ref = *cfg.q_ref;
    q_ref_source = "config";
  } else {
    const int top = cfg.precisions.front();
    target.q_ref = ev.pair_quality(top, top);
    q_ref_source = "uniform-p_max-validation";
  }
  const auto grid = schedule::SwitchGrid::make(cfg.grid_n, cfg.horizon);
  // Per-prompt generation is already parallel inside the evaluator.
  const auto report = schedule::solve_static(
      desc, prefill, grid, target, [&](const schedule::PrecisionSchedule& s) { return ev.quality(s); }, 1);

  json j = header(cfg, "pmpd-schedule");
  j.update(io::solve_report_to_json(report));
  j["target"] = io::target_to_json(target);
  j["q_ref_source"] = q_ref_source;
  j["grid"] = {{"n", grid.n}, {"horizon", grid.horizon}, {"points", grid.points}};
  j["validation_prompts"] = ev.prompts();
  j["skipped_prompts"] = ev.skipped();
  const auto dst = out_path(cfg, a.out, "schedule.json");
  io::write_json(dst, j);
  ctx.out << "static schedule: precisions " << json(report.schedule.precisions).dump() << " switch points "
          << json(report.schedule.switch_points).dump() << " avg bits " << report.avg_bits
          << (report.schedule.feasible ? "" : " (infeasible, all-high fallback)") << "\nwrote " << dst.string()
          << "\n";
}

// ---- gen-labels / train-scheduler -----------------------------------------

struct LabelArgs {
  std::string calibration;
  int high = 0;
  int low = 0;
  int prefill = 0;
  std::string out;
};

void cmd_gen_labels(Context& ctx, const LabelArgs& a) {
  auto& cfg = ctx.cfg;
  int high = a.high;
  int low = a.low;
  int prefill = a.prefill;
  if (high == 0 || low == 0 || prefill == 0) {
    const auto cal = read_calibration(in_path(cfg, a.calibration, "calibration.json"));
    if (high == 0 && low == 0) {
      std::tie(high, low) = decode_pair(cfg, cal.decode);
    } else if (high == 0) {
      const auto h = next_higher(cfg, low);
      if (!h) throw ConfigError("no precision above " + std::to_string(low) + " in the configured set");
      high = *h;
    } else if (low == 0) {
      const auto l = next_lower(cfg, high);
      if (!l) throw ConfigError("no precision below " + std::to_string(high) + " in the configured set");
      low = *l;
    }
    if (prefill == 0) prefill = std::max(cal.prefill, high);
  }
  const auto model = load_model(cfg);
  learnsched::LabelConfig lc;
  lc.high = high;
  lc.low = low;
  lc.prefill = prefill;
  lc.grid = schedule::SwitchGrid::make(cfg.grid_n, cfg.horizon);
  lc.generation = generation_settings(cfg);
  lc.truncation_seed = derive_seed(cfg.seed, "truncation");
  lc.feature_layer = cfg.sched_feature_layer;
  lc.threads = cfg.threads;
  const auto result = learnsched::generate_labels(model, load_prompts(cfg, cfg.resolve(cfg.corpus_labels)), lc);
  if (result.examples.empty()) throw InputError("every label prompt had an empty reference generation");

  std::string text;
  std::vector<int> histogram(static_cast<std::size_t>(lc.grid.n), 0);
  for (const auto& e : result.examples) {
    auto j = learnsched::example_to_json(e);
    j["high"] = high;
    j["low"] = low;
    j["prefill"] = prefill;
    j["grid_n"] = lc.grid.n;
    j["horizon"] = lc.grid.horizon;
    j["feature_layer"] = lc.feature_layer;
    text += j.dump() + "\n";
    ++histogram[static_cast<std::size_t>(e.label)];
  }
  const auto dst = out_path(cfg, a.out, "labels.jsonl");
  io::write_text(dst, text);
  ctx.out << json({{"examples", result.examples.size()},
                   {"skipped", result.skipped},
                   {"reference_precision", result.reference_precision},
                   {"label_histogram", histogram}})
                 .dump()
          << "\nwrote " << dst.string() << "\n";
}

struct TrainArgs {
  std::string labels;
  std::string out;
};

void cmd_train(Context& ctx, const TrainArgs& a) {
  auto& cfg = ctx.cfg;
  const auto path = in_path(cfg, a.labels, "labels.jsonl");
  const auto data = io::read_dataset(path);
  if (data.empty()) throw InputError(path.string() + " holds no examples");
  // Precision pair and grid travel with every record.
  const auto first = json::parse(io::read_lines(path).front());
  int high = 0, low = 0, prefill = 0, grid_n = 0, horizon = 0, layer = -1;
  try {
    high = first.at("high").get<int>();
    low = first.at("low").get<int>();
    prefill = first.at("prefill").get<int>();
    grid_n = first.at("grid_n").get<int>();
    horizon = first.at("horizon").get<int>();
    layer = first.value("feature_layer", -1);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  auto net = learnsched::SchedulerNet::init(data.front().features.d_k, data.front().features.d_v,
                                            cfg.sched_hidden, schedule::SwitchGrid::make(grid_n, horizon),
                                            derive_seed(cfg.seed, "training"));
  net.high = high;
  net.low = low;
  net.prefill = prefill;
  net.feature_layer = layer;
  learnsched::TrainConfig tc;
  tc.lr = cfg.sched_lr;
  tc.momentum = cfg.sched_momentum;
  tc.epochs = cfg.sched_epochs;
  tc.batch = cfg.sched_batch;
  tc.seed = derive_seed(cfg.seed, "training-order");
  const auto report = learnsched::train(net, data, tc);

  json j = net.to_json();
  j["config_hash"] = cfg.hash();
  j["training"] = {{"examples", data.size()},
                   {"lr", tc.lr},
                   {"momentum", tc.momentum},
                   {"epochs", tc.epochs},
                   {"batch", tc.batch},
                   {"initial_loss", report.initial_loss},
                   {"final_loss", report.final_loss},
                   {"accuracy", report.accuracy},
                   {"loss_curve", report.loss_curve}};
  const auto dst = out_path(cfg, a.out, "scheduler.json");
  io::write_json(dst, j);
  ctx.out << "trained on " << data.size() << " examples: loss " << report.initial_loss << " -> "
          << report.final_loss << ", accuracy " << report.accuracy << "\nwrote " << dst.string() << "\n";
}

// ---- generate / eval -------------------------------------------------------

struct SchedulerArgs {
  std::string schedule;
  std::string learned;
  int fixed = 0;
  int prefill = 0;
};

struct GenerateArgs {
  SchedulerArgs sched;
  std::string prompts;
  std::string out;
};

void cmd_generate(Context& ctx, const GenerateArgs& a) {
  auto& cfg = ctx.cfg;
  const auto model = load_model(cfg);
  std::unique_ptr<lm::PrecisionScheduler> scheduler;
  json source;
  if (!a.sched.schedule.empty()) {
    scheduler = std::make_unique<lm::StaticScheduler>(io::schedule_from_json(io::read_json(a.sched.schedule)));
    source = {{"kind", "static"}, {"file", fs::path(a.sched.schedule).filename().string()}};
  } else if (!a.sched.learned.empty()) {
    scheduler = std::make_unique<learnsched::LearnedScheduler>(
        learnsched::SchedulerNet::from_json(io::read_json(a.sched.learned)));
    source = {{"kind", "learned"}, {"file", fs::path(a.sched.learned).filename().string()}};
  } else if (a.sched.fixed > 0) {
    const int prefill = a.sched.prefill > 0 ? a.sched.prefill : a.sched.fixed;
    scheduler = std::make_unique<lm::StaticScheduler>(
        schedule::PrecisionSchedule::constant(a.sched.fixed, cfg.horizon, prefill));
    source = {{"kind", "fixed"}, {"precision", a.sched.fixed}, {"prefill", prefill}};
  } else {
    throw ConfigError("generate needs --schedule, --learned or --fixed-precision");
  }
  const auto prompts = load_prompts(cfg, a.prompts.empty() ? cfg.resolve(cfg.corpus_test) : fs::path(a.prompts));
  const auto settings = generation_settings(cfg);
  std::vector<lm::GenerationTrace> traces(prompts.size());
  parallel_for(prompts.size(), cfg.threads,
               [&](std::size_t i) { traces[i] = lm::generate(model, prompts[i], *scheduler, settings); });

  json arr = json::array();
  double bits = 0.0;
  std::size_t counted = 0;
  for (const auto& t : traces) {
    arr.push_back(io::trace_to_json(t));
    if (!t.decode_precisions().empty()) {
      bits += schedule::avg_bitwidth(t.decode_precisions());
      ++counted;
    }
  }
  json j = header(cfg, "pmpd-traces");
  j["scheduler"] = source;
  j["max_new"] = settings.max_new;
  j["eos"] = settings.eos;
  j["mean_avg_bits"] = counted ? bits / static_cast<double>(counted) : 0.0;
  j["traces"] = arr;
  const auto dst = out_path(cfg, a.out, "traces.json");
  io::write_json(dst, j);
  ctx.out << "generated " << traces.size() << " traces, mean decode bits " << j["mean_avg_bits"].get<double>()
          << "\nwrote " << dst.string() << "\n";
}

std::vector<lm::GenerationTrace> read_traces(const fs::path& path) {
  const auto j = io::read_json(path);
  if (!j.contains("traces") || !j.at("traces").is_array()) {
    throw InputError(path.string() + ": missing \"traces\" array");
  }
  std::vector<lm::GenerationTrace> out;
  for (const auto& t : j.at("traces")) out.push_back(io::trace_from_json(t));
  return out;
}

struct EvalArgs {
  std::string traces;
  std::string references;
  std::string out;
};

void cmd_eval(Context& ctx, const EvalArgs& a) {
  auto& cfg = ctx.cfg;
  const auto traces = read_traces(in_path(cfg, a.traces, "traces.json"));
  std::vector<lm::GenerationTrace> refs;
  json ref_source;
  const auto settings = generation_settings(cfg);
  if (!a.references.empty()) {
    refs = read_traces(a.references);
    ref_source = {{"kind", "file"}, {"file", fs::path(a.references).filename().string()}};
  } else {
    const auto model = lm::ModelVariants::load(cfg.model_path());
    const int rp = model.has_reference() ? schedule::kFullPrecision : model.p_max();
    const lm::StaticScheduler sched(schedule::PrecisionSchedule::constant(rp, cfg.horizon, rp));
    refs.resize(traces.size());
    parallel_for(traces.size(), cfg.threads,
                 [&](std::size_t i) { refs[i] = lm::generate(model, traces[i].prompt, sched, settings); });
    ref_source = {{"kind", "generated"}, {"precision", rp}};
  }
  if (refs.size() != traces.size()) throw InputError("traces and references differ in count");

  json rows = json::array();
  double sum_f = 0.0, sum_bits = 0.0;
  std::size_t scored = 0, skipped = 0, with_bits = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& ref_out = refs[i].output;
    const bool empty = std::all_of(ref_out.begin(), ref_out.end(), [&](lm::Token t) { return t == settings.eos; });
    const auto score = metrics::rouge_l(traces[i].output, ref_out);
    if (traces[i].prompt != refs[i].prompt) throw InputError("trace " + std::to_string(i) + " has a different prompt");
    json row = {{"index", i},
                {"fidelity", score.f1},
                {"precision", score.precision},
                {"recall", score.recall},
                {"reference_empty", empty}};
    if (!traces[i].decode_precisions().empty()) {
      const double b = schedule::avg_bitwidth(traces[i].decode_precisions());
      row["avg_bits"] = b;
      sum_bits += b;
      ++with_bits;
    }
    if (empty) {
      ++skipped;
    } else {
      sum_f += score.f1;
      ++scored;
    }
    rows.push_back(row);
  }
  json j = header(cfg, "pmpd-eval");
  j["metric"] = "rouge-l-f1";
  j["references"] = ref_source;
  j["prompts"] = traces.size();
  j["skipped_prompts"] = skipped;
  j["mean_fidelity"] = scored ? sum_f / static_cast<double>(scored) : 0.0;
  j["mean_avg_bits"] = with_bits ? sum_bits / static_cast<double>(with_bits) : 0.0;
  j["rows"] = rows;
  const auto dst = out_path(cfg, a.out, "eval.json");
  io::write_json(dst, j);
  ctx.out << "mean fidelity " << j["mean_fidelity"].get<double>() << " over " << scored << " prompts\nwrote "
          << dst.string() << "\n";
}

// ---- perf ------------------------------------------------------------------

struct PerfArgs {
  SchedulerArgs sched;
  std::string hardware;
  std::string footprint;
  int prompt_len = 0;
  int gen_len = 0;
  std::string csv;
  std::string kernels;
  std::string kernel_model;
  std::string kernel;
  std::string out;
};

// Stretches switch points to a longer (or shorter) horizon, rounding half up.
schedule::PrecisionSchedule rescale(const schedule::PrecisionSchedule& s, int horizon) {
  auto r = s;
  r.horizon = horizon;
  for (auto& sp : r.switch_points) {
    sp = static_cast<int>((2LL * sp * horizon + s.horizon) / (2LL * s.horizon));
  }
  return r;
}

void cmd_perf(Context& ctx, const PerfArgs& a) {
  auto& cfg = ctx.cfg;
  schedule::PrecisionSchedule s;
  json source;
  if (!a.sched.schedule.empty()) {
    s = io::schedule_from_json(io::read_json(a.sched.schedule));
    source = {{"kind", "static"}, {"file", fs::path(a.sched.schedule).filename().string()}};
  } else if (a.sched.fixed > 0) {
    s = schedule::PrecisionSchedule::constant(a.sched.fixed, cfg.horizon,
                                              a.sched.prefill > 0 ? a.sched.prefill : a.sched.fixed);
    source = {{"kind", "fixed"}, {"precision", a.sched.fixed}};
  } else {
    throw ConfigError("perf needs --schedule or --fixed-precision");
  }
  perf::HardwareConfig hw = perf::HardwareConfig::npu_4k();
  if (!a.hardware.empty()) {
    hw = perf::HardwareConfig::from_json(io::read_json(a.hardware));
  } else if (cfg.hardware) {
    hw = perf::HardwareConfig::from_json(io::read_json(cfg.resolve(*cfg.hardware)));
  }
  const std::string fp_name = a.footprint.empty() ? cfg.footprint : a.footprint;
  const auto fp = fp_name == "model" ? perf::ModelFootprint::from_model_config(cfg.model_config, cfg.group_size)
                                     : perf::ModelFootprint::preset(fp_name);
  const int prompt_len = a.prompt_len > 0 ? a.prompt_len : cfg.perf_prompt_len;
  const int gen_len = a.gen_len > 0 ? a.gen_len : cfg.perf_gen_len;
  const int original_horizon = s.horizon;
  if (gen_len != s.horizon) s = rescale(s, gen_len);

  const auto report = perf::pipeline_perf(fp, s, hw, prompt_len, gen_len);
  json j = header(cfg, "pmpd-perf");
  j["schedule_source"] = source;
  j["schedule"] = io::schedule_to_json(s);
  j["rescaled_from_horizon"] = original_horizon;
  j["footprint"] = fp.to_json();
  j["hardware"] = hw.to_json();
  j["options"] = perf::PerfOptions{}.to_json();
  j["report"] = report.to_json();
  if (!a.kernels.empty()) {
    const auto table = perf::KernelTable::from_json(io::read_json(a.kernels));
    const auto& k = table.kernel(a.kernel_model, a.kernel);
    const auto w = perf::weighted_gpu_latency(k, s, gen_len);
    j["gpu"] = {{"device", table.device},
                {"model", a.kernel_model},
                {"kernel", a.kernel},
                {"weighted_us", w.weighted_us},
                {"fp16_us", w.fp16_us ? json(*w.fp16_us) : json(nullptr)},
                {"speedup_vs_fp16", w.speedup_vs_fp16 ? json(*w.speedup_vs_fp16) : json(nullptr)}};
  }
  const auto dst = out_path(cfg, a.out, "perf.json");
  io::write_json(dst, j);
  if (!a.csv.empty()) io::write_text(a.csv, perf::reports_to_csv({report}));
  ctx.out << fp.name << " on " << hw.name << ": " << report.tokens_per_s << " tokens/s, speedup vs fp16 "
          << report.speedup_vs_fp16 << "x\nwrote " << dst.string() << "\n";
}

void add_scheduler_options(CLI::App* cmd, SchedulerArgs& s, bool allow_learned) {
  auto* sch = cmd->add_option("--schedule", s.schedule, "static schedule JSON");
  auto* fix = cmd->add_option("--fixed-precision", s.fixed, "uniform decode precision")->check(CLI::Range(1, 16));
  cmd->add_option("--prefill", s.prefill, "prefill precision with --fixed-precision")->check(CLI::Range(1, 16));
  sch->excludes(fix);
  if (allow_learned) {
    auto* lrn = cmd->add_option("--learned", s.learned, "learned scheduler net JSON");
    lrn->excludes(sch)->excludes(fix);
  }
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-precision decoding pipeline", "pmpd"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::string out_dir;
  app.fallthrough();  // global options may follow the subcommand
  app.add_option("--config", config_path, "run config JSON (defaults apply when omitted)");
  app.add_option("--seed", seed, "global seed override");
  app.add_option("--threads", threads, "worker threads")->check(CLI::Range(1u, 256u));
  app.add_option("--out-dir", out_dir, "output directory override");

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "quantize weights into a nested bit-plane file");
  auto* random_flag = quantize->add_flag("--random", "seeded random weights (default)");
  quantize->add_option("--from", qa.from, "weight file whose unquantized tensors are requantized")
      ->excludes(random_flag);
  quantize->add_option("--pmax", qa.pmax, "stored bits")->check(CLI::Range(1, 8));
  quantize->add_option("--group-size", qa.group_size, "weights per scale group")->check(CLI::PositiveNumber);
  quantize->add_flag("--no-reference", qa.no_reference, "omit unquantized tensors from the file");
  quantize->add_option("--out", qa.out, "weight file path");

  CalibrateArgs ca;
  auto* calibrate = app.add_subcommand("calibrate", "phase-aware precision allocation");
  calibrate->add_option("--q-ref", ca.q_ref, "reference quality");
  calibrate->add_option("--epsilon", ca.epsilon, "tolerance (number or inf)");
  calibrate->add_option("--out", ca.out);

  SolveArgs sa;
  auto* solve = app.add_subcommand("solve", "offline static schedule search");
  solve->add_option("--calibration", sa.calibration);
  solve->add_option("--precisions", sa.precisions, "decode precisions")->delimiter(',');
  solve->add_option("--prefill", sa.prefill)->check(CLI::Range(1, 16));
  solve->add_option("--epsilon", sa.epsilon);
  solve->add_option("--out", sa.out);

  LabelArgs la;
  auto* labels = app.add_subcommand("gen-labels", "label prompts for the learned scheduler");
  labels->add_option("--calibration", la.calibration);
  labels->add_option("--high", la.high)->check(CLI::Range(1, 16));
  labels->add_option("--low", la.low)->check(CLI::Range(1, 16));
  labels->add_option("--prefill", la.prefill)->check(CLI::Range(1, 16));
  labels->add_option("--out", la.out);

  TrainArgs ta;
  auto* trainc = app.add_subcommand("train-scheduler", "train the learned scheduler");
  trainc->add_option("--labels", ta.labels);
  trainc->add_option("--out", ta.out);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "generate traces under a scheduler");
  add_scheduler_options(gen, ga.sched, true);
  gen->add_option("--prompts", ga.prompts, "prompt file, one per line (default: test corpus)");
  gen->add_option("--out", ga.out);

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Rouge-L fidelity of traces against references");
  eval->add_option("--traces", ea.traces);
  eval->add_option("--references", ea.references, "reference traces (default: full-precision generation)");
  eval->add_option("--out", ea.out);

  PerfArgs pa;
  auto* perfc = app.add_subcommand("perf", "analytical latency model");
  add_scheduler_options(perfc, pa.sched, false);
  perfc->add_option("--hardware", pa.hardware, "hardware config JSON");
  perfc->add_option("--footprint", pa.footprint, "model | vicuna-7b | mobilellama-1.4b");
  perfc->add_option("--prompt-len", pa.prompt_len)->check(CLI::PositiveNumber);
  perfc->add_option("--gen-len", pa.gen_len)->check(CLI::PositiveNumber);
  perfc->add_option("--csv", pa.csv, "also write a CSV row");
  auto* kt = perfc->add_option("--kernels", pa.kernels, "GPU kernel latency table JSON");
  perfc->add_option("--kernel-model", pa.kernel_model)->needs(kt);
  perfc->add_option("--kernel", pa.kernel)->needs(kt);
  perfc->add_option("--out", pa.out);

  std::vector<std::string> argv_store{"pmpd"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig::from_json(json::object(), fs::current_path())
                                        : RunConfig::load(config_path);
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (!out_dir.empty()) cfg.output_dir = fs::absolute(out_dir);
    Context ctx{cfg, out};
    if (quantize->parsed()) {
      cmd_quantize(ctx, qa);
    } else if (calibrate->parsed()) {
      cmd_calibrate(ctx, ca);
    } else if (solve->parsed()) {
      cmd_solve(ctx, sa);
    } else if (labels->parsed()) {
      cmd_gen_labels(ctx, la);
    } else if (trainc->parsed()) {
      cmd_train(ctx, ta);
    } else if (gen->parsed()) {
      cmd_generate(ctx, ga);
    } else if (eval->parsed()) {
      cmd_eval(ctx, ea);
    } else if (perfc->parsed()) {
      cmd_perf(ctx, pa);
    }
  } catch (const ContractViolation& e) {
    err << "pmpd: invariant violated: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    err << "pmpd: " << e.what() << "\n";
    return 2;
  } catch (const json::exception& e) {
    err << "pmpd: malformed JSON: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "pmpd: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "pmpd: bad number: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "pmpd: internal error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace pmpd::cli
