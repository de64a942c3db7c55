#include "pmpd/io.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "pmpd/errors.hpp"

namespace pmpd::io {
namespace {

using nlohmann::json;

// JSON has no infinity; an unbounded tolerance is written as the string "inf".
json number_or_inf(double x) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  return x;
}

}  // namespace

json schedule_to_json(const schedule::PrecisionSchedule& s) {
  return {{"precisions", s.precisions},
          {"switch_points", s.switch_points},
          {"prefill", s.prefill},
          {"horizon", s.horizon},
          {"feasible", s.feasible}};
}

schedule::PrecisionSchedule schedule_from_json(const json& j) {
  const json& body = j.is_object() && j.contains("schedule") ? j.at("schedule") : j;
  schedule::PrecisionSchedule s;
  try {
    s.precisions = body.at("precisions").get<std::vector<int>>();
    s.switch_points = body.at("switch_points").get<std::vector<int>>();
    s.prefill = body.at("prefill").get<int>();
    s.horizon = body.at("horizon").get<int>();
    s.feasible = body.value("feasible", true);
  } catch (const json::exception& e) {
    throw InputError(std::string("schedule JSON: ") + e.what());
  }
  const auto violations = schedule::validate(s);
  if (!violations.empty()) {
    std::string msg = "schedule JSON is not a valid schedule:";
    for (const auto& v : violations) msg += " " + v.message + ";";
    throw InputError(msg);
  }
  if (s.prefill < 1) throw InputError("schedule JSON: prefill precision must be >= 1");
  return s;
}

json target_to_json(const schedule::QualityTarget& t) {
  return {{"q_ref", t.q_ref}, {"epsilon", number_or_inf(t.epsilon)}, {"metric", t.metric}};
}

json solve_report_to_json(const schedule::SolveReport& r) {
  json candidates = json::array();
  for (const auto& c : r.candidates) {
    candidates.push_back({{"switch_points", c.schedule.switch_points},
                          {"quality", c.quality},
                          {"avg_bits", c.avg_bits},
                          {"feasible", c.feasible}});
  }
  return {{"schedule", schedule_to_json(r.schedule)},
          {"quality", r.quality},
          {"avg_bits", r.avg_bits},
          {"candidates", candidates}};
}

json calibration_to_json(const schedule::CalibrationReport& r) {
  json table = json::array();
  for (const auto& p : r.table) {
    table.push_back({{"prefill", p.prefill},
                     {"decode", p.decode},
                     {"quality", p.quality},
                     {"qualifies", p.qualifies}});
  }
  return {{"prefill", r.prefill},
          {"decode", r.decode},
          {"fallback", r.fallback},
          {"chosen_quality", r.chosen_quality},
          {"target", target_to_json(r.target)},
          {"prompts", r.prompts},
          {"skipped_prompts", r.skipped_prompts},
          {"table", table}};
}

json trace_to_json(const lm::GenerationTrace& t) {
  return {{"prompt", t.prompt},
          {"output", t.output},
          {"precisions", t.precisions},
          {"logits_hash", t.logits_hash},
          {"termination", t.termination == lm::Termination::kEos ? "eos" : "length"},
          {"schedule", schedule_to_json(t.schedule)}};
}

lm::GenerationTrace trace_from_json(const json& j) {
  lm::GenerationTrace t;
  try {
    t.prompt = j.at("prompt").get<std::vector<lm::Token>>();
    t.output = j.at("output").get<std::vector<lm::Token>>();
    t.precisions = j.at("precisions").get<std::vector<int>>();
    t.logits_hash = j.at("logits_hash").get<std::vector<std::string>>();
    const auto term = j.at("termination").get<std::string>();
    if (term != "eos" && term != "length") throw InputError("trace JSON: bad termination '" + term + "'");
    t.termination = term == "eos" ? lm::Termination::kEos : lm::Termination::kLength;
  } catch (const json::exception& e) {
    throw InputError(std::string("trace JSON: ") + e.what());
  }
  if (t.precisions.size() != t.output.size()) {
    throw InputError("trace JSON: precisions and output differ in length");
  }
  t.schedule = schedule_from_json(j.at("schedule"));
  return t;
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
  if (!out) throw InputError("write failed for " + path.string());
}

void write_json(const std::filesystem::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) lines.push_back(line);
  }
  return lines;
}

std::vector<learnsched::LabeledExample> read_dataset(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::vector<learnsched::LabeledExample> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(learnsched::example_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset(const std::filesystem::path& path,
                   const std::vector<learnsched::LabeledExample>& examples) {
  std::string text;
  for (const auto& e : examples) text += learnsched::example_to_json(e).dump() + "\n";
  write_text(path, text);
}

}  // namespace pmpd::io
