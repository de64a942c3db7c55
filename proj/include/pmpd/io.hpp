#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmpd/learnsched.hpp"
#include "pmpd/schedule.hpp"
#include "pmpd/solver.hpp"
#include "pmpd/tinylm.hpp"

namespace pmpd::io {

nlohmann::json schedule_to_json(const schedule::PrecisionSchedule& s);
/// Accepts a bare schedule object or any document with a "schedule" member.
/// Throws InputError on missing fields or a schedule that fails validation.
schedule::PrecisionSchedule schedule_from_json(const nlohmann::json& j);

nlohmann::json target_to_json(const schedule::QualityTarget& t);
nlohmann::json solve_report_to_json(const schedule::SolveReport& r);
nlohmann::json calibration_to_json(const schedule::CalibrationReport& r);

nlohmann::json trace_to_json(const lm::GenerationTrace& t);
lm::GenerationTrace trace_from_json(const nlohmann::json& j);

/// Parses a JSON file; InputError names the path on failure.
nlohmann::json read_json(const std::filesystem::path& path);
/// Writes `j.dump(2)` plus a newline.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Non-empty lines of a UTF-8 text file (trailing '\r' stripped).
std::vector<std::string> read_lines(const std::filesystem::path& path);

std::vector<learnsched::LabeledExample> read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path,
                   const std::vector<learnsched::LabeledExample>& examples);

}  // namespace pmpd::io
