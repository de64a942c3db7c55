#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmpd/tinylm.hpp"

namespace pmpd::cli {

/// Everything a pipeline run reads. Relative paths resolve against `base_dir`
/// (the directory of the config file).
struct RunConfig {
  std::filesystem::path base_dir;

  std::optional<std::filesystem::path> model;  // default: <output_dir>/model.pmpd
  lm::ModelConfig model_config;
  int p_max = 8;
  int group_size = 64;

  std::vector<int> precisions{8, 7, 6, 5, 4};
  std::optional<double> q_ref;  // default: quality of (p_max, p_max)
  double epsilon = 0.05;        // may be +infinity ("inf" in JSON)
  int grid_n = 5;
  int horizon = 32;
  int max_prompt_tokens = 96;
  int max_prompts = 0;  // 0 = every line

  lm::SamplerConfig sampler;  // seed comes from the "sampler" sub-stream
  std::optional<std::filesystem::path> tokenizer;

  std::filesystem::path corpus_calibration = "corpus/calibration.txt";
  std::filesystem::path corpus_validation = "corpus/validation.txt";
  std::filesystem::path corpus_labels = "corpus/labels.txt";
  std::filesystem::path corpus_test = "corpus/test.txt";

  std::optional<std::filesystem::path> hardware;
  std::string footprint = "model";
  int perf_prompt_len = 512;
  int perf_gen_len = 256;

  int sched_hidden = 64;
  double sched_lr = 1e-2;
  double sched_momentum = 0.9;
  int sched_epochs = 100;
  int sched_batch = 16;
  int sched_feature_layer = -1;

  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 0;
  unsigned threads = 1;

  /// Throws ConfigError on unknown keys, wrong types or out-of-range values.
  static RunConfig from_json(const nlohmann::json& j, std::filesystem::path base_dir);
  static RunConfig load(const std::filesystem::path& path);
  /// Canonical form; omits output_dir and threads, which never change results.
  nlohmann::json to_json() const;
  std::string hash() const;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  std::filesystem::path model_path() const;
  std::filesystem::path output(const std::string& name) const;
};

lm::Tokenizer make_tokenizer(const RunConfig& cfg);

/// One prompt per non-empty line, truncated to max_prompt_tokens and capped at
/// max_prompts. Throws InputError when nothing is left.
std::vector<std::vector<lm::Token>> load_prompts(const RunConfig& cfg,
                                                 const std::filesystem::path& path);

/// Sampler seeded from the "sampler" sub-stream, max_new = horizon.
lm::GenerationSettings generation_settings(const RunConfig& cfg);

/// Runs one `pmpd` command. Returns the process exit code:
/// 0 success, 2 input/configuration error, 3 internal invariant violation.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pmpd::cli
