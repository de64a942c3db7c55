#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmpd/quant.hpp"

namespace pmpd::quant {

inline constexpr char kWeightMagic[4] = {'P', 'M', 'P', 'D'};
inline constexpr std::uint32_t kWeightFormatVersion = 1;

struct NamedTensor {
  std::string name;
  QuantizedTensor tensor;
  bool operator==(const NamedTensor&) const = default;
};

struct DenseTensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
  bool operator==(const DenseTensor&) const = default;
};

/// Everything a weight file carries.
///
/// Layout (little-endian):
///   "PMPD" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
///   for each quantized tensor, in metadata order:
///     f32 mins[groups] | f32 steps[groups] | p_max planes, MSB plane first,
///     each row-major, LSB-first within a byte, zero-padded to a byte boundary
///   for each dense tensor (norm gains):    f32 values[rows*cols]
///   for each reference tensor (optional):  f32 values[rows*cols]
struct WeightArchive {
  nlohmann::json model = nlohmann::json::object();
  std::size_t group_size = kDefaultGroupSize;
  int p_max = 0;
  std::vector<NamedTensor> quantized;
  std::vector<DenseTensor> dense;
  /// Unquantized copies of the quantized tensors, used to produce
  /// full-precision reference generations. May be empty.
  std::vector<DenseTensor> reference;

  bool operator==(const WeightArchive&) const = default;
};

/// Throws ConfigError when tensors disagree on p_max.
std::vector<std::byte> serialize_model(const WeightArchive& archive);

/// Throws ParseError identifying the byte offset and, where relevant, the tensor.
WeightArchive parse_model(std::span<const std::byte> bytes);

void write_model_file(const std::filesystem::path& path, const WeightArchive& archive);
WeightArchive read_model_file(const std::filesystem::path& path);

}  // namespace pmpd::quant
