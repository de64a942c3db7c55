#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pmpd::quant {

inline constexpr int kMaxStoredBits = 8;
inline constexpr std::size_t kDefaultGroupSize = 64;

/// Supported weight bit widths, strictly descending, each in [1, 8].
class PrecisionSet {
 public:
  /// Accepts any order; sorts descending. Throws ConfigError on duplicates,
  /// an empty list or a width outside [1, 8].
  explicit PrecisionSet(std::vector<int> bits);

  std::span<const int> bits() const noexcept { return bits_; }
  std::size_t size() const noexcept { return bits_.size(); }
  int max() const noexcept { return bits_.front(); }
  int min() const noexcept { return bits_.back(); }
  bool contains(int p) const noexcept;

  bool operator==(const PrecisionSet&) const = default;

 private:
  std::vector<int> bits_;
};

/// One bit per weight per plane, plane 0 holding the most significant bit.
/// Planes are stored back to back, so the first p planes form a contiguous
/// prefix of the buffer and reading precision p never touches planes >= p.
class BitPlaneStore {
 public:
  BitPlaneStore() = default;

  static BitPlaneStore pack(std::span<const std::uint8_t> codes, int p_max);
  /// Adopts raw plane bytes (p_max * plane_bytes(count) of them). Padding bits must be zero.
  static BitPlaneStore from_bytes(int p_max, std::size_t count, std::vector<std::uint8_t> bytes);

  static constexpr std::size_t plane_bytes(std::size_t count) noexcept { return (count + 7) / 8; }

  int p_max() const noexcept { return p_max_; }
  std::size_t size() const noexcept { return count_; }
  std::size_t plane_bytes() const noexcept { return plane_bytes(count_); }
  std::span<const std::uint8_t> plane(int k) const;
  std::span<const std::uint8_t> bytes() const noexcept { return bytes_; }

  /// Top-p-plane code of weight i.
  std::uint8_t code(std::size_t i, int p) const;

  bool operator==(const BitPlaneStore&) const = default;

 private:
  int p_max_ = 0;
  std::size_t count_ = 0;
  std::vector<std::uint8_t> bytes_;
};

/// Integer codes formed by the top p planes of every weight (row-major order).
std::vector<std::uint8_t> unpack_prefix(const BitPlaneStore& store, int p);

/// Weight matrix quantized once at p_max. Groups run along each row:
/// group g of row r covers columns [g*group_size, min((g+1)*group_size, cols)).
struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group_size = kDefaultGroupSize;
  int p_max = 0;
  std::vector<float> mins;
  std::vector<float> steps;
  BitPlaneStore store;

  std::size_t groups_per_row() const noexcept { return (cols + group_size - 1) / group_size; }
  std::size_t num_groups() const noexcept { return rows * groups_per_row(); }
  std::size_t group_of(std::size_t row, std::size_t col) const noexcept {
    return row * groups_per_row() + col / group_size;
  }
  std::size_t size() const noexcept { return rows * cols; }

  bool operator==(const QuantizedTensor&) const = default;
};

/// Asymmetric per-group round-to-nearest quantization (ties away from zero).
/// Throws ValueError on non-finite weights, ConfigError on bad p_max/group_size/shape.
QuantizedTensor quantize_tensor(std::span<const float> weights, std::size_t rows, std::size_t cols,
                                int p_max, std::size_t group_size = kDefaultGroupSize);

/// Reconstructs the matrix at precision p in [1, p_max]. Below p_max the
/// truncated code is mapped to the centre of its bucket of full-precision codes.
std::vector<double> dequantize(const QuantizedTensor& qt, int p);

/// Pluggable quantizer interface; the nested uniform scheme is the only
/// implementation shipped.
class WeightQuantizer {
 public:
  virtual ~WeightQuantizer() = default;
  virtual std::string name() const = 0;
  virtual QuantizedTensor quantize(std::span<const float> weights, std::size_t rows,
                                   std::size_t cols) const = 0;
};

class UniformNestedQuantizer final : public WeightQuantizer {
 public:
  UniformNestedQuantizer(int p_max, std::size_t group_size);

  std::string name() const override { return "uniform-nested"; }
  QuantizedTensor quantize(std::span<const float> weights, std::size_t rows,
                           std::size_t cols) const override;

  int p_max() const noexcept { return p_max_; }
  std::size_t group_size() const noexcept { return group_size_; }

 private:
  int p_max_;
  std::size_t group_size_;
};

}  // namespace pmpd::quant
