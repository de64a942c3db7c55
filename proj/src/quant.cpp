#include "pmpd/quant.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pmpd/errors.hpp"

namespace pmpd::quant {
namespace {

void check_bits(int p, int p_max, const char* what) {
  if (p < 1 || p > p_max) {
    throw ConfigError(std::string(what) + " precision " + std::to_string(p) +
                      " outside [1, " + std::to_string(p_max) + "]");
  }
}

}  // namespace

PrecisionSet::PrecisionSet(std::vector<int> bits) : bits_(std::move(bits)) {
  if (bits_.empty()) throw ConfigError("precision set is empty");
  std::sort(bits_.begin(), bits_.end(), std::greater<>());
  if (std::adjacent_find(bits_.begin(), bits_.end()) != bits_.end()) {
    throw ConfigError("precision set contains duplicates");
  }
  if (bits_.front() > kMaxStoredBits || bits_.back() < 1) {
    throw ConfigError("precisions must lie in [1, 8]");
  }
}

bool PrecisionSet::contains(int p) const noexcept {
  return std::find(bits_.begin(), bits_.end(), p) != bits_.end();
}

BitPlaneStore BitPlaneStore::pack(std::span<const std::uint8_t> codes, int p_max) {
  check_bits(p_max, kMaxStoredBits, "stored");
  BitPlaneStore store;
  store.p_max_ = p_max;
  store.count_ = codes.size();
  const std::size_t stride = plane_bytes(codes.size());
  store.bytes_.assign(stride * static_cast<std::size_t>(p_max), 0);
  const unsigned limit = 1u << p_max;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (codes[i] >= limit) throw ConfigError("code does not fit in p_max bits");
    for (int k = 0; k < p_max; ++k) {
      const unsigned bit = (codes[i] >> (p_max - 1 - k)) & 1u;
      store.bytes_[k * stride + i / 8] |= static_cast<std::uint8_t>(bit << (i % 8));
    }
  }
  return store;
}

BitPlaneStore BitPlaneStore::from_bytes(int p_max, std::size_t count,
                                        std::vector<std::uint8_t> bytes) {
  check_bits(p_max, kMaxStoredBits, "stored");
  const std::size_t stride = plane_bytes(count);
  if (bytes.size() != stride * static_cast<std::size_t>(p_max)) {
    throw ConfigError("bit-plane buffer has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(stride * p_max));
  }
  if (count % 8 != 0) {
    const auto pad_mask = static_cast<std::uint8_t>(0xFFu << (count % 8));
    for (int k = 0; k < p_max; ++k) {
      if (bytes[k * stride + stride - 1] & pad_mask) {
        throw ConfigError("non-zero padding bits in plane " + std::to_string(k));
      }
    }
  }
  BitPlaneStore store;
  store.p_max_ = p_max;
  store.count_ = count;
  store.bytes_ = std::move(bytes);
  return store;
}

std::span<const std::uint8_t> BitPlaneStore::plane(int k) const {
  if (k < 0 || k >= p_max_) throw ConfigError("plane index out of range");
  return std::span(bytes_).subspan(k * plane_bytes(), plane_bytes());
}

std::uint8_t BitPlaneStore::code(std::size_t i, int p) const {
  const std::size_t stride = plane_bytes();
  unsigned c = 0;
  for (int k = 0; k < p; ++k) {
    c = (c << 1) | ((bytes_[k * stride + i / 8] >> (i % 8)) & 1u);
  }
  return static_cast<std::uint8_t>(c);
}

std::vector<std::uint8_t> unpack_prefix(const BitPlaneStore& store, int p) {
  check_bits(p, store.p_max(), "requested");
  std::vector<std::uint8_t> codes(store.size(), 0);
  const std::size_t stride = store.plane_bytes();
  const auto bytes = store.bytes();
  for (int k = 0; k < p; ++k) {
    const std::uint8_t* plane = bytes.data() + k * stride;
    for (std::size_t i = 0; i < codes.size(); ++i) {
      codes[i] = static_cast<std::uint8_t>((codes[i] << 1) | ((plane[i / 8] >> (i % 8)) & 1u));
    }
  }
  return codes;
}

QuantizedTensor quantize_tensor(std::span<const float> weights, std::size_t rows, std::size_t cols,
                                int p_max, std::size_t group_size) {
  check_bits(p_max, kMaxStoredBits, "stored");
  if (group_size < 1) throw ConfigError("group_size must be >= 1");
  if (rows == 0 || cols == 0 || weights.size() != rows * cols) {
    throw ConfigError("weight buffer does not match shape " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  }
  for (float w : weights) {
    if (!std::isfinite(w)) throw ValueError("cannot quantize non-finite weight");
  }

  QuantizedTensor qt;
  qt.rows = rows;
  qt.cols = cols;
  qt.group_size = group_size;
  qt.p_max = p_max;
  qt.mins.resize(qt.num_groups());
  qt.steps.resize(qt.num_groups());

  const int max_code = (1 << p_max) - 1;
  std::vector<std::uint8_t> codes(weights.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t g = 0; g < qt.groups_per_row(); ++g) {
      const std::size_t begin = g * group_size;
      const std::size_t end = std::min(begin + group_size, cols);
      const auto row = weights.subspan(r * cols, cols);
      const auto [lo, hi] = std::minmax_element(row.begin() + begin, row.begin() + end);
      const std::size_t gi = r * qt.groups_per_row() + g;
      const auto step = static_cast<float>((static_cast<double>(*hi) - *lo) / max_code);
      if (!std::isfinite(step)) throw ValueError("group dynamic range overflows f32");
      qt.mins[gi] = *lo;
      qt.steps[gi] = step;
      for (std::size_t c = begin; c < end; ++c) {
        long code = 0;
        if (step > 0.0f) {
          code = std::lround((static_cast<double>(row[c]) - *lo) / step);
        }
        codes[r * cols + c] = static_cast<std::uint8_t>(std::clamp<long>(code, 0, max_code));
      }
    }
  }
  qt.store = BitPlaneStore::pack(codes, p_max);
  return qt;
}

std::vector<double> dequantize(const QuantizedTensor& qt, int p) {
  check_bits(p, qt.p_max, "requested");
  const auto codes = unpack_prefix(qt.store, p);
  const int shift = qt.p_max - p;
  const double scale = std::ldexp(1.0, shift);
  const double centre = shift > 0 ? std::ldexp(1.0, shift - 1) : 0.0;
  std::vector<double> out(qt.size());
  for (std::size_t r = 0; r < qt.rows; ++r) {
    for (std::size_t c = 0; c < qt.cols; ++c) {
      const std::size_t gi = qt.group_of(r, c);
      const double step = qt.steps[gi];
      const std::size_t i = r * qt.cols + c;
      out[i] = step == 0.0 ? static_cast<double>(qt.mins[gi])
                           : qt.mins[gi] + (codes[i] * scale + centre) * step;
    }
  }
  return out;
}

UniformNestedQuantizer::UniformNestedQuantizer(int p_max, std::size_t group_size)
    : p_max_(p_max), group_size_(group_size) {
  check_bits(p_max, kMaxStoredBits, "stored");
  if (group_size < 1) throw ConfigError("group_size must be >= 1");
}

QuantizedTensor UniformNestedQuantizer::quantize(std::span<const float> weights, std::size_t rows,
                                                 std::size_t cols) const {
  return quantize_tensor(weights, rows, cols, p_max_, group_size_);
}

}  // namespace pmpd::quant
