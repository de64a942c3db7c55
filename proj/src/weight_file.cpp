#include "pmpd/weight_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <tuple>

#include "pmpd/errors.hpp"

namespace pmpd::quant {
namespace {

using Kind = ParseError::Kind;

class Writer {
 public:
  void raw(std::span<const std::byte> bytes) { out_.insert(out_.end(), bytes.begin(), bytes.end()); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::byte>(v >> (8 * i)));
  }

  void f32s(std::span<const float> values) {
    for (float v : values) u32(std::bit_cast<std::uint32_t>(v));
  }

  std::vector<std::byte> take() { return std::move(out_); }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

  std::span<const std::byte> take(std::size_t n, const std::string& tensor, const char* what) {
    if (remaining() < n) {
      throw ParseError(Kind::kTruncated, pos_, tensor,
                       "truncated " + std::string(what) +
                           (tensor.empty() ? "" : " of tensor '" + tensor + "'") + " at offset " +
                           std::to_string(pos_) + ": need " + std::to_string(n) + " bytes, have " +
                           std::to_string(remaining()));
    }
    auto out = bytes_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  std::uint32_t u32(const std::string& tensor, const char* what) {
    const auto b = take(4, tensor, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }

  std::vector<float> f32s(std::size_t n, const std::string& tensor, const char* what) {
    const auto b = take(n * 4, tensor, what);
    std::vector<float> out(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[4 * k + i]) << (8 * i);
      out[k] = std::bit_cast<float>(v);
    }
    return out;
  }

 private:
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json shape_entry(const std::string& name, std::size_t rows, std::size_t cols) {
  return {{"name", name}, {"rows", rows}, {"cols", cols}};
}

}  // namespace

std::vector<std::byte> serialize_model(const WeightArchive& archive) {
  nlohmann::json meta;
  meta["format"] = "pmpd-weights";
  meta["model"] = archive.model;
  meta["group_size"] = archive.group_size;
  meta["p_max"] = archive.p_max;
  meta["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : archive.quantized) {
    if (t.p_max != archive.p_max) {
      throw ConfigError("tensor '" + name + "' has p_max " + std::to_string(t.p_max) +
                        ", archive declares " + std::to_string(archive.p_max));
    }
    auto entry = shape_entry(name, t.rows, t.cols);
    entry["group_size"] = t.group_size;
    entry["groups"] = t.num_groups();
    entry["plane_bytes"] = t.store.plane_bytes();
    meta["tensors"].push_back(std::move(entry));
  }
  meta["dense"] = nlohmann::json::array();
  for (const auto& d : archive.dense) meta["dense"].push_back(shape_entry(d.name, d.rows, d.cols));
  meta["reference"] = nlohmann::json::array();
  for (const auto& d : archive.reference) {
    meta["reference"].push_back(shape_entry(d.name, d.rows, d.cols));
  }

  const std::string text = meta.dump();
  Writer w;
  w.raw(std::as_bytes(std::span(kWeightMagic)));
  w.u32(kWeightFormatVersion);
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(std::as_bytes(std::span(text.data(), text.size())));
  for (const auto& [name, t] : archive.quantized) {
    w.f32s(t.mins);
    w.f32s(t.steps);
    w.raw(std::as_bytes(t.store.bytes()));
  }
  for (const auto& group : {&archive.dense, &archive.reference}) {
    for (const auto& d : *group) {
      if (d.values.size() != d.rows * d.cols) {
        throw ConfigError("dense tensor '" + d.name + "' does not match its shape");
      }
      w.f32s(d.values);
    }
  }
  return w.take();
}

WeightArchive parse_model(std::span<const std::byte> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "", "magic");
  if (std::memcmp(magic.data(), kWeightMagic, 4) != 0) {
    throw ParseError(Kind::kBadMagic, 0, "", "bad magic: not a PMPD weight file");
  }
  const std::size_t version_offset = r.offset();
  const std::uint32_t version = r.u32("", "format version");
  if (version != kWeightFormatVersion) {
    throw ParseError(Kind::kBadVersion, version_offset, "",
                     "unsupported format version " + std::to_string(version));
  }
  const std::uint32_t meta_len = r.u32("", "metadata length");
  const std::size_t meta_offset = r.offset();
  const auto meta_bytes = r.take(meta_len, "", "metadata");

  WeightArchive archive;
  std::vector<std::tuple<std::string, std::size_t, std::size_t>> dense_shapes[2];
  struct TensorShape {
    std::string name;
    std::size_t rows, cols, group_size, groups, plane_bytes;
  };
  std::vector<TensorShape> shapes;
  try {
    const auto meta = nlohmann::json::parse(
        std::string_view(reinterpret_cast<const char*>(meta_bytes.data()), meta_bytes.size()));
    archive.model = meta.at("model");
    archive.group_size = meta.at("group_size").get<std::size_t>();
    archive.p_max = meta.at("p_max").get<int>();
    for (const auto& t : meta.at("tensors")) {
      shapes.push_back({t.at("name").get<std::string>(), t.at("rows").get<std::size_t>(),
                        t.at("cols").get<std::size_t>(), t.at("group_size").get<std::size_t>(),
                        t.at("groups").get<std::size_t>(), t.at("plane_bytes").get<std::size_t>()});
    }
    const char* sections[2] = {"dense", "reference"};
    for (int s = 0; s < 2; ++s) {
      for (const auto& t : meta.at(sections[s])) {
        dense_shapes[s].emplace_back(t.at("name").get<std::string>(),
                                     t.at("rows").get<std::size_t>(),
                                     t.at("cols").get<std::size_t>());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(Kind::kBadMetadata, meta_offset, "",
                     std::string("malformed metadata: ") + e.what());
  }
  if (archive.p_max < 1 || archive.p_max > kMaxStoredBits) {
    throw ParseError(Kind::kBadMetadata, meta_offset, "",
                     "p_max " + std::to_string(archive.p_max) + " outside [1, 8]");
  }

  for (const auto& s : shapes) {
    const std::size_t count = s.rows * s.cols;
    if (s.group_size < 1 || s.rows == 0 || s.cols == 0 ||
        s.groups != s.rows * ((s.cols + s.group_size - 1) / s.group_size)) {
      throw ParseError(Kind::kBadMetadata, meta_offset, s.name,
                       "inconsistent shape/group metadata for tensor '" + s.name + "'");
    }
    if (s.plane_bytes != BitPlaneStore::plane_bytes(count)) {
      throw ParseError(Kind::kBadPlaneLength, meta_offset, s.name,
                       "tensor '" + s.name + "' declares " + std::to_string(s.plane_bytes) +
                           " bytes per plane, expected " +
                           std::to_string(BitPlaneStore::plane_bytes(count)));
    }
    QuantizedTensor t;
    t.rows = s.rows;
    t.cols = s.cols;
    t.group_size = s.group_size;
    t.p_max = archive.p_max;
    t.mins = r.f32s(s.groups, s.name, "group mins");
    t.steps = r.f32s(s.groups, s.name, "group steps");
    const std::size_t plane_offset = r.offset();
    const auto planes = r.take(s.plane_bytes * archive.p_max, s.name, "bit planes");
    std::vector<std::uint8_t> raw(planes.size());
    std::memcpy(raw.data(), planes.data(), planes.size());
    try {
      t.store = BitPlaneStore::from_bytes(archive.p_max, count, std::move(raw));
    } catch (const ConfigError& e) {
      throw ParseError(Kind::kBadPlaneLength, plane_offset, s.name,
                       "tensor '" + s.name + "': " + e.what());
    }
    archive.quantized.push_back({s.name, std::move(t)});
  }
  for (int s = 0; s < 2; ++s) {
    auto& target = s == 0 ? archive.dense : archive.reference;
    for (const auto& [name, rows, cols] : dense_shapes[s]) {
      target.push_back({name, rows, cols, r.f32s(rows * cols, name, "dense values")});
    }
  }
  if (r.remaining() != 0) {
    throw ParseError(Kind::kTruncated, r.offset(), "",
                     std::to_string(r.remaining()) + " trailing bytes after last tensor");
  }
  return archive;
}

void write_model_file(const std::filesystem::path& path, const WeightArchive& archive) {
  const auto bytes = serialize_model(archive);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

WeightArchive read_model_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open weight file '" + path.string() + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_model(std::as_bytes(std::span(raw)));
}

}  // namespace pmpd::quant
