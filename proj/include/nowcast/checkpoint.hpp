#pragma once

// Parameter checkpoint format ("NWCK", little-endian):
//   magic, u32 version, u64 config hash, string config text, u64 step,
//   u32 record count, then per record:
//   string name, u8 element bytes (4 = f32, 8 = f64), u32 rank, u64 dims[rank], values.
// Strings are u32 length + bytes.

#include <array>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nowcast/binary_io.hpp"
#include "nowcast/error.hpp"
#include "nowcast/tensor.hpp"
#include "nowcast/text.hpp"

namespace nowcast {

inline constexpr std::array<char, 4> kCheckpointMagic{'N', 'W', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  ad::Shape shape;
  std::uint8_t element_bytes = 4;
  std::vector<double> values;  // widened; f32 records round-trip exactly

  bool operator==(const CheckpointRecord&) const = default;
};

struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::string config_text;
  std::uint64_t step = 0;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& r : records) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }

  const CheckpointRecord& at(const std::string& name) const {
    if (const auto* r = find(name)) return *r;
    throw FormatError("checkpoint lacks record '" + name + "'", 0);
  }

  template <std::floating_point T>
  void add(const std::string& name, const ad::Shape& shape, const std::vector<T>& values) {
    CheckpointRecord r{name, shape, sizeof(T), std::vector<double>(values.begin(), values.end())};
    records.push_back(std::move(r));
  }

  /// Copies a record into `dst`, checking the element count.
  template <std::floating_point T>
  void restore(const std::string& name, std::vector<T>& dst) const {
    const auto& r = at(name);
    if (r.values.size() != dst.size()) {
      throw FormatError("checkpoint record '" + name + "' has " + std::to_string(r.values.size()) +
                            " values, expected " + std::to_string(dst.size()),
                        0);
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(r.values[i]);
  }

  bool operator==(const Checkpoint&) const = default;
};

inline void write_checkpoint(const Checkpoint& ck, std::ostream& out) {
  out.write(kCheckpointMagic.data(), 4);
  io::put<std::uint32_t>(out, kCheckpointVersion);
  io::put<std::uint64_t>(out, ck.config_hash);
  io::put_string(out, ck.config_text);
  io::put<std::uint64_t>(out, ck.step);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.records.size()));
  for (const auto& r : ck.records) {
    io::put_string(out, r.name);
    io::put<std::uint8_t>(out, r.element_bytes);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) io::put<std::uint64_t>(out, d);
    if (r.element_bytes == 4) {
      for (double v : r.values) io::put<float>(out, static_cast<float>(v));
    } else {
      for (double v : r.values) io::put<double>(out, v);
    }
  }
  if (!out) throw Error("failed writing checkpoint");
}

/// Reads a checkpoint; with `expected_hash` set, refuses a different config.
inline Checkpoint read_checkpoint(std::istream& source,
                                  std::optional<std::uint64_t> expected_hash = std::nullopt) {
  io::Reader in(source);
  char magic[4];
  in.bytes(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kCheckpointMagic.begin())) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const auto version_at = in.offset();
  if (in.get<std::uint32_t>("version") != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version", version_at);
  }
  Checkpoint ck;
  ck.config_hash = in.get<std::uint64_t>("config hash");
  if (expected_hash && *expected_hash != ck.config_hash) {
    throw ConfigMismatch("checkpoint config hash " + text::hex64(ck.config_hash) +
                         " does not match expected " + text::hex64(*expected_hash));
  }
  ck.config_text = in.get_string("config text");
  ck.step = in.get<std::uint64_t>("step");
  const auto count = in.get<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = in.get_string("record name");
    const auto bytes_at = in.offset();
    r.element_bytes = in.get<std::uint8_t>("element size");
    if (r.element_bytes != 4 && r.element_bytes != 8) {
      throw FormatError("record element size must be 4 or 8", bytes_at);
    }
    const auto rank_at = in.offset();
    const auto rank = in.get<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("record rank too large", rank_at);
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      r.shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>("dim")));
      n *= r.shape.back();
    }
    if (n > (1ull << 32)) throw FormatError("record too large", rank_at);
    r.values.resize(n);
    if (r.element_bytes == 4) {
      std::vector<float> raw;
      in.get_array(raw, n, "record values");
      std::copy(raw.begin(), raw.end(), r.values.begin());
    } else {
      in.get_array(r.values, n, "record values");
    }
    ck.records.push_back(std::move(r));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_checkpoint(ck, out);
}

inline Checkpoint load_checkpoint(const std::string& path,
                                  std::optional<std::uint64_t> expected_hash = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_checkpoint(in, expected_hash);
}

}  // namespace nowcast
