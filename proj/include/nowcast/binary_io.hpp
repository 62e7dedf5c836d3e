#pragma once

// Little-endian primitive encoding shared by the frame, prediction and
// checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
  requires std::is_arithmetic_v<T>
void put(std::ostream& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.write(bytes, sizeof(T));
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
  requires std::is_arithmetic_v<T>
void put_array(std::ostream& out, const std::vector<T>& values) {
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(T)));
}

/// Reads from a stream while tracking the byte offset so that truncation
/// errors can point at the exact position.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint64_t offset() const noexcept { return offset_; }

  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n) {
      throw FormatError(std::string("truncated ") + what + ": expected " +
                            std::to_string(n) + " bytes, got " +
                            std::to_string(got),
                        offset_ + got);
    }
    offset_ += n;
  }

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get(const char* what) {
    char raw[sizeof(T)];
    bytes(raw, sizeof(T), what);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string get_string(const char* what, std::uint32_t max_len = 1u << 24) {
    const auto at = offset_;
    const auto n = get<std::uint32_t>(what);
    if (n > max_len) throw FormatError(std::string("oversized ") + what, at);
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }

  template <typename T>
  void get_array(std::vector<T>& dst, std::size_t count, const char* what) {
    dst.resize(count);
    bytes(reinterpret_cast<char*>(dst.data()), count * sizeof(T), what);
  }

  bool at_eof() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace nowcast::io
