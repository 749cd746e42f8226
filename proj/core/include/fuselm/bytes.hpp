#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace fuselm {

// FNV-1a 64-bit. Used for content checksums in corpus manifests and
// checkpoint containers. Not cryptographic; detects corruption and drift.
inline uint64_t fnv1a(std::span<const uint8_t> bytes,
                      uint64_t h = 0xcbf29ce484222325ull) {
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a_str(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a({reinterpret_cast<const uint8_t*>(s.data()), s.size()}, h);
}

std::string hex_u64(uint64_t v);

// Little-endian scalar append/read for the binary container format. The
// byte order is fixed in the file format; on big-endian hosts values are
// swapped explicitly.
template <typename T>
void append_le(std::vector<uint8_t>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (size_t i = 0; i < sizeof(T); ++i) out.push_back(raw[sizeof(T) - 1 - i]);
  } else {
    out.insert(out.end(), raw, raw + sizeof(T));
  }
}

template <typename T>
T read_le(std::span<const uint8_t> bytes, size_t offset) {
  static_assert(std::is_trivially_copyable_v<T>);
  uint8_t raw[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) {
    if constexpr (std::endian::native == std::endian::big) {
      raw[i] = bytes[offset + sizeof(T) - 1 - i];
    } else {
      raw[i] = bytes[offset + i];
    }
  }
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

}  // namespace fuselm
