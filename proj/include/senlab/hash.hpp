#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace senlab {

inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

/// Lower-case hex, zero padded to `digits`.
inline std::string hex(std::uint64_t v, int digits = 16) {
  static constexpr char table[] = "0123456789abcdef";
  std::string s(static_cast<std::size_t>(digits), '0');
  for (int i = digits - 1; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = table[v & 0xF];
  return s;
}

inline std::string hex64(std::uint64_t v) { return hex(v, 16); }

}  // namespace senlab
