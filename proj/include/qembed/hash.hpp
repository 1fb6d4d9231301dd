#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace qembed {

// 64-bit FNV-1a. Only equality of hashes is ever consulted (duplicate-document
// masking), so collision resistance beyond that is not required.
inline std::uint64_t fnv1a64(const void* data, std::size_t size) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view text) {
  return fnv1a64(text.data(), text.size());
}

inline std::uint64_t fnv1a64(const std::vector<int>& token_ids) {
  return fnv1a64(token_ids.data(), token_ids.size() * sizeof(int));
}

}  // namespace qembed
