#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace satstereo {

// FNV-1a 64. Manifests only need change detection, not cryptographic strength.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v);
std::string hash_file_hex(const std::filesystem::path& path);
inline std::string hash_bytes_hex(std::string_view bytes) {
  return hex64(fnv1a64(bytes));
}

}  // namespace satstereo
