#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace ceu {

// FNV-1a 64-bit, used for parameter checksums and output-file manifests.
struct Fnv1a64 {
  std::uint64_t state = 0xcbf29ce484222325ULL;

  void update(const void* bytes, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
      state ^= p[i];
      state *= 0x100000001b3ULL;
    }
  }

  template <class T>
  void update_value(const T& v) {
    update(&v, sizeof(T));
  }

  std::uint64_t digest() const { return state; }
};

std::uint64_t checksum_file(const std::filesystem::path& path);
std::string checksum_hex(std::uint64_t digest);

}  // namespace ceu
