#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace carm {

// 64-bit FNV-1a. Used for content fingerprints of volumes, images, manifests
// and checkpoints; not a cryptographic hash.
class Fnv1a {
 public:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;

  void update(const void* data, std::size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= kPrime;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <class T>
  void update(std::span<const T> values) {
    update(values.data(), values.size_bytes());
  }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = kOffset;
};

inline std::uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

std::string to_hex(std::uint64_t value);
std::uint64_t file_hash(const std::string& path);

}  // namespace carm
