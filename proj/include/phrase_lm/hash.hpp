#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace phrase_lm {

// 64-bit FNV-1a, used for parameter checksums and manifest input digests.
class Fnv1a {
 public:
  void update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  template <typename T>
  void update(std::span<const T> values) {
    update(values.data(), values.size_bytes());
  }

  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace phrase_lm
