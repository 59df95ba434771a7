#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace clipbench {

// Reserved vocabulary ids.
namespace special {
inline constexpr int kPad = 0;
inline constexpr int kStart = 1;
inline constexpr int kEnd = 2;
inline constexpr int kMask = 3;
inline constexpr int kUnk = 4;
inline constexpr int kCount = 5;
}  // namespace special

// Row-major [batch x length] token ids; `valid` marks non-padding positions.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> valid;

  int at(std::size_t n, std::size_t i) const { return ids[n * length + i]; }
  bool is_valid(std::size_t n, std::size_t i) const { return valid[n * length + i] != 0; }

  // Position of the end-of-text token: the last non-padding position.
  std::size_t eot_position(std::size_t n) const {
    std::size_t last = 0;
    for (std::size_t i = 0; i < length; ++i)
      if (valid[n * length + i]) last = i;
    return last;
  }

  // Word positions: non-padding and not start/end markers.
  bool is_word(std::size_t n, std::size_t i) const {
    const int id = at(n, i);
    return is_valid(n, i) && id != special::kStart && id != special::kEnd && id != special::kPad;
  }
};

}  // namespace clipbench
