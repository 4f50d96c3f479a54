#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace mscl {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based generator: output n is a hash of (key, n). Streams with
// different keys are independent and any position is reachable in O(1).
// Satisfies UniformRandomBitGenerator so std distributions can draw from it.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  CounterRng() = default;
  explicit CounterRng(std::uint64_t key) : key_(splitmix64(key)) {}
  // Key derived from a seed and a list of stream identifiers.
  CounterRng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
    std::uint64_t k = splitmix64(seed);
    for (auto s : stream) k = splitmix64(k ^ splitmix64(s + 0x632be59bd9b4e019ULL));
    key_ = k;
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return splitmix64(key_ ^ splitmix64(counter_++)); }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }
  void seek(std::uint64_t counter) { counter_ = counter; }

 private:
  std::uint64_t key_ = splitmix64(0);
  std::uint64_t counter_ = 0;
};

}  // namespace mscl
