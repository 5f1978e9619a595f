#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace distill {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// A named random stream. Every stochastic call site receives one of these;
/// child streams are derived by tag so a single master seed fixes a run.
class SeedStream {
 public:
  explicit SeedStream(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  SeedStream derive(std::string_view tag) const { return SeedStream(splitmix64(seed_ ^ fnv1a(tag))); }
  SeedStream derive(std::uint64_t index) const { return SeedStream(splitmix64(seed_ + 0x632BE59BD9B4E019ULL * (index + 1))); }

  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& engine() { return engine_; }

  /// Fresh 64-bit seed drawn from this stream.
  std::uint64_t next_seed() { return engine_(); }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace distill
