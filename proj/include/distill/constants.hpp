#pragma once

#include <cstddef>

namespace distill {

inline constexpr std::size_t kImageSide = 28;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kClasses = 10;

/// Generator input: noise concatenated with a one-hot label.
inline constexpr std::size_t kGeneratorInput = 64;
inline constexpr std::size_t kGeneratorNoise = kGeneratorInput - kClasses;

/// Pixel standardization shared by real and synthetic images.
struct Normalization {
  static constexpr double mean = 0.1307;
  static constexpr double stddev = 0.3081;

  static constexpr double standardize(double raw) { return (raw - mean) / stddev; }
  static constexpr double raw(double standardized) { return standardized * stddev + mean; }
  /// Standardized value of a black (0) and a white (1) pixel.
  static constexpr double lo() { return standardize(0.0); }
  static constexpr double hi() { return standardize(1.0); }
};

}  // namespace distill
