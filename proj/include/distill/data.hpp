#pragma once

#include <distill/constants.hpp>
#include <distill/rng.hpp>
#include <distill/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace distill {

// ---------------------------------------------------------------------------
// IDX files

struct IdxError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IdxBadMagic : IdxError {
  using IdxError::IdxError;
};
struct IdxTruncated : IdxError {
  using IdxError::IdxError;
};
struct IdxCountMismatch : IdxError {
  using IdxError::IdxError;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

/// Header dims after checking magic and total size.
inline std::vector<std::uint32_t> idx_header(const std::vector<std::uint8_t>& b, std::uint32_t magic,
                                             const std::string& what) {
  if (b.size() < 4) throw IdxTruncated(what + ": file shorter than the magic number");
  const std::uint32_t got = read_be32(b, 0);
  if (got != magic) {
    char buf[96];
    std::snprintf(buf, sizeof buf, ": bad magic 0x%08X, expected 0x%08X", got, magic);
    throw IdxBadMagic(what + buf);
  }
  const std::size_t rank = magic & 0xFF;
  if (b.size() < 4 + 4 * rank) throw IdxTruncated(what + ": truncated header");
  std::vector<std::uint32_t> dims;
  std::size_t payload = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims.push_back(read_be32(b, 4 + 4 * i));
    payload *= dims.back();
  }
  if (b.size() < 4 + 4 * rank + payload) {
    throw IdxTruncated(what + ": payload has " + std::to_string(b.size() - 4 - 4 * rank) + " bytes, header promises " +
                       std::to_string(payload));
  }
  return dims;
}

}  // namespace detail

/// Raw image bytes [count, 28, 28].
inline std::vector<std::uint8_t> read_idx_images(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  const auto dims = detail::idx_header(b, kIdxImagesMagic, path.string());
  if (dims[1] != kImageSide || dims[2] != kImageSide) {
    throw IdxError(path.string() + ": expected 28x28 images, got " + std::to_string(dims[1]) + "x" +
                   std::to_string(dims[2]));
  }
  return {b.begin() + 16, b.begin() + 16 + std::size_t(dims[0]) * kImagePixels};
}

inline std::vector<std::uint8_t> read_idx_labels(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  const auto dims = detail::idx_header(b, kIdxLabelsMagic, path.string());
  return {b.begin() + 8, b.begin() + 8 + dims[0]};
}

inline void write_idx_images(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() % kImagePixels != 0) throw std::invalid_argument("write_idx_images: not a whole number of images");
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxImagesMagic);
  detail::put_be32(b, static_cast<std::uint32_t>(pixels.size() / kImagePixels));
  detail::put_be32(b, kImageSide);
  detail::put_be32(b, kImageSide);
  b.insert(b.end(), pixels.begin(), pixels.end());
  detail::write_file(path, b);
}

inline void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> b;
  detail::put_be32(b, kIdxLabelsMagic);
  detail::put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  detail::write_file(path, b);
}

// ---------------------------------------------------------------------------
// Datasets

enum class Split { train, val, test };

template <class T>
struct RealDataset {
  Tensor<T> images;  // [N, 1, 28, 28], standardized
  std::vector<std::uint8_t> labels;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
};

template <class T>
RealDataset<T> load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                              Split split = Split::train) {
  const auto pixels = read_idx_images(images_path);
  auto labels = read_idx_labels(labels_path);
  const std::size_t n = pixels.size() / kImagePixels;
  if (n != labels.size()) {
    throw IdxCountMismatch(images_path.string() + " has " + std::to_string(n) + " images but " +
                           labels_path.string() + " has " + std::to_string(labels.size()) + " labels");
  }
  for (auto l : labels)
    if (l >= kClasses) throw IdxError(labels_path.string() + ": label " + std::to_string(l) + " outside 0..9");
  RealDataset<T> ds{Tensor<T>(Shape{n, 1, kImageSide, kImageSide}), std::move(labels), split};
  for (std::size_t i = 0; i < pixels.size(); ++i)
    ds.images[i] = static_cast<T>(Normalization::standardize(pixels[i] / 255.0));
  return ds;
}

/// Rows `idx` of a dataset, in that order.
template <class T>
RealDataset<T> subset(const RealDataset<T>& ds, const std::vector<std::size_t>& idx, Split split) {
  RealDataset<T> out{Tensor<T>(Shape{idx.size(), 1, kImageSide, kImageSide}), {}, split};
  out.labels.reserve(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(ds.images.data() + idx[r] * kImagePixels, kImagePixels, out.images.data() + r * kImagePixels);
    out.labels.push_back(ds.labels[idx[r]]);
  }
  return out;
}

struct SplitIndices {
  std::vector<std::size_t> train, val;
};

/// Seeded random partition of 0..n-1 into n - n_val training and n_val
/// validation indices, each in increasing order.
inline SplitIndices validation_indices(std::size_t n, std::size_t n_val, std::uint64_t seed) {
  if (n_val >= n) {
    throw std::invalid_argument("split_validation: n_val " + std::to_string(n_val) + " must be below dataset size " +
                                std::to_string(n));
  }
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(splitmix64(seed));
  std::shuffle(perm.begin(), perm.end(), rng);
  SplitIndices s{{perm.begin() + n_val, perm.end()}, {perm.begin(), perm.begin() + n_val}};
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

template <class T>
std::pair<RealDataset<T>, RealDataset<T>> split_validation(const RealDataset<T>& ds, std::size_t n_val,
                                                           std::uint64_t seed) {
  if (ds.split != Split::train) throw std::invalid_argument("split_validation: expects the train split");
  const auto idx = validation_indices(ds.size(), n_val, seed);
  return {subset(ds, idx.train, Split::train), subset(ds, idx.val, Split::val)};
}

template <class T>
struct RealBatch {
  Tensor<T> images;
  std::vector<std::uint8_t> labels;
};

/// Distinct row indices drawn uniformly (Floyd's algorithm).
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t size, SeedStream& rng) {
  if (size > n) throw std::invalid_argument("sample: batch of " + std::to_string(size) + " from " + std::to_string(n));
  std::unordered_set<std::size_t> seen;
  std::vector<std::size_t> out;
  out.reserve(size);
  for (std::size_t j = n - size; j < n; ++j) {
    std::uniform_int_distribution<std::size_t> u(0, j);
    const std::size_t t = u(rng.engine());
    const std::size_t pick = seen.insert(t).second ? t : (seen.insert(j), j);
    out.push_back(pick);
  }
  std::shuffle(out.begin(), out.end(), rng.engine());
  return out;
}

template <class T>
RealBatch<T> sample_real_batch(const RealDataset<T>& ds, std::size_t size, SeedStream& rng) {
  const auto idx = sample_indices(ds.size(), size, rng);
  auto sub = subset(ds, idx, ds.split);
  return {std::move(sub.images), std::move(sub.labels)};
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  enum Mode { none, test_aug, train_aug, both } mode = none;
  std::size_t crop_padding = 2;
  double max_rotation_degrees = 15.0;
  double fill = Normalization::lo();  // standardized black

  /// Real batches during distillation.
  bool on_real() const { return mode == train_aug || mode == both; }
  /// Synthetic batches while training evaluation students.
  bool on_synthetic() const { return mode == test_aug || mode == both; }
};

inline std::string_view to_string(AugmentConfig::Mode m) {
  switch (m) {
    case AugmentConfig::none: return "none";
    case AugmentConfig::test_aug: return "test";
    case AugmentConfig::train_aug: return "train";
    case AugmentConfig::both: return "test+train";
  }
  return "?";
}

inline AugmentConfig::Mode parse_augment_mode(std::string_view s) {
  for (auto m : {AugmentConfig::none, AugmentConfig::test_aug, AugmentConfig::train_aug, AugmentConfig::both})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown augmentation mode '" + std::string(s) + "'; supported: none, test, train, test+train");
}

/// Per-image random shift (pad then crop) and bilinear rotation about the
/// image centre. Samples outside the source read `fill`.
template <class T>
Tensor<T> augment(const Tensor<T>& images, const AugmentConfig& cfg, SeedStream& rng) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[2] != kImageSide || s[3] != kImageSide) {
    throw ShapeError("augment: expected [N,C,28,28], got " + to_string(s));
  }
  Tensor<T> out(s);
  const std::size_t planes = s[1], side = kImageSide;
  const double c = (side - 1) / 2.0;
  const auto pad = static_cast<long>(cfg.crop_padding);
  std::uniform_int_distribution<long> shift(-pad, pad);
  std::uniform_real_distribution<double> angle(-cfg.max_rotation_degrees, cfg.max_rotation_degrees);
  for (std::size_t n = 0; n < s[0]; ++n) {
    const long dy = shift(rng.engine()), dx = shift(rng.engine());
    const double a = angle(rng.engine()) * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = images.data() + (n * planes + p) * kImagePixels;
      T* dst = out.data() + (n * planes + p) * kImagePixels;
      auto at = [&](long y, long x) -> double {
        if (y < 0 || x < 0 || y >= long(side) || x >= long(side)) return cfg.fill;
        return src[y * side + x];
      };
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          // Shift first, then inverse-rotate into the source.
          const double qy = double(y) + dy - c, qx = double(x) + dx - c;
          const double sy = ca * qy - sa * qx + c, sx = sa * qy + ca * qx + c;
          const double fy = std::floor(sy), fx = std::floor(sx);
          const double wy = sy - fy, wx = sx - fx;
          const long iy = long(fy), ix = long(fx);
          const double v = (1 - wy) * ((1 - wx) * at(iy, ix) + wx * at(iy, ix + 1)) +
                           wy * ((1 - wx) * at(iy + 1, ix) + wx * at(iy + 1, ix + 1));
          dst[y * side + x] = static_cast<T>(v);
        }
      }
    }
  }
  return out;
}

}  // namespace distill
