#pragma once

#include <distill/data.hpp>
#include <distill/models.hpp>

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <optional>

namespace distill {

enum class TeacherKind { dd, gtn_rnd, gtn_lrn };

inline std::string_view to_string(TeacherKind k) {
  switch (k) {
    case TeacherKind::dd: return "dd";
    case TeacherKind::gtn_rnd: return "gtn-rnd";
    case TeacherKind::gtn_lrn: return "gtn-lrn";
  }
  return "?";
}

inline TeacherKind parse_teacher(std::string_view tag) {
  for (auto k : {TeacherKind::dd, TeacherKind::gtn_rnd, TeacherKind::gtn_lrn})
    if (to_string(k) == tag) return k;
  throw std::invalid_argument("unknown teacher '" + std::string(tag) + "'; supported: dd, gtn-rnd, gtn-lrn");
}

/// The learnable synthetic set. Examples are stored class-major (example i
/// has label i / ipc). The curriculum visits them class-interleaved: epoch
/// position p is class p % 10, instance p / 10, and batch b covers
/// positions [b * B, (b + 1) * B) with B = ipc * 10 / ic.
template <class T>
struct Teacher {
  TeacherKind kind = TeacherKind::dd;
  std::size_t ipc = 10;
  std::size_t ic = 1;
  Var<T> pixels;                              // dd: [ipc*10, 1, 28, 28]
  std::optional<GeneratorParams<T>> generator;  // gtn-*

  std::size_t size() const { return ipc * kClasses; }
  std::size_t batch_size() const { return size() / ic; }

  /// Parameters updated by the teacher optimizer.
  std::vector<Var<T>> params() const { return kind == TeacherKind::dd ? std::vector<Var<T>>{pixels} : generator->params(); }

  void set_params(std::vector<Var<T>> p) {
    if (kind == TeacherKind::dd) {
      pixels = std::move(p.at(0));
      return;
    }
    auto& g = *generator;
    if (g.learned_inputs) {
      g.learned_inputs = p.back();
      p.pop_back();
    }
    g.weights = std::move(p);
  }

  std::size_t storage_index(std::size_t position) const {
    return (position % kClasses) * ipc + position / kClasses;
  }

  std::vector<std::size_t> batch_rows(std::size_t b) const {
    if (b >= ic) throw std::out_of_range("batch index " + std::to_string(b) + " out of range for ic=" + std::to_string(ic));
    std::vector<std::size_t> rows;
    for (std::size_t p = b * batch_size(); p < (b + 1) * batch_size(); ++p) rows.push_back(storage_index(p));
    return rows;
  }

  std::vector<std::uint8_t> batch_labels(std::size_t b) const {
    std::vector<std::uint8_t> labels;
    for (auto r : batch_rows(b)) labels.push_back(static_cast<std::uint8_t>(r / ipc));
    return labels;
  }

  std::vector<std::uint8_t> labels() const {
    std::vector<std::uint8_t> l(size());
    for (std::size_t i = 0; i < size(); ++i) l[i] = static_cast<std::uint8_t>(i / ipc);
    return l;
  }
};

inline void check_synthetic_shape(std::size_t ipc, std::size_t ic) {
  if (ipc == 0) throw std::invalid_argument("ipc must be positive");
  if (ic == 0 || (ipc * kClasses) % ic != 0) {
    throw std::invalid_argument("ic=" + std::to_string(ic) + " must divide the " + std::to_string(ipc * kClasses) +
                                " synthetic examples (ipc*10) into equal batches");
  }
}

/// Pixel-bank teacher initialized with standard-normal noise in the
/// standardized pixel space.
template <class T>
Teacher<T> init_synthetic(std::size_t ipc, std::size_t ic, SeedStream rng) {
  check_synthetic_shape(ipc, ic);
  Teacher<T> t;
  t.kind = TeacherKind::dd;
  t.ipc = ipc;
  t.ic = ic;
  Tensor<T> px(Shape{ipc * kClasses, 1, kImageSide, kImageSide});
  std::normal_distribution<double> n01;
  for (auto& v : px.values()) v = static_cast<T>(n01(rng.engine()));
  t.pixels = Var<T>::leaf(std::move(px));
  return t;
}

template <class T>
Teacher<T> init_teacher(TeacherKind kind, std::size_t ipc, std::size_t ic, std::size_t k, SeedStream rng) {
  if (kind == TeacherKind::dd) return init_synthetic<T>(ipc, ic, rng.derive("pixels"));
  check_synthetic_shape(ipc, ic);
  Teacher<T> t;
  t.kind = kind;
  t.ipc = ipc;
  t.ic = ic;
  const auto mode = kind == TeacherKind::gtn_lrn ? GeneratorMode::learned_input : GeneratorMode::random_input;
  t.generator = init_generator<T>(k, mode, rng.derive("generator"));
  if (mode == GeneratorMode::learned_input) {
    // Noise columns from N(0,1), label columns one-hot; all 64 are learned.
    Tensor<T> bank(Shape{t.size(), kGeneratorInput});
    auto r = rng.derive("inputs");
    std::normal_distribution<double> n01;
    for (std::size_t i = 0; i < t.size(); ++i) {
      for (std::size_t j = 0; j < kGeneratorNoise; ++j)
        bank[i * kGeneratorInput + j] = static_cast<T>(n01(r.engine()));
      bank[i * kGeneratorInput + kGeneratorNoise + i / ipc] = T(1);
    }
    t.generator->learned_inputs = Var<T>::leaf(std::move(bank));
  }
  return t;
}

template <class T>
std::size_t param_count(const Teacher<T>& t) {
  std::size_t n = 0;
  for (const auto& p : t.params()) n += p.numel();
  return n;
}

/// Fresh generator inputs: noise plus one-hot labels.
template <class T>
Tensor<T> random_generator_inputs(const std::vector<std::uint8_t>& labels, SeedStream& rng) {
  Tensor<T> in(Shape{labels.size(), kGeneratorInput});
  std::normal_distribution<double> n01;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = 0; j < kGeneratorNoise; ++j) in[i * kGeneratorInput + j] = static_cast<T>(n01(rng.engine()));
    in[i * kGeneratorInput + kGeneratorNoise + labels[i]] = T(1);
  }
  return in;
}

/// Images (differentiable in the teacher parameters when grad mode is on)
/// for examples `rows`, in that order. `noise` is drawn only by gtn-rnd.
template <class T>
Var<T> teacher_images(const Teacher<T>& t, const std::vector<std::size_t>& rows, SeedStream& noise) {
  switch (t.kind) {
    case TeacherKind::dd: return index_select(t.pixels, rows);
    case TeacherKind::gtn_lrn: return generator_forward_raw(*t.generator, index_select(*t.generator->learned_inputs, rows));
    case TeacherKind::gtn_rnd: {
      std::vector<std::uint8_t> labels;
      for (auto r : rows) labels.push_back(static_cast<std::uint8_t>(r / t.ipc));
      return generator_forward_raw(*t.generator, Var<T>(random_generator_inputs<T>(labels, noise)));
    }
  }
  throw std::logic_error("unreachable");
}

template <class T>
Batch<T> materialize_batch(const Teacher<T>& t, std::size_t b, SeedStream& noise) {
  const auto rows = t.batch_rows(b);
  return {teacher_images(t, rows, noise), Var<T>(one_hot<T>(t.batch_labels(b)))};
}

/// All ipc*10 examples in storage (class-major) order, detached.
template <class T>
Tensor<T> materialize_all(const Teacher<T>& t, SeedStream& noise) {
  NoGrad off;
  std::vector<std::size_t> rows(t.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return teacher_images(t, rows, noise).value().clone();
}

// ---------------------------------------------------------------------------
// Export

struct ExportedSet {
  Tensor<float> images;  // [n, 1, 28, 28]
  std::vector<std::uint8_t> labels;
};

namespace detail {

inline void put_le32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

inline std::uint32_t read_le32(const std::vector<std::uint8_t>& b, std::size_t& at) {
  if (at + 4 > b.size()) throw std::runtime_error("tensor file truncated");
  std::uint32_t v = 0;
  for (int s = 0; s < 4; ++s) v |= std::uint32_t(b[at + s]) << (8 * s);
  at += 4;
  return v;
}


inline void png_chunk(std::vector<std::uint8_t>& out, const char* type, const std::vector<std::uint8_t>& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// DSTL1 tensor file: magic, u32 rank, u32 extents, f32 payload, u32 label
/// count, u8 labels. All little-endian.
inline void write_tensor_file(const std::filesystem::path& path, const ExportedSet& set) {
  std::vector<std::uint8_t> b{'D', 'S', 'T', 'L', '1'};
  detail::put_le32(b, static_cast<std::uint32_t>(set.images.rank()));
  for (auto d : set.images.shape()) detail::put_le32(b, static_cast<std::uint32_t>(d));
  for (float v : set.images.values()) detail::put_le32(b, std::bit_cast<std::uint32_t>(v));
  detail::put_le32(b, static_cast<std::uint32_t>(set.labels.size()));
  b.insert(b.end(), set.labels.begin(), set.labels.end());
  detail::write_file(path, b);
}

inline ExportedSet read_tensor_file(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  if (b.size() < 5 || std::memcmp(b.data(), "DSTL1", 5) != 0) throw std::runtime_error(path.string() + ": not a DSTL1 file");
  std::size_t at = 5;
  const auto rank = detail::read_le32(b, at);
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(detail::read_le32(b, at));
  ExportedSet set{Tensor<float>(shape), {}};
  for (auto& v : set.images.values()) v = std::bit_cast<float>(detail::read_le32(b, at));
  const auto n = detail::read_le32(b, at);
  if (at + n > b.size()) throw std::runtime_error(path.string() + ": label block truncated");
  set.labels.assign(b.begin() + at, b.begin() + at + n);
  return set;
}

/// 8-bit grayscale PNG.
inline void write_png(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& gray) {
  std::vector<std::uint8_t> raw;
  raw.reserve(height * (width + 1));
  for (std::size_t y = 0; y < height; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), gray.begin() + y * width, gray.begin() + (y + 1) * width);
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(len);
  if (compress(z.data(), &len, raw.data(), static_cast<uLong>(raw.size())) != Z_OK)
    throw std::runtime_error("png: compression failed");
  z.resize(len);
  std::vector<std::uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(height));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", {});
  detail::write_file(path, out);
}

struct GridLayout {
  std::size_t rows, cols;
};

/// Tiles images (class-major, `ipc` per class) into a grid with one column
/// per class and one row per instance, 1-pixel gutters.
inline GridLayout write_grid(const std::filesystem::path& path, const Tensor<float>& images, std::size_t ipc,
                             std::size_t first_class, std::size_t classes) {
  const std::size_t cell = kImageSide + 1;
  const std::size_t w = classes * cell + 1, h = ipc * cell + 1;
  std::vector<std::uint8_t> px(w * h, 128);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < ipc; ++i) {
      const float* src = images.data() + ((first_class + c) * ipc + i) * kImagePixels;
      for (std::size_t y = 0; y < kImageSide; ++y)
        for (std::size_t x = 0; x < kImageSide; ++x) {
          const double raw = std::clamp(Normalization::raw(src[y * kImageSide + x]), 0.0, 1.0);
          px[(1 + i * cell + y) * w + 1 + c * cell + x] = static_cast<std::uint8_t>(std::lround(raw * 255));
        }
    }
  }
  write_png(path, w, h, px);
  return {ipc, classes};
}

/// Writes `synthetic.dstl` plus `grid.png` and `class_<c>.png`.
template <class T>
void export_synthetic(const Teacher<T>& t, const std::filesystem::path& dir, SeedStream noise) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  ExportedSet set{materialize_all(t, noise).template cast<float>(), t.labels()};
  write_tensor_file(dir / "synthetic.dstl", set);
  write_grid(dir / "grid.png", set.images, t.ipc, 0, kClasses);
  for (std::size_t c = 0; c < kClasses; ++c)
    write_grid(dir / ("class_" + std::to_string(c) + ".png"), set.images, t.ipc, c, 1);
}

/// Teacher checkpoint: magic "DTCH1", u32 kind, ipc, ic, k, param count,
/// then per param u32 rank, u32 extents and f64 payload. Little-endian;
/// doubles keep 64-bit runs exact.
template <class T>
void save_teacher(const std::filesystem::path& path, const Teacher<T>& t) {
  std::vector<std::uint8_t> b{'D', 'T', 'C', 'H', '1'};
  const std::size_t k = t.generator ? t.generator->k : 0;
  for (std::size_t v : {std::size_t(t.kind), t.ipc, t.ic, k, t.params().size()})
    detail::put_le32(b, static_cast<std::uint32_t>(v));
  for (const auto& p : t.params()) {
    detail::put_le32(b, static_cast<std::uint32_t>(p.value().rank()));
    for (auto d : p.shape()) detail::put_le32(b, static_cast<std::uint32_t>(d));
    for (T v : p.value().values()) {
      const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(v));
      detail::put_le32(b, static_cast<std::uint32_t>(bits));
      detail::put_le32(b, static_cast<std::uint32_t>(bits >> 32));
    }
  }
  detail::write_file(path, b);
}

template <class T>
Teacher<T> load_teacher(const std::filesystem::path& path) {
  const auto b = detail::read_file(path);
  if (b.size() < 5 || std::memcmp(b.data(), "DTCH1", 5) != 0) throw std::runtime_error(path.string() + ": not a DTCH1 file");
  std::size_t at = 5;
  const auto kind_tag = detail::read_le32(b, at);
  if (kind_tag > std::size_t(TeacherKind::gtn_lrn)) throw std::runtime_error(path.string() + ": unknown teacher kind");
  const auto kind = static_cast<TeacherKind>(kind_tag);
  const std::size_t ipc = detail::read_le32(b, at), ic = detail::read_le32(b, at), k = detail::read_le32(b, at);
  auto t = init_teacher<T>(kind, ipc, ic, kind == TeacherKind::dd ? 64 : k, SeedStream(0));
  auto params = t.params();
  if (detail::read_le32(b, at) != params.size()) throw std::runtime_error(path.string() + ": parameter count mismatch");
  for (auto& p : params) {
    const auto rank = detail::read_le32(b, at);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(detail::read_le32(b, at));
    if (shape != p.shape()) {
      throw std::runtime_error(path.string() + ": parameter shape " + to_string(shape) + ", expected " +
                               to_string(p.shape()));
    }
    Tensor<T> v(shape);
    for (auto& x : v.values()) {
      const std::uint64_t lo = detail::read_le32(b, at), hi = detail::read_le32(b, at);
      x = static_cast<T>(std::bit_cast<double>(lo | hi << 32));
    }
    p = Var<T>::leaf(std::move(v));
  }
  t.set_params(std::move(params));
  return t;
}

/// Pixel-bank teacher from an exported set in storage order.
template <class T>
Teacher<T> teacher_from_export(const ExportedSet& set, std::size_t ic) {
  const std::size_t n = set.labels.size();
  if (n == 0 || n % kClasses != 0 || set.images.shape() != Shape{n, 1, kImageSide, kImageSide})
    throw std::invalid_argument("exported set is not a balanced [ipc*10,1,28,28] bank");
  const std::size_t ipc = n / kClasses;
  for (std::size_t i = 0; i < n; ++i)
    if (set.labels[i] != i / ipc) throw std::invalid_argument("exported set is not class-major");
  check_synthetic_shape(ipc, ic);
  Teacher<T> t;
  t.ipc = ipc;
  t.ic = ic;
  t.pixels = Var<T>::leaf(set.images.template cast<T>());
  return t;
}

}  // namespace distill
