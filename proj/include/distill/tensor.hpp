#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace distill {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Raised when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Live tensor-data accounting. Every Tensor storage block registers its
/// byte size here on construction and releases it on destruction, so the
/// high-water mark measures the working set of a computation.
namespace memory {

namespace detail {
inline std::atomic<std::int64_t> live{0};
inline std::atomic<std::int64_t> peak{0};
}  // namespace detail

inline void on_alloc(std::int64_t bytes) {
  const auto now = detail::live.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  auto prev = detail::peak.load(std::memory_order_relaxed);
  while (now > prev && !detail::peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
  }
}

inline void on_free(std::int64_t bytes) { detail::live.fetch_sub(bytes, std::memory_order_relaxed); }

inline std::int64_t live_bytes() { return detail::live.load(std::memory_order_relaxed); }
inline std::int64_t peak_bytes() { return detail::peak.load(std::memory_order_relaxed); }

/// Resets the high-water mark to the current live size.
inline void reset_peak() { detail::peak.store(live_bytes(), std::memory_order_relaxed); }

}  // namespace memory

#if defined(__GLIBC__)
namespace detail {
// Large tensors are allocated and freed at a high rate. Keeping them on the
// heap instead of fresh mmap regions avoids a page fault per touched page.
inline const bool allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
}  // namespace detail
#endif

template <class T>
class Storage {
 public:
  /// Uninitialized storage for n elements.
  explicit Storage(std::size_t n) : data_(new T[n]), size_(n) { memory::on_alloc(bytes()); }
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;
  ~Storage() { memory::on_free(bytes()); }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }
  std::size_t size() const { return size_; }

 private:
  std::int64_t bytes() const { return static_cast<std::int64_t>(size_ * sizeof(T)); }

  std::unique_ptr<T[]> data_;
  std::size_t size_;
};

/// Dense row-major tensor. Copies share storage; use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{0}) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), storage_(std::make_shared<Storage<T>>(distill::numel(shape_))) {
    std::fill_n(storage_->data(), storage_->size(), fill);
  }

  Tensor(Shape shape, std::span<const T> values) : Tensor(std::move(shape)) {
    if (values.size() != numel()) {
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       distill::to_string(shape_));
    }
    std::copy(values.begin(), values.end(), storage_->data());
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  /// Tensor whose contents the caller overwrites entirely.
  static Tensor uninitialized(Shape shape) { return Tensor(std::move(shape), Uninit{}); }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return storage_->size(); }

  T* data() { return storage_->data(); }
  const T* data() const { return storage_->data(); }
  std::span<T> values() { return {storage_->data(), storage_->size()}; }
  std::span<const T> values() const { return {storage_->data(), storage_->size()}; }

  T& operator[](std::size_t i) { return storage_->data()[i]; }
  const T& operator[](std::size_t i) const { return storage_->data()[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor of shape " + distill::to_string(shape_));
    return (*this)[0];
  }

  Tensor clone() const {
    auto out = uninitialized(shape_);
    std::copy_n(data(), numel(), out.data());
    return out;
  }

  /// Same storage viewed with a different shape of equal size.
  Tensor reshaped(Shape shape) const {
    if (distill::numel(shape) != numel()) {
      throw ShapeError("reshape: " + distill::to_string(shape_) + " -> " + distill::to_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  bool shares_storage(const Tensor& other) const { return storage_ == other.storage_; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < numel(); ++i) out[i] = static_cast<U>((*this)[i]);
    return out;
  }

 private:
  struct Uninit {};
  Tensor(Shape shape, Uninit)
      : shape_(std::move(shape)), storage_(std::make_shared<Storage<T>>(distill::numel(shape_))) {}

  Shape shape_;
  std::shared_ptr<Storage<T>> storage_;
};

}  // namespace distill
