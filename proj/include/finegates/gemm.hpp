#pragma once

// Dense kernels for y = x . w^T where w is stored as [outputs x inputs].
//
// Every kernel here accumulates each output element as
//   acc = 0; for j in 0..inputs: acc = acc + x[j] * w[j]
// in ascending j with separately rounded products. Skipping inputs whose
// weight column is exactly zero therefore yields bit-identical sums, which is
// what makes gathered and pruned products comparable to dense ones.

#include <cstddef>
#include <cstring>
#include <span>
#include <vector>

#include <boost/align/aligned_allocator.hpp>

#include "finegates/errors.hpp"

namespace finegates::gemm {

/// Storage that starts on a 64-byte cache line.
template <class T>
using AlignedVector = std::vector<T, boost::alignment::aligned_allocator<T, 64>>;

namespace detail {
template <class T>
struct Vec64;
template <>
struct Vec64<double> {
  typedef double type __attribute__((vector_size(64)));
};
template <>
struct Vec64<float> {
  typedef float type __attribute__((vector_size(64)));
};
}  // namespace detail

/// out[n x m] = x[n x k] . w[m x k]^T, straightforward loops.
template <class T>
void linear_reference(std::span<const T> x, std::size_t n, std::size_t k, std::span<const T> w, std::size_t m,
                      std::span<T> out) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x.data() + r * k;
    for (std::size_t i = 0; i < m; ++i) {
      const T* wi = w.data() + i * k;
      T acc = T(0);
      for (std::size_t j = 0; j < k; ++j) acc += xr[j] * wi[j];
      out[r * m + i] = acc;
    }
  }
}

/// Weight matrix repacked into column panels so that the multiply streams
/// memory sequentially and vectorizes across outputs.
template <class T>
class PackedMatrix {
 public:
  static constexpr std::size_t kLanes = 64 / sizeof(T);
  static constexpr std::size_t kRowBlock = 8;

  PackedMatrix() = default;

  /// `w` is [outputs x inputs], row-major.
  PackedMatrix(std::span<const T> w, std::size_t outputs, std::size_t inputs)
      : outputs_(outputs), inputs_(inputs), panels_((outputs + kLanes - 1) / kLanes) {
    if (w.size() != outputs * inputs) {
      throw DimensionError("packed matrix: data size does not match shape");
    }
    data_.assign(panels_ * inputs_ * kLanes, T(0));
    for (std::size_t p = 0; p < panels_; ++p) {
      T* panel = data_.data() + p * inputs_ * kLanes;
      for (std::size_t l = 0; l < kLanes; ++l) {
        const std::size_t i = p * kLanes + l;
        if (i >= outputs_) break;
        for (std::size_t j = 0; j < inputs_; ++j) panel[j * kLanes + l] = w[i * inputs_ + j];
      }
    }
  }

  std::size_t outputs() const noexcept { return outputs_; }
  std::size_t inputs() const noexcept { return inputs_; }

  /// out[n x outputs] = x[n x inputs] . w^T
  void multiply(std::span<const T> x, std::size_t n, std::span<T> out) const {
    if (x.size() != n * inputs_ || out.size() != n * outputs_) {
      throw DimensionError("packed multiply: operand sizes do not match");
    }
    std::size_t r = 0;
    for (; r + kRowBlock <= n; r += kRowBlock) block<kRowBlock>(x.data() + r * inputs_, out.data() + r * outputs_);
    for (; r < n; ++r) block<1>(x.data() + r * inputs_, out.data() + r * outputs_);
  }

 private:
  using Vec = typename detail::Vec64<T>::type;
  static_assert(sizeof(Vec) == kLanes * sizeof(T));

  template <std::size_t Rows>
  void block(const T* x, T* out) const {
    for (std::size_t p = 0; p < panels_; ++p) {
      const T* panel = data_.data() + p * inputs_ * kLanes;
      Vec acc[Rows];
      for (std::size_t b = 0; b < Rows; ++b) acc[b] = Vec{};
      for (std::size_t j = 0; j < inputs_; ++j) {
        Vec wv;
        std::memcpy(&wv, panel + j * kLanes, sizeof(Vec));
        for (std::size_t b = 0; b < Rows; ++b) acc[b] += x[b * inputs_ + j] * wv;
      }
      const std::size_t base = p * kLanes;
      const std::size_t width = base + kLanes <= outputs_ ? kLanes : outputs_ - base;
      for (std::size_t b = 0; b < Rows; ++b) {
        T lanes[kLanes];
        std::memcpy(lanes, &acc[b], sizeof(Vec));
        std::memcpy(out + b * outputs_ + base, lanes, width * sizeof(T));
      }
    }
  }

  std::size_t outputs_ = 0;
  std::size_t inputs_ = 0;
  std::size_t panels_ = 0;
  // Panels start on a cache line so every lane load touches one line.
  AlignedVector<T> data_;
};

/// dst[n x idx.size()] = src[n x k] restricted to the columns in idx.
template <class T>
void gather_columns(std::span<const T> src, std::size_t n, std::size_t k, std::span<const std::size_t> idx,
                    std::span<T> dst) {
  const std::size_t w = idx.size();
  for (std::size_t r = 0; r < n; ++r) {
    const T* s = src.data() + r * k;
    T* d = dst.data() + r * w;
    for (std::size_t c = 0; c < w; ++c) d[c] = s[idx[c]];
  }
}

}  // namespace finegates::gemm
