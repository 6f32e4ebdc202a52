#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dime {

using Shape = std::vector<int>;

// 64-byte aligned storage: vectorized elementwise kernels then see the same
// packet layout for a sample whatever batch it sits in, so results do not
// depend on batching.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ',';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

// Dense row-major tensor. Images are NCHW.
template <typename T>
struct Tensor {
  Shape shape;
  AlignedVector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, const std::vector<T>& values) : shape(std::move(s)), data(values.begin(), values.end()) {
    if (data.size() != shape_numel(shape))
      throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
  }
  Tensor(Shape s, std::initializer_list<T> values) : Tensor(std::move(s), std::vector<T>(values)) {}
  Tensor(Shape s, AlignedVector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != shape_numel(shape))
      throw std::invalid_argument("tensor data size does not match shape " + shape_str(shape));
  }

  std::size_t numel() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool empty() const { return data.empty(); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  // Elements per leading-index slice (one image for NCHW).
  std::size_t sample_size() const { return shape.empty() || shape[0] == 0 ? 0 : numel() / shape[0]; }
  std::span<T> sample(int n) { return {data.data() + n * sample_size(), sample_size()}; }
  std::span<const T> sample(int n) const { return {data.data() + n * sample_size(), sample_size()}; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel()) throw std::invalid_argument("reshape changes element count");
    return Tensor(std::move(s), data);
  }
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

// Stacks equally shaped samples along a new leading axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw std::invalid_argument("stack of zero tensors");
  Shape s{static_cast<int>(items.size())};
  s.insert(s.end(), items[0].shape.begin(), items[0].shape.end());
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& it : items) {
    require_same_shape(it, items[0], "stack");
    std::copy(it.data.begin(), it.data.end(), out.data.begin() + off);
    off += it.numel();
  }
  return out;
}

// Extracts leading-index n as a tensor without the leading axis.
template <typename T>
Tensor<T> unstack(const Tensor<T>& batch, int n) {
  Shape s(batch.shape.begin() + 1, batch.shape.end());
  auto src = batch.sample(n);
  return Tensor<T>(s, AlignedVector<T>(src.begin(), src.end()));
}

// Gathers rows of a batch (leading axis) by index.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& batch, std::span<const int> rows) {
  Shape s = batch.shape;
  s[0] = static_cast<int>(rows.size());
  Tensor<T> out(s);
  const std::size_t ss = batch.sample_size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = batch.sample(rows[i]);
    std::copy(src.begin(), src.end(), out.data.begin() + i * ss);
  }
  return out;
}

template <typename T>
void scatter_rows(Tensor<T>& batch, std::span<const int> rows, const Tensor<T>& values) {
  const std::size_t ss = batch.sample_size();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = values.sample(static_cast<int>(i));
    std::copy(src.begin(), src.end(), batch.data.begin() + rows[i] * ss);
  }
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Random engine used everywhere; std::mt19937_64 is fully specified by the standard.
using Rng = std::mt19937_64;

// Box-Muller over the engine's raw output so noise streams are identical across
// standard library implementations.
template <typename T>
void fill_normal(std::span<T> out, Rng& rng) {
  constexpr double two_pi = 6.283185307179586476925286766559;
  constexpr double inv = 1.0 / 9007199254740992.0;  // 2^-53
  std::size_t i = 0;
  while (i < out.size()) {
    double u1 = (static_cast<double>(rng() >> 11) + 0.5) * inv;
    double u2 = static_cast<double>(rng() >> 11) * inv;
    double r = std::sqrt(-2.0 * std::log(u1));
    out[i++] = static_cast<T>(r * std::cos(two_pi * u2));
    if (i < out.size()) out[i++] = static_cast<T>(r * std::sin(two_pi * u2));
  }
}

template <typename T>
Tensor<T> randn(const Shape& shape, Rng& rng) {
  Tensor<T> t(shape);
  fill_normal<T>(std::span<T>(t.data), rng);
  return t;
}

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0); }

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  const auto span = static_cast<std::uint64_t>(hi_inclusive - lo + 1);
  return lo + static_cast<int>(rng() % span);
}

// Child seed derivation (splitmix64 finalizer) for independent per-item streams.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

}  // namespace dime
