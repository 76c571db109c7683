#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dood {

// Planar channel-major (C, H, W) storage.
template <typename T>
struct Tensor3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Tensor3() = default;
  Tensor3(int c, int h, int w, T fill = T{})
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  std::size_t size() const { return data.size(); }

  T& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  const T& at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  std::span<T> plane(int c) { return {data.data() + c * plane_size(), plane_size()}; }
  std::span<const T> plane(int c) const {
    return {data.data() + c * plane_size(), plane_size()};
  }

  bool same_shape(const Tensor3& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  bool operator==(const Tensor3&) const = default;
};

// Single-channel (H, W) grid, row-major.
template <typename T>
struct Grid2 {
  int height = 0;
  int width = 0;
  std::vector<T> data;

  Grid2() = default;
  Grid2(int h, int w, T fill = T{})
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t size() const { return data.size(); }
  T& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const Grid2&) const = default;
};

}  // namespace dood
