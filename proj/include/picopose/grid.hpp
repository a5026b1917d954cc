#pragma once

#include <cassert>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace picopose {

// Dense row-major 2D grid. Continuous image coordinates put the center of
// cell (r, c) at (c + 0.5, r + 0.5), so rescaling between resolutions is a
// pure multiplication.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int rows, int cols, const T& fill = T{})
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {}

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool in_bounds(int r, int c) const { return r >= 0 && c >= 0 && r < rows_ && c < cols_; }
  bool same_shape(int rows, int cols) const { return rows_ == rows && cols_ == cols; }
  template <typename U>
  bool same_shape(const Grid<U>& o) const {
    return rows_ == o.rows() && cols_ == o.cols();
  }

  T& operator()(int r, int c) {
    assert(in_bounds(r, c));
    return data_[static_cast<size_t>(r) * cols_ + c];
  }
  const T& operator()(int r, int c) const {
    assert(in_bounds(r, c));
    return data_[static_cast<size_t>(r) * cols_ + c];
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec3f = Eigen::Vector3f;
using Mat3 = Eigen::Matrix3d;

using Mask = Grid<std::uint8_t>;

// Dense correspondence positions in template-frame continuous coordinates.
// Entries may lie outside the template frame; they are never clamped.
using PositionMap = Grid<Vec2>;

// Per-pixel confidence in [0, 1].
using CertaintyMap = Grid<double>;

inline int count_set(const Mask& m) {
  int n = 0;
  for (auto v : m.values()) n += v != 0;
  return n;
}

}  // namespace picopose
