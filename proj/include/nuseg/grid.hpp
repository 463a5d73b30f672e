#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "nuseg/error.hpp"

namespace nuseg {

/// Extents of a dense D x H x W lattice. Axis 0 (D) is the slowest-varying
/// dimension in row-major storage, axis 2 (W) the fastest. 2D inputs are
/// represented as D = 1 volumes.
struct GridShape {
  std::uint32_t d = 0, h = 0, w = 0;

  GridShape() = default;
  GridShape(std::uint32_t d_, std::uint32_t h_, std::uint32_t w_);

  std::size_t voxels() const {
    return static_cast<std::size_t>(d) * h * w;
  }
  std::uint32_t extent(int axis) const {
    return axis == 0 ? d : (axis == 1 ? h : w);
  }
  std::size_t index(std::uint32_t z, std::uint32_t y, std::uint32_t x) const {
    return (static_cast<std::size_t>(z) * h + y) * w + x;
  }
  bool cubic() const { return d == h && h == w; }

  bool operator==(const GridShape& o) const {
    return d == o.d && h == o.h && w == o.w;
  }
  bool operator!=(const GridShape& o) const { return !(*this == o); }
};

/// Dense real-valued scalar field over a grid, row-major. Doubles as the
/// prediction field P, intermediate count maps, and gradient fields.
struct VoxelGrid {
  GridShape shape;
  std::vector<double> values;

  VoxelGrid() = default;
  explicit VoxelGrid(GridShape s, double fill = 0.0)
      : shape(s), values(s.voxels(), fill) {}
  VoxelGrid(GridShape s, std::vector<double> v);

  double& at(std::uint32_t z, std::uint32_t y, std::uint32_t x) {
    return values[shape.index(z, y, x)];
  }
  double at(std::uint32_t z, std::uint32_t y, std::uint32_t x) const {
    return values[shape.index(z, y, x)];
  }

  /// Throws DomainError if any value is NaN or infinite.
  void check_finite(const char* what) const;
};

/// {0,1}-valued grid: one annotation y, or a binarized prediction.
struct BinaryMask {
  GridShape shape;
  std::vector<std::uint8_t> values;  // each exactly 0 or 1

  BinaryMask() = default;
  explicit BinaryMask(GridShape s, std::uint8_t fill = 0);
  BinaryMask(GridShape s, std::vector<std::uint8_t> v);

  std::uint8_t& at(std::uint32_t z, std::uint32_t y, std::uint32_t x) {
    return values[shape.index(z, y, x)];
  }
  std::uint8_t at(std::uint32_t z, std::uint32_t y, std::uint32_t x) const {
    return values[shape.index(z, y, x)];
  }

  std::size_t foreground_count() const;

  /// View as a 0.0/1.0-valued VoxelGrid.
  VoxelGrid to_grid() const;
};

/// Element-wise product. Shapes must match.
VoxelGrid hadamard(const VoxelGrid& a, const VoxelGrid& b);

/// Deterministic ordered sum over all voxels (fixed row-major traversal,
/// no reassociation), so results are bit-reproducible across runs.
double reduce_sum(const VoxelGrid& a);

/// Threshold a probability field: voxel -> 1 iff value > threshold
/// (strictly greater). Values must lie in [0,1].
BinaryMask binarize(const VoxelGrid& p, double threshold);

// ---------------------------------------------------------------------------
// Augmentation group: axis mirrors and 90-degree rotations about x, y, z,
// and everything they generate (the 48 signed axis permutations of a cube).
// ---------------------------------------------------------------------------

/// One group element. Output axis k reads input axis `perm[k]`, with the
/// coordinate reversed when `flip[k]` is set:
///   out(o0,o1,o2) = in(s_{perm[0]}, ...) with s_{perm[k]} = o_k or reversed.
struct AugmentOp {
  std::array<std::uint8_t, 3> perm{0, 1, 2};
  std::array<bool, 3> flip{false, false, false};

  static AugmentOp identity() { return {}; }
  /// Mirror along one axis (0=z, 1=y, 2=x).
  static AugmentOp mirror(int axis);
  /// 90-degree rotation about one axis.
  static AugmentOp rotate90(int axis);
  /// All 48 group elements (6 permutations x 8 flip patterns),
  /// in a fixed deterministic order with the identity first.
  static std::vector<AugmentOp> all();

  bool is_identity() const {
    return perm == std::array<std::uint8_t, 3>{0, 1, 2} &&
           flip == std::array<bool, 3>{false, false, false};
  }
  bool operator==(const AugmentOp& o) const {
    return perm == o.perm && flip == o.flip;
  }
};

/// compose(a, b): first apply b, then a.
AugmentOp compose(const AugmentOp& a, const AugmentOp& b);
AugmentOp inverse(const AugmentOp& t);

GridShape transformed_shape(const GridShape& s, const AugmentOp& t);

/// Apply a group element: a pure voxel permutation (value multiset and
/// sums are preserved exactly).
VoxelGrid augment(const VoxelGrid& g, const AugmentOp& t);
BinaryMask augment(const BinaryMask& g, const AugmentOp& t);

}  // namespace nuseg
