#include "nuseg/grid.hpp"

#include <cmath>
#include <string>

namespace nuseg {

GridShape::GridShape(std::uint32_t d_, std::uint32_t h_, std::uint32_t w_)
    : d(d_), h(h_), w(w_) {
  if (d == 0 || h == 0 || w == 0) {
    throw DimensionError("GridShape extents must all be >= 1, got " +
                         std::to_string(d) + "x" + std::to_string(h) + "x" +
                         std::to_string(w));
  }
}

VoxelGrid::VoxelGrid(GridShape s, std::vector<double> v)
    : shape(s), values(std::move(v)) {
  if (values.size() != shape.voxels()) {
    throw DimensionError("VoxelGrid value count " +
                         std::to_string(values.size()) +
                         " does not match shape voxel count " +
                         std::to_string(shape.voxels()));
  }
}

void VoxelGrid::check_finite(const char* what) const {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw DomainError(std::string(what) + ": non-finite voxel value");
    }
  }
}

BinaryMask::BinaryMask(GridShape s, std::uint8_t fill)
    : shape(s), values(s.voxels(), fill) {
  if (fill > 1) throw DomainError("BinaryMask fill must be 0 or 1");
}

BinaryMask::BinaryMask(GridShape s, std::vector<std::uint8_t> v)
    : shape(s), values(std::move(v)) {
  if (values.size() != shape.voxels()) {
    throw DimensionError("BinaryMask value count does not match shape");
  }
  for (std::uint8_t b : values) {
    if (b > 1) throw DomainError("BinaryMask values must be exactly 0 or 1");
  }
}

std::size_t BinaryMask::foreground_count() const {
  std::size_t n = 0;
  for (std::uint8_t b : values) n += b;
  return n;
}

VoxelGrid BinaryMask::to_grid() const {
  VoxelGrid g(shape);
  for (std::size_t i = 0; i < values.size(); ++i) {
    g.values[i] = static_cast<double>(values[i]);
  }
  return g;
}

VoxelGrid hadamard(const VoxelGrid& a, const VoxelGrid& b) {
  if (a.shape != b.shape) {
    throw DimensionError("hadamard: operand shapes differ");
  }
  VoxelGrid out(a.shape);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    out.values[i] = a.values[i] * b.values[i];
  }
  return out;
}

double reduce_sum(const VoxelGrid& a) {
  double s = 0.0;
  for (double v : a.values) s += v;
  return s;
}

BinaryMask binarize(const VoxelGrid& p, double threshold) {
  BinaryMask out(p.shape);
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double v = p.values[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DomainError("binarize: value " + std::to_string(v) +
                        " outside [0,1]");
    }
    out.values[i] = v > threshold ? 1 : 0;
  }
  return out;
}

AugmentOp AugmentOp::mirror(int axis) {
  AugmentOp t;
  t.flip[axis] = true;
  return t;
}

AugmentOp AugmentOp::rotate90(int axis) {
  // Rotate the plane spanned by the two other axes; one of them reversed.
  AugmentOp t;
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  t.perm[a] = static_cast<std::uint8_t>(b);
  t.perm[b] = static_cast<std::uint8_t>(a);
  t.flip[b] = true;
  return t;
}

std::vector<AugmentOp> AugmentOp::all() {
  static const std::array<std::array<std::uint8_t, 3>, 6> perms = {{
      {0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
  std::vector<AugmentOp> ops;
  ops.reserve(48);
  for (const auto& p : perms) {
    for (int f = 0; f < 8; ++f) {
      AugmentOp t;
      t.perm = p;
      t.flip = {(f & 1) != 0, (f & 2) != 0, (f & 4) != 0};
      ops.push_back(t);
    }
  }
  return ops;
}

AugmentOp compose(const AugmentOp& a, const AugmentOp& b) {
  // (a o b): output axis k of the result reads input axis b.perm[a.perm[k]].
  // A flip happens when exactly one of the two stages flips that lane.
  AugmentOp r;
  for (int k = 0; k < 3; ++k) {
    r.perm[k] = b.perm[a.perm[k]];
    r.flip[k] = a.flip[k] != b.flip[a.perm[k]];
  }
  return r;
}

AugmentOp inverse(const AugmentOp& t) {
  AugmentOp r;
  for (int k = 0; k < 3; ++k) {
    r.perm[t.perm[k]] = static_cast<std::uint8_t>(k);
    r.flip[t.perm[k]] = t.flip[k];
  }
  return r;
}

GridShape transformed_shape(const GridShape& s, const AugmentOp& t) {
  return GridShape(s.extent(t.perm[0]), s.extent(t.perm[1]),
                   s.extent(t.perm[2]));
}

namespace {

template <typename G>
G apply_op(const G& g, const AugmentOp& t) {
  const GridShape out_shape = transformed_shape(g.shape, t);
  G out(out_shape);
  std::array<std::uint32_t, 3> in_coord{};
  for (std::uint32_t o0 = 0; o0 < out_shape.d; ++o0) {
    for (std::uint32_t o1 = 0; o1 < out_shape.h; ++o1) {
      for (std::uint32_t o2 = 0; o2 < out_shape.w; ++o2) {
        const std::array<std::uint32_t, 3> o{o0, o1, o2};
        for (int k = 0; k < 3; ++k) {
          const std::uint32_t n = g.shape.extent(t.perm[k]);
          in_coord[t.perm[k]] = t.flip[k] ? (n - 1 - o[k]) : o[k];
        }
        out.at(o0, o1, o2) = g.at(in_coord[0], in_coord[1], in_coord[2]);
      }
    }
  }
  return out;
}

}  // namespace

VoxelGrid augment(const VoxelGrid& g, const AugmentOp& t) {
  return apply_op(g, t);
}

BinaryMask augment(const BinaryMask& g, const AugmentOp& t) {
  return apply_op(g, t);
}

}  // namespace nuseg
