#pragma once

#include <string>
#include <vector>

#include "nuseg/grid.hpp"

namespace nuseg {

/// All annotation masks for one input image, one per annotator.
struct AnnotationSet {
  std::string image_id;
  std::vector<BinaryMask> masks;
  std::vector<std::string> annotator_ids;

  AnnotationSet() = default;
  AnnotationSet(std::string image_id_, std::vector<BinaryMask> masks_,
                std::vector<std::string> annotator_ids_);

  std::size_t size() const { return masks.size(); }
  const GridShape& shape() const { return masks.front().shape; }

  /// Validates E >= 1, uniform shapes, distinct annotator ids.
  void validate() const;
};

/// Per-voxel reward/penalty weights. Annotated voxels carry positive
/// weights proportional to how many annotators covered them (max 1 after
/// normalization); voxels no annotator touched carry `penalty_value`.
struct RewardPenaltyMap {
  GridShape shape;
  std::vector<double> values;
  double penalty_value = -1.0;

  RewardPenaltyMap() = default;
  explicit RewardPenaltyMap(GridShape s, double penalty = -1.0)
      : shape(s), values(s.voxels(), 0.0), penalty_value(penalty) {}

  VoxelGrid to_grid() const { return VoxelGrid(shape, values); }
  VoxelGrid abs_grid() const;

  static RewardPenaltyMap from_grid(const VoxelGrid& g, double penalty = -1.0);
};

/// Step 1: per-voxel count of annotators whose mask is set there.
VoxelGrid count_map(const AnnotationSet& annotations);

/// Step 2: voxels with count 0 become the negative of the maximum observed
/// count; annotated voxels are left unchanged. Rejects all-zero count maps.
VoxelGrid apply_penalty(const VoxelGrid& counts);

/// Step 3: divide by the maximum observed count, so the most-agreed voxels
/// reach exactly 1 and unannotated voxels reach exactly -1. With a custom
/// penalty the unannotated voxels are pinned to `penalty_value` instead.
RewardPenaltyMap normalize(const VoxelGrid& penalized,
                           double penalty_value = -1.0);

/// Full three-step construction for one image's annotation set.
RewardPenaltyMap build_rpmap(const AnnotationSet& annotations,
                             double penalty_value = -1.0);

RewardPenaltyMap augment(const RewardPenaltyMap& m, const AugmentOp& t);

/// An all-ones map (every voxel weight 1): reduces RPDL to plain DL.
RewardPenaltyMap unit_map(GridShape shape);

}  // namespace nuseg
