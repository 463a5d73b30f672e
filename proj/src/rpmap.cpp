#include "nuseg/rpmap.hpp"

#include <cmath>
#include <set>

namespace nuseg {

AnnotationSet::AnnotationSet(std::string image_id_,
                             std::vector<BinaryMask> masks_,
                             std::vector<std::string> annotator_ids_)
    : image_id(std::move(image_id_)),
      masks(std::move(masks_)),
      annotator_ids(std::move(annotator_ids_)) {
  validate();
}

void AnnotationSet::validate() const {
  if (masks.empty()) {
    throw DegenerateAnnotationError("AnnotationSet for image '" + image_id +
                                    "' has no masks");
  }
  if (annotator_ids.size() != masks.size()) {
    throw DimensionError("AnnotationSet: annotator id count differs from mask count");
  }
  const GridShape& s = masks.front().shape;
  for (const BinaryMask& m : masks) {
    if (m.shape != s) {
      throw DimensionError("AnnotationSet for image '" + image_id +
                           "' mixes mask shapes");
    }
  }
  std::set<std::string> ids(annotator_ids.begin(), annotator_ids.end());
  if (ids.size() != annotator_ids.size()) {
    throw DomainError("AnnotationSet for image '" + image_id +
                      "' has duplicate annotator ids");
  }
}

VoxelGrid RewardPenaltyMap::abs_grid() const {
  VoxelGrid g(shape);
  for (std::size_t i = 0; i < values.size(); ++i) {
    g.values[i] = std::abs(values[i]);
  }
  return g;
}

RewardPenaltyMap RewardPenaltyMap::from_grid(const VoxelGrid& g,
                                             double penalty) {
  RewardPenaltyMap m(g.shape, penalty);
  m.values = g.values;
  return m;
}

VoxelGrid count_map(const AnnotationSet& annotations) {
  annotations.validate();
  VoxelGrid counts(annotations.shape());
  for (const BinaryMask& m : annotations.masks) {
    for (std::size_t i = 0; i < counts.values.size(); ++i) {
      counts.values[i] += static_cast<double>(m.values[i]);
    }
  }
  return counts;
}

VoxelGrid apply_penalty(const VoxelGrid& counts) {
  double max_count = 0.0;
  for (double c : counts.values) {
    if (c < 0.0 || c != std::floor(c)) {
      throw DomainError("apply_penalty: counts must be nonnegative integers");
    }
    if (c > max_count) max_count = c;
  }
  if (max_count == 0.0) {
    throw DegenerateAnnotationError(
        "apply_penalty: no voxel was annotated by any expert");
  }
  VoxelGrid out(counts.shape);
  for (std::size_t i = 0; i < counts.values.size(); ++i) {
    out.values[i] = counts.values[i] == 0.0 ? -max_count : counts.values[i];
  }
  return out;
}

RewardPenaltyMap normalize(const VoxelGrid& penalized, double penalty_value) {
  double max_count = 0.0;
  for (double v : penalized.values) {
    if (v > max_count) max_count = v;
  }
  if (max_count <= 0.0) {
    throw DegenerateAnnotationError(
        "normalize: input has no positive counts; run apply_penalty first");
  }
  RewardPenaltyMap m(penalized.shape, penalty_value);
  for (std::size_t i = 0; i < penalized.values.size(); ++i) {
    const double v = penalized.values[i];
    m.values[i] = v < 0.0 ? penalty_value : v / max_count;
  }
  return m;
}

RewardPenaltyMap build_rpmap(const AnnotationSet& annotations,
                             double penalty_value) {
  return normalize(apply_penalty(count_map(annotations)), penalty_value);
}

RewardPenaltyMap augment(const RewardPenaltyMap& m, const AugmentOp& t) {
  RewardPenaltyMap out(transformed_shape(m.shape, t), m.penalty_value);
  out.values = augment(VoxelGrid(m.shape, m.values), t).values;
  return out;
}

RewardPenaltyMap unit_map(GridShape shape) {
  RewardPenaltyMap m(shape);
  for (double& v : m.values) v = 1.0;
  return m;
}

}  // namespace nuseg
