#pragma once

#include <string>
#include <vector>

#include "nuseg/grid.hpp"
#include "nuseg/rpmap.hpp"

namespace nuseg {

/// Per-reference scores against one testing set, with their mean and
/// population standard deviation.
struct MetricReport {
  struct Entry {
    std::string annotator_id;
    double dice = 0.0;
    double rpd = 0.0;
  };
  std::vector<Entry> per_reference;
  double dice_mean = 0.0, dice_std = 0.0;
  double rpd_mean = 0.0, rpd_std = 0.0;

  static MetricReport from_entries(std::vector<Entry> entries);
};

/// Dice coefficient on binarized masks: 2|y ∩ p'| / (|y| + |p'|).
/// No epsilon guard on the metric side; two empty masks are undefined.
double dice_coefficient(const BinaryMask& y, const BinaryMask& p_bin);

/// Reward-penalty Dice coefficient:
///   2*sum(y*p'*M) / (sum(y*|M|) + sum(p'*|M|))
/// Undefined when the denominator vanishes.
double rpd_coefficient(const BinaryMask& y, const BinaryMask& p_bin,
                       const RewardPenaltyMap& m);

/// Binarize a prediction at `threshold` and score it against every
/// reference annotation, Dice and RPD per reference plus mean/std.
MetricReport evaluate_against_set(const VoxelGrid& p, const AnnotationSet& refs,
                                  const RewardPenaltyMap& m, double threshold);

/// The held-out annotator's own mask scored as a "prediction" against the
/// training annotators' masks: the human reference level for Experiment 2.
MetricReport inter_annotator_baseline(const BinaryMask& held_out,
                                      const AnnotationSet& training_refs,
                                      const RewardPenaltyMap& m);

}  // namespace nuseg
