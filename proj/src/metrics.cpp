#include "nuseg/metrics.hpp"

#include <cmath>

namespace nuseg {

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
  mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());  // population std
  sd = std::sqrt(var);
}

}  // namespace

MetricReport MetricReport::from_entries(std::vector<Entry> entries) {
  MetricReport r;
  r.per_reference = std::move(entries);
  std::vector<double> dices, rpds;
  dices.reserve(r.per_reference.size());
  rpds.reserve(r.per_reference.size());
  for (const Entry& e : r.per_reference) {
    dices.push_back(e.dice);
    rpds.push_back(e.rpd);
  }
  if (!dices.empty()) {
    mean_std(dices, r.dice_mean, r.dice_std);
    mean_std(rpds, r.rpd_mean, r.rpd_std);
  }
  return r;
}

double dice_coefficient(const BinaryMask& y, const BinaryMask& p_bin) {
  if (y.shape != p_bin.shape) {
    throw DimensionError("dice_coefficient: mask shapes differ");
  }
  std::size_t overlap = 0, sum_y = 0, sum_p = 0;
  for (std::size_t i = 0; i < y.values.size(); ++i) {
    overlap += static_cast<std::size_t>(y.values[i] & p_bin.values[i]);
    sum_y += y.values[i];
    sum_p += p_bin.values[i];
  }
  if (sum_y + sum_p == 0) {
    throw UndefinedMetricError("dice_coefficient: both masks are empty");
  }
  return 2.0 * static_cast<double>(overlap) /
         static_cast<double>(sum_y + sum_p);
}

double rpd_coefficient(const BinaryMask& y, const BinaryMask& p_bin,
                       const RewardPenaltyMap& m) {
  if (y.shape != p_bin.shape || y.shape != m.shape) {
    throw DimensionError("rpd_coefficient: shapes differ");
  }
  double overlap = 0.0, sum_y = 0.0, sum_p = 0.0;
  for (std::size_t i = 0; i < y.values.size(); ++i) {
    const double yi = static_cast<double>(y.values[i]);
    const double pi = static_cast<double>(p_bin.values[i]);
    overlap += yi * pi * m.values[i];
  }
  for (std::size_t i = 0; i < y.values.size(); ++i) {
    sum_y += static_cast<double>(y.values[i]) * std::abs(m.values[i]);
  }
  for (std::size_t i = 0; i < y.values.size(); ++i) {
    sum_p += static_cast<double>(p_bin.values[i]) * std::abs(m.values[i]);
  }
  const double denom = sum_y + sum_p;
  if (denom <= 0.0) {
    throw UndefinedMetricError(
        "rpd_coefficient: denominator is zero (no mask mass on the map support)");
  }
  return 2.0 * overlap / denom;
}

MetricReport evaluate_against_set(const VoxelGrid& p, const AnnotationSet& refs,
                                  const RewardPenaltyMap& m, double threshold) {
  refs.validate();
  if (p.shape != refs.shape() || m.shape != p.shape) {
    throw DimensionError("evaluate_against_set: shapes differ");
  }
  const BinaryMask p_bin = binarize(p, threshold);
  std::vector<MetricReport::Entry> entries;
  entries.reserve(refs.size());
  for (std::size_t e = 0; e < refs.size(); ++e) {
    MetricReport::Entry entry;
    entry.annotator_id = refs.annotator_ids[e];
    entry.dice = dice_coefficient(refs.masks[e], p_bin);
    entry.rpd = rpd_coefficient(refs.masks[e], p_bin, m);
    entries.push_back(std::move(entry));
  }
  return MetricReport::from_entries(std::move(entries));
}

MetricReport inter_annotator_baseline(const BinaryMask& held_out,
                                      const AnnotationSet& training_refs,
                                      const RewardPenaltyMap& m) {
  training_refs.validate();
  if (held_out.shape != training_refs.shape()) {
    throw DimensionError("inter_annotator_baseline: shapes differ");
  }
  return evaluate_against_set(held_out.to_grid(), training_refs, m, 0.5);
}

}  // namespace nuseg
