#pragma once

#include <cstdint>
#include <functional>

#include "nuseg/grid.hpp"
#include "nuseg/rpmap.hpp"

namespace nuseg {

enum class LossKind { WCEL, DL, RPDL };

const char* loss_kind_name(LossKind k);
LossKind loss_kind_from_name(const std::string& name);

/// Shared loss hyperparameters. Probabilities entering log terms are
/// clipped into [clip_lo, clip_hi] = [epsilon, 1 - epsilon].
struct LossConfig {
  double epsilon = 1e-7;
  double wcel_weight = 1.0;
  double clip_lo = 1e-7;
  double clip_hi = 1.0 - 1e-7;

  LossConfig() = default;
  LossConfig(double eps, double w);

  void validate() const;
};

/// Loss value plus its gradient with respect to every prediction voxel.
struct LossGradPair {
  double value = 0.0;
  VoxelGrid gradient;
};

/// Weighted cross-entropy:
///   -(1/N) * sum[ w*y_n*log(p_n) + (1-y_n)*log(1-p_n) ]
/// with p clipped into [clip_lo, clip_hi]. The gradient is taken through
/// the clamp, so it is zero wherever clipping is active.
LossGradPair wcel(const BinaryMask& y, const VoxelGrid& p,
                  const LossConfig& cfg);

/// Background/foreground voxel ratio over a set of training masks;
/// the conventional choice for the WCEL weight.
double default_wcel_weight(const std::vector<BinaryMask>& y_all);

/// Soft Dice loss:
///   1 - (2*sum(y*p) + eps) / (sum(y) + sum(p) + eps)
/// The gradient follows the same convention as the RPDL gradient: the
/// epsilon guard appears in the value only, not in the gradient terms.
LossGradPair dice_loss(const BinaryMask& y, const VoxelGrid& p,
                       const LossConfig& cfg);

/// Reward-penalty Dice loss:
///   1 - (2*sum(y*p*M) + eps) / (sum(y*|M|) + sum(p*|M|) + eps)
/// Gradient wrt voxel i (epsilon omitted):
///   2 * (|M_i|*sum(y*p*M) - y_i*M_i*(sum(y*|M|)+sum(p*|M|))) / (...)^2
LossGradPair rpdl(const BinaryMask& y, const VoxelGrid& p,
                  const RewardPenaltyMap& m, const LossConfig& cfg);

/// Loss value only (no gradient), for finite differencing and validation
/// passes. For WCEL/DL the map argument is ignored.
double loss_value(LossKind kind, const BinaryMask& y, const VoxelGrid& p,
                  const RewardPenaltyMap* m, const LossConfig& cfg);

LossGradPair loss_value_grad(LossKind kind, const BinaryMask& y,
                             const VoxelGrid& p, const RewardPenaltyMap* m,
                             const LossConfig& cfg);

/// Central finite differences of an arbitrary functional of the grid:
///   g_i = (f(p + h*e_i) - f(p - h*e_i)) / (2h)
VoxelGrid finite_diff_gradient(const std::function<double(const VoxelGrid&)>& f,
                               const VoxelGrid& p, double h);

/// Central finite differences through one of the three losses, using the
/// epsilon-inclusive loss value. Requires every p_i in [h, 1-h] so the
/// probed points stay valid probabilities.
VoxelGrid finite_diff_gradient(LossKind kind, const BinaryMask& y,
                               const VoxelGrid& p, const RewardPenaltyMap* m,
                               const LossConfig& cfg, double h);

/// Randomized analytic-vs-finite-difference sweep for one loss kind:
/// shapes up to 8x8x8, p in [0.1, 0.9], random valid maps for RPDL,
/// central differences with h=1e-5. Relative error uses an absolute
/// floor of 1e-8 on the comparison scale.
struct GradcheckReport {
  int trials = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

GradcheckReport loss_gradcheck(LossKind kind, int trials, double tol,
                               std::uint64_t seed);

}  // namespace nuseg
