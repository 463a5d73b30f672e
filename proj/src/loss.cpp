#include "nuseg/loss.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "nuseg/rng.hpp"

namespace nuseg {

const char* loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::WCEL: return "WCEL";
    case LossKind::DL: return "DL";
    case LossKind::RPDL: return "RPDL";
  }
  return "?";
}

LossKind loss_kind_from_name(const std::string& name) {
  std::string s;
  for (char c : name) s.push_back(static_cast<char>(std::tolower(c)));
  if (s == "wcel") return LossKind::WCEL;
  if (s == "dl" || s == "dice") return LossKind::DL;
  if (s == "rpdl") return LossKind::RPDL;
  throw ConfigError("unknown loss kind '" + name + "' (expected wcel|dl|rpdl)");
}

LossConfig::LossConfig(double eps, double w)
    : epsilon(eps), wcel_weight(w), clip_lo(eps), clip_hi(1.0 - eps) {
  validate();
}

void LossConfig::validate() const {
  if (!(epsilon > 0.0 && epsilon < 0.01)) {
    throw ConfigError("LossConfig: epsilon must lie in (0, 0.01)");
  }
  if (!(wcel_weight > 0.0)) {
    throw ConfigError("LossConfig: wcel_weight must be positive");
  }
  // Clip bounds must be symmetric about 0.5.
  if (std::abs((clip_lo + clip_hi) - 1.0) > 1e-15) {
    throw ConfigError("LossConfig: clip bounds must be symmetric about 0.5");
  }
}

namespace {

void check_probability_field(const BinaryMask& y, const VoxelGrid& p,
                             const char* op) {
  if (y.shape != p.shape) {
    throw DimensionError(std::string(op) + ": mask and prediction shapes differ");
  }
  for (double v : p.values) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DomainError(std::string(op) + ": prediction value " +
                        std::to_string(v) + " outside [0,1]");
    }
  }
}

}  // namespace

LossGradPair wcel(const BinaryMask& y, const VoxelGrid& p,
                  const LossConfig& cfg) {
  cfg.validate();
  check_probability_field(y, p, "wcel");
  const std::size_t n = p.values.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double w = cfg.wcel_weight;

  LossGradPair out;
  out.gradient = VoxelGrid(p.shape);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double yi = static_cast<double>(y.values[i]);
    const double pi = std::clamp(p.values[i], cfg.clip_lo, cfg.clip_hi);
    acc += w * yi * std::log(pi) + (1.0 - yi) * std::log(1.0 - pi);
    const bool clipped = p.values[i] < cfg.clip_lo || p.values[i] > cfg.clip_hi;
    out.gradient.values[i] =
        clipped ? 0.0 : -inv_n * (w * yi / pi - (1.0 - yi) / (1.0 - pi));
  }
  out.value = -inv_n * acc;
  return out;
}

double default_wcel_weight(const std::vector<BinaryMask>& y_all) {
  std::size_t fg = 0, total = 0;
  for (const BinaryMask& m : y_all) {
    fg += m.foreground_count();
    total += m.values.size();
  }
  if (fg == 0) {
    throw DegenerateAnnotationError(
        "default_wcel_weight: no foreground voxel in any mask");
  }
  return static_cast<double>(total - fg) / static_cast<double>(fg);
}

LossGradPair dice_loss(const BinaryMask& y, const VoxelGrid& p,
                       const LossConfig& cfg) {
  cfg.validate();
  check_probability_field(y, p, "dice_loss");
  const std::size_t n = p.values.size();

  double overlap = 0.0, sum_y = 0.0, sum_p = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double yi = static_cast<double>(y.values[i]);
    overlap += yi * p.values[i];
  }
  for (std::size_t i = 0; i < n; ++i) sum_y += static_cast<double>(y.values[i]);
  for (std::size_t i = 0; i < n; ++i) sum_p += p.values[i];

  const double denom = sum_y + sum_p;
  LossGradPair out;
  out.value = 1.0 - (2.0 * overlap + cfg.epsilon) / (denom + cfg.epsilon);
  out.gradient = VoxelGrid(p.shape);
  if (denom > 0.0) {
    const double inv_d2 = 1.0 / (denom * denom);
    for (std::size_t i = 0; i < n; ++i) {
      const double yi = static_cast<double>(y.values[i]);
      out.gradient.values[i] = 2.0 * (overlap - yi * denom) * inv_d2;
    }
  }
  // denom == 0 (both fields empty): the epsilon guard pins the value at 0
  // and there is no descent direction; the gradient stays 0.
  return out;
}

LossGradPair rpdl(const BinaryMask& y, const VoxelGrid& p,
                  const RewardPenaltyMap& m, const LossConfig& cfg) {
  cfg.validate();
  check_probability_field(y, p, "rpdl");
  if (m.shape != p.shape) {
    throw DimensionError("rpdl: map shape differs from prediction shape");
  }
  const std::size_t n = p.values.size();

  double overlap = 0.0, sum_y = 0.0, sum_p = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double yi = static_cast<double>(y.values[i]);
    overlap += yi * p.values[i] * m.values[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    sum_y += static_cast<double>(y.values[i]) * std::abs(m.values[i]);
  }
  for (std::size_t i = 0; i < n; ++i) {
    sum_p += p.values[i] * std::abs(m.values[i]);
  }

  const double denom = sum_y + sum_p;
  LossGradPair out;
  out.value = 1.0 - (2.0 * overlap + cfg.epsilon) / (denom + cfg.epsilon);
  out.gradient = VoxelGrid(p.shape);
  if (denom > 0.0) {
    const double inv_d2 = 1.0 / (denom * denom);
    for (std::size_t i = 0; i < n; ++i) {
      const double yi = static_cast<double>(y.values[i]);
      const double mi = m.values[i];
      out.gradient.values[i] =
          2.0 * (std::abs(mi) * overlap - yi * mi * denom) * inv_d2;
    }
  }
  return out;
}

double loss_value(LossKind kind, const BinaryMask& y, const VoxelGrid& p,
                  const RewardPenaltyMap* m, const LossConfig& cfg) {
  return loss_value_grad(kind, y, p, m, cfg).value;
}

LossGradPair loss_value_grad(LossKind kind, const BinaryMask& y,
                             const VoxelGrid& p, const RewardPenaltyMap* m,
                             const LossConfig& cfg) {
  switch (kind) {
    case LossKind::WCEL: return wcel(y, p, cfg);
    case LossKind::DL: return dice_loss(y, p, cfg);
    case LossKind::RPDL:
      if (!m) throw ConfigError("rpdl requires a reward-penalty map");
      return rpdl(y, p, *m, cfg);
  }
  throw ConfigError("unknown loss kind");
}

namespace {

void check_fd_step(double h) {
  if (!(h >= 1e-6 && h <= 1e-3)) {
    throw ConfigError("finite_diff_gradient: h must lie in [1e-6, 1e-3]");
  }
}

}  // namespace

VoxelGrid finite_diff_gradient(const std::function<double(const VoxelGrid&)>& f,
                               const VoxelGrid& p, double h) {
  check_fd_step(h);
  VoxelGrid grad(p.shape);
  VoxelGrid probe = p;
  for (std::size_t i = 0; i < p.values.size(); ++i) {
    const double orig = probe.values[i];
    probe.values[i] = orig + h;
    const double plus = f(probe);
    probe.values[i] = orig - h;
    const double minus = f(probe);
    probe.values[i] = orig;
    grad.values[i] = (plus - minus) / (2.0 * h);
  }
  return grad;
}

VoxelGrid finite_diff_gradient(LossKind kind, const BinaryMask& y,
                               const VoxelGrid& p, const RewardPenaltyMap* m,
                               const LossConfig& cfg, double h) {
  check_fd_step(h);
  for (double v : p.values) {
    if (!(v >= h && v <= 1.0 - h)) {
      throw DomainError(
          "finite_diff_gradient: prediction too close to [0,1] bounds for h=" +
          std::to_string(h));
    }
  }
  return finite_diff_gradient(
      [&](const VoxelGrid& q) { return loss_value(kind, y, q, m, cfg); }, p, h);
}

GradcheckReport loss_gradcheck(LossKind kind, int trials, double tol,
                               std::uint64_t seed) {
  if (trials < 1) throw ConfigError("loss_gradcheck: trials must be >= 1");
  if (!(tol > 0.0)) throw ConfigError("loss_gradcheck: tol must be positive");
  Rng rng(seed);
  const LossConfig cfg;
  const double h = 1e-5;
  GradcheckReport report;
  report.trials = trials;
  for (int trial = 0; trial < trials; ++trial) {
    // Sides 4..8: the analytic gradients drop epsilon (the losses keep it in
    // the value only), so the reduction denominators must be large enough
    // that the O(eps) discrepancy against finite differences of the
    // eps-inclusive value stays below the absolute floor. At 4^3 and up the
    // eps term is ~1e-9 or less; degenerate 1-voxel instances would surface
    // it at full size.
    const GridShape shape(4 + static_cast<std::uint32_t>(rng.uniform_index(5)),
                          4 + static_cast<std::uint32_t>(rng.uniform_index(5)),
                          4 + static_cast<std::uint32_t>(rng.uniform_index(5)));
    const double fg_prob = rng.uniform(0.2, 0.8);
    BinaryMask y(shape);
    for (auto& v : y.values) v = rng.uniform01() < fg_prob ? 1 : 0;
    if (y.foreground_count() == 0)
      y.values[rng.uniform_index(shape.voxels())] = 1;
    VoxelGrid p(shape);
    for (auto& v : p.values) v = rng.uniform(0.1, 0.9);

    RewardPenaltyMap map;
    const RewardPenaltyMap* map_ptr = nullptr;
    if (kind == LossKind::RPDL) {
      const std::size_t annotators = 1 + rng.uniform_index(3);
      std::vector<BinaryMask> masks;
      std::vector<std::string> ids;
      bool any = false;
      for (std::size_t e = 0; e < annotators; ++e) {
        BinaryMask m(shape);
        for (auto& v : m.values) {
          v = rng.uniform01() < 0.5 ? 1 : 0;
          any = any || v;
        }
        masks.push_back(std::move(m));
        ids.push_back("g" + std::to_string(e));
      }
      if (!any) masks[0].values[rng.uniform_index(shape.voxels())] = 1;
      map = build_rpmap(AnnotationSet("gradcheck", std::move(masks), std::move(ids)));
      map_ptr = &map;
    }

    const LossGradPair lg = loss_value_grad(kind, y, p, map_ptr, cfg);
    const VoxelGrid fd = finite_diff_gradient(kind, y, p, map_ptr, cfg, h);
    for (std::size_t i = 0; i < fd.values.size(); ++i) {
      const double a = lg.gradient.values[i];
      const double f = fd.values[i];
      // Differences at or below 1e-8 absolute are forgiven: that floor
      // absorbs both finite-difference roundoff and the epsilon kept out of
      // the analytic gradients.
      const double diff = std::abs(a - f);
      if (diff <= 1e-8) continue;
      const double scale = std::max(std::abs(a), std::abs(f));
      report.max_rel_error = std::max(report.max_rel_error, diff / scale);
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace nuseg
