#include "nuseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <utility>

#include <json.hpp>

#include "nuseg/error.hpp"
#include "nuseg/io.hpp"

namespace nuseg {

namespace {

// Fixed-order 8-lane reductions: the explicit lanes give the vectorizer a
// reassociation it is allowed to use while keeping results bit-reproducible
// run to run.
template <typename T>
T lane_tree(const T acc[8]) {
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
T lane_sum(const T* a, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j];
  for (; i < n; ++i) acc[i & 7] += a[i];
  return lane_tree(acc);
}

template <typename T>
T lane_dot(const T* a, const T* b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  for (; i < n; ++i) acc[i & 7] += a[i] * b[i];
  return lane_tree(acc);
}

// 3x3x3 same convolution with zero padding, out[co] = b[co] + sum_ci w * in[ci].
// Taps are applied over clamped index ranges so the padded border needs no
// branches in the inner loop. Weight layout: w[co][ci][(dz+1)*9+(dy+1)*3+(dx+1)].
template <typename T>
void conv3_forward(const Tensor4<T>& in, Tensor4<T>& out, const T* w, const T* b) {
  const int D = static_cast<int>(in.shape.d);
  const int H = static_cast<int>(in.shape.h);
  const int W = static_cast<int>(in.shape.w);
  const std::size_t N = in.shape.voxels();
  for (int co = 0; co < out.channels; ++co) {
    T* oc = out.channel(co);
    std::fill(oc, oc + N, b[co]);
    for (int ci = 0; ci < in.channels; ++ci) {
      const T* ic = in.channel(ci);
      const T* wt = w + (static_cast<std::size_t>(co) * in.channels + ci) * 27;
      for (int dz = -1; dz <= 1; ++dz) {
        const int z0 = std::max(0, -dz), z1 = std::min(D, D - dz);
        for (int dy = -1; dy <= 1; ++dy) {
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          for (int dx = -1; dx <= 1; ++dx) {
            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            const T wv = wt[(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)];
            for (int z = z0; z < z1; ++z) {
              for (int y = y0; y < y1; ++y) {
                T* orow = oc + (static_cast<std::size_t>(z) * H + y) * W;
                const T* irow =
                    ic + (static_cast<std::size_t>(z + dz) * H + (y + dy)) * W + dx;
                for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
              }
            }
          }
        }
      }
    }
  }
}

// Gradient wrt the convolution input: din[ci](s + tap) += w * dout[co](s).
template <typename T>
void conv3_backward_input(const Tensor4<T>& dout, Tensor4<T>& din, const T* w,
                          int cin) {
  const int D = static_cast<int>(dout.shape.d);
  const int H = static_cast<int>(dout.shape.h);
  const int W = static_cast<int>(dout.shape.w);
  din.resize(cin, dout.shape);
  for (int co = 0; co < dout.channels; ++co) {
    const T* gc = dout.channel(co);
    for (int ci = 0; ci < cin; ++ci) {
      T* dc = din.channel(ci);
      const T* wt = w + (static_cast<std::size_t>(co) * cin + ci) * 27;
      for (int dz = -1; dz <= 1; ++dz) {
        const int z0 = std::max(0, -dz), z1 = std::min(D, D - dz);
        for (int dy = -1; dy <= 1; ++dy) {
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          for (int dx = -1; dx <= 1; ++dx) {
            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            const T wv = wt[(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)];
            for (int z = z0; z < z1; ++z) {
              for (int y = y0; y < y1; ++y) {
                const T* grow = gc + (static_cast<std::size_t>(z) * H + y) * W;
                T* drow =
                    dc + (static_cast<std::size_t>(z + dz) * H + (y + dy)) * W + dx;
                for (int x = x0; x < x1; ++x) drow[x] += wv * grow[x];
              }
            }
          }
        }
      }
    }
  }
}

// Gradient wrt weights and bias: dw[co][ci][tap] = <dout[co], shifted in[ci]>.
template <typename T>
void conv3_backward_params(const Tensor4<T>& dout, const Tensor4<T>& in, T* dw,
                           T* db) {
  const int D = static_cast<int>(in.shape.d);
  const int H = static_cast<int>(in.shape.h);
  const int W = static_cast<int>(in.shape.w);
  const std::size_t N = in.shape.voxels();
  for (int co = 0; co < dout.channels; ++co) {
    const T* gc = dout.channel(co);
    db[co] += lane_sum(gc, N);
    for (int ci = 0; ci < in.channels; ++ci) {
      const T* ic = in.channel(ci);
      T* wt = dw + (static_cast<std::size_t>(co) * in.channels + ci) * 27;
      for (int dz = -1; dz <= 1; ++dz) {
        const int z0 = std::max(0, -dz), z1 = std::min(D, D - dz);
        for (int dy = -1; dy <= 1; ++dy) {
          const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
          for (int dx = -1; dx <= 1; ++dx) {
            const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
            T acc[8] = {};
            for (int z = z0; z < z1; ++z) {
              for (int y = y0; y < y1; ++y) {
                const T* grow = gc + (static_cast<std::size_t>(z) * H + y) * W;
                const T* irow =
                    ic + (static_cast<std::size_t>(z + dz) * H + (y + dy)) * W + dx;
                int x = x0;
                for (; x + 8 <= x1; x += 8)
                  for (int j = 0; j < 8; ++j) acc[j] += grow[x + j] * irow[x + j];
                for (; x < x1; ++x) acc[x & 7] += grow[x] * irow[x];
              }
            }
            wt[(dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)] += lane_tree(acc);
          }
        }
      }
    }
  }
}

template <typename T>
T sigmoid_scalar(T u) {
  if (u >= T(0)) {
    const T e = std::exp(-u);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(u);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainSchedule / ScheduleController

void TrainSchedule::validate() const {
  if (!(initial_lr > 0.0) || !std::isfinite(initial_lr))
    throw ConfigError("schedule: initial_lr must be positive and finite");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
    throw ConfigError("schedule: plateau_factor must lie in (0, 1)");
  if (plateau_patience < 1 || early_stop_patience < 1)
    throw ConfigError("schedule: patience values must be >= 1");
  if (max_epochs < 0) throw ConfigError("schedule: max_epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("schedule: batch_size must be >= 1");
  if (!(validation_fraction > 0.0 && validation_fraction < 0.5))
    throw ConfigError("schedule: validation_fraction must lie in (0, 0.5)");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw ConfigError("schedule: dropout_rate must lie in [0, 1)");
}

ScheduleController::ScheduleController(double initial_lr, double plateau_factor,
                                       int plateau_patience, int early_stop_patience)
    : lr_(initial_lr),
      factor_(plateau_factor),
      plateau_patience_(plateau_patience),
      early_stop_patience_(early_stop_patience) {
  if (!(initial_lr > 0.0)) throw ConfigError("controller: initial_lr must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
    throw ConfigError("controller: plateau_factor must lie in (0, 1)");
  if (plateau_patience < 1 || early_stop_patience < 1)
    throw ConfigError("controller: patience values must be >= 1");
}

ScheduleController::Decision ScheduleController::observe(double val_loss) {
  Decision d;
  if (val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch_;
    stagnant_ = 0;
    d.improved = true;
  } else {
    ++stagnant_;
    if (stagnant_ >= early_stop_patience_) {
      d.stop = true;
    } else if (stagnant_ % plateau_patience_ == 0) {
      lr_ *= factor_;
      d.decayed = true;
    }
  }
  ++epoch_;
  d.lr = lr_;
  return d;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void adam_step(std::vector<T>& params, const std::vector<T>& grads,
               AdamState<T>& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw DimensionError("adam_step: parameter/gradient/state size mismatch");
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  state.step += 1;
  const T bc1 = T(1.0 - std::pow(kBeta1, static_cast<double>(state.step)));
  const T bc2 = T(1.0 - std::pow(kBeta2, static_cast<double>(state.step)));
  const T b1 = T(kBeta1), b2 = T(kBeta2), lrT = T(lr), eps = T(kEps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    if (!std::isfinite(g)) throw DomainError("adam_step: non-finite gradient");
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * g * g;
    const T mhat = state.m[i] / bc1;
    const T vhat = state.v[i] / bc2;
    params[i] -= lrT * mhat / (std::sqrt(vhat) + eps);
  }
}

// ---------------------------------------------------------------------------
// TinySegNetT

template <typename T>
TinySegNetT<T>::TinySegNetT(double leaky_slope) : leaky_slope_(leaky_slope) {
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0))
    throw ConfigError("tiny_segnet: leaky_slope must lie in [0, 1)");
  params_.assign(off_b3() + 1, T(0));
}

template <typename T>
void TinySegNetT<T>::init_params(std::uint64_t seed) {
  Rng rng(seed);
  // He-style fan-in scaling; biases start at zero.
  const double s1 = std::sqrt(2.0 / 27.0);
  const double s2 = std::sqrt(2.0 / (27.0 * kHidden));
  const double s3 = std::sqrt(1.0 / kHidden);
  std::fill(params_.begin(), params_.end(), T(0));
  for (std::size_t i = off_w1(); i < off_b1(); ++i) params_[i] = T(s1 * rng.normal());
  for (std::size_t i = off_w2(); i < off_b2(); ++i) params_[i] = T(s2 * rng.normal());
  for (std::size_t i = off_w3(); i < off_b3(); ++i) params_[i] = T(s3 * rng.normal());
}

template <typename T>
void TinySegNetT<T>::forward_trace(const VoxelGrid& x, Trace& trace,
                                   double dropout_rate, Rng* rng) const {
  if (x.shape.voxels() == 0) throw DimensionError("tiny_segnet: empty input");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("tiny_segnet: dropout_rate must lie in [0, 1)");
  if (dropout_rate > 0.0 && rng == nullptr)
    throw ConfigError("tiny_segnet: dropout requires an rng");
  const GridShape s = x.shape;
  const std::size_t N = s.voxels();
  trace.shape = s;

  trace.x.resize(1, s);
  for (std::size_t i = 0; i < N; ++i) trace.x.values[i] = T(x.values[i]);

  const T* w1 = params_.data() + off_w1();
  const T* b1 = params_.data() + off_b1();
  const T* w2 = params_.data() + off_w2();
  const T* b2 = params_.data() + off_b2();
  const T* w3 = params_.data() + off_w3();
  const T b3 = params_[off_b3()];
  const T sl = T(leaky_slope_);

  trace.pre1.resize(kHidden, s);
  conv3_forward(trace.x, trace.pre1, w1, b1);
  trace.act1.resize(kHidden, s);
  {
    const T* p = trace.pre1.values.data();
    T* a = trace.act1.values.data();
    const std::size_t n = trace.pre1.values.size();
    for (std::size_t i = 0; i < n; ++i) a[i] = p[i] > T(0) ? p[i] : sl * p[i];
  }

  const bool drop = dropout_rate > 0.0;
  trace.dropout_scale = drop ? 1.0 / (1.0 - dropout_rate) : 1.0;
  if (drop) {
    const T scale = T(trace.dropout_scale);
    trace.keep1.resize(trace.act1.values.size());
    for (std::size_t i = 0; i < trace.keep1.size(); ++i) {
      const bool keep = rng->uniform01() >= dropout_rate;
      trace.keep1[i] = keep ? 1 : 0;
      trace.act1.values[i] = keep ? trace.act1.values[i] * scale : T(0);
    }
  } else {
    trace.keep1.clear();
  }

  trace.pre2.resize(kHidden, s);
  conv3_forward(trace.act1, trace.pre2, w2, b2);
  trace.act2.resize(kHidden, s);
  {
    const T* p = trace.pre2.values.data();
    T* a = trace.act2.values.data();
    const std::size_t n = trace.pre2.values.size();
    for (std::size_t i = 0; i < n; ++i) a[i] = p[i] > T(0) ? p[i] : sl * p[i];
  }
  if (drop) {
    const T scale = T(trace.dropout_scale);
    trace.keep2.resize(trace.act2.values.size());
    for (std::size_t i = 0; i < trace.keep2.size(); ++i) {
      const bool keep = rng->uniform01() >= dropout_rate;
      trace.keep2[i] = keep ? 1 : 0;
      trace.act2.values[i] = keep ? trace.act2.values[i] * scale : T(0);
    }
  } else {
    trace.keep2.clear();
  }

  // 1x1x1 projection plus sigmoid.
  trace.pre3.resize(1, s);
  T* p3 = trace.pre3.values.data();
  std::fill(p3, p3 + N, b3);
  for (int c = 0; c < kHidden; ++c) {
    const T wv = w3[c];
    const T* a = trace.act2.channel(c);
    for (std::size_t i = 0; i < N; ++i) p3[i] += wv * a[i];
  }
  trace.prob.resize(N);
  for (std::size_t i = 0; i < N; ++i) trace.prob[i] = sigmoid_scalar(p3[i]);
}

template <typename T>
VoxelGrid TinySegNetT<T>::forward(const VoxelGrid& x) const {
  Trace trace;
  forward_trace(x, trace);
  VoxelGrid out(x.shape);
  for (std::size_t i = 0; i < trace.prob.size(); ++i)
    out.values[i] = static_cast<double>(trace.prob[i]);
  return out;
}

template <typename T>
std::vector<T> TinySegNetT<T>::backward(const Trace& trace,
                                        const VoxelGrid& dL_dP) const {
  if (dL_dP.shape != trace.shape)
    throw DimensionError("tiny_segnet: upstream gradient shape mismatch");
  const std::size_t N = trace.shape.voxels();
  std::vector<T> grads(params_.size(), T(0));
  const T sl = T(leaky_slope_);

  // Sigmoid: dpre3 = dL/dP * P * (1 - P).
  Tensor4<T> dpre3;
  dpre3.resize(1, trace.shape);
  for (std::size_t i = 0; i < N; ++i) {
    const T p = trace.prob[i];
    dpre3.values[i] = T(dL_dP.values[i]) * p * (T(1) - p);
  }

  // 1x1x1 projection.
  const T* w3 = params_.data() + off_w3();
  T* dw3 = grads.data() + off_w3();
  grads[off_b3()] = lane_sum(dpre3.values.data(), N);
  Tensor4<T> dact2;
  dact2.resize(kHidden, trace.shape);
  for (int c = 0; c < kHidden; ++c) {
    const T* a = trace.act2.channel(c);
    const T* g = dpre3.values.data();
    dw3[c] = lane_dot(g, a, N);
    T* da = dact2.channel(c);
    const T wv = w3[c];
    for (std::size_t i = 0; i < N; ++i) da[i] = wv * g[i];
  }

  // Dropout and LeakyReLU around conv2.
  if (!trace.keep2.empty()) {
    const T scale = T(trace.dropout_scale);
    for (std::size_t i = 0; i < dact2.values.size(); ++i)
      dact2.values[i] = trace.keep2[i] ? dact2.values[i] * scale : T(0);
  }
  Tensor4<T> dpre2;
  dpre2.resize(kHidden, trace.shape);
  for (std::size_t i = 0; i < dpre2.values.size(); ++i) {
    const T u = trace.pre2.values[i];
    dpre2.values[i] = dact2.values[i] * (u > T(0) ? T(1) : sl);
  }
  conv3_backward_params(dpre2, trace.act1, grads.data() + off_w2(),
                        grads.data() + off_b2());
  Tensor4<T> dact1;
  conv3_backward_input(dpre2, dact1, params_.data() + off_w2(), kHidden);

  // Dropout and LeakyReLU around conv1.
  if (!trace.keep1.empty()) {
    const T scale = T(trace.dropout_scale);
    for (std::size_t i = 0; i < dact1.values.size(); ++i)
      dact1.values[i] = trace.keep1[i] ? dact1.values[i] * scale : T(0);
  }
  Tensor4<T> dpre1;
  dpre1.resize(kHidden, trace.shape);
  for (std::size_t i = 0; i < dpre1.values.size(); ++i) {
    const T u = trace.pre1.values[i];
    dpre1.values[i] = dact1.values[i] * (u > T(0) ? T(1) : sl);
  }
  conv3_backward_params(dpre1, trace.x, grads.data() + off_w1(),
                        grads.data() + off_b1());
  return grads;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

VoxelGrid prob_to_grid(const std::vector<float>& prob, const GridShape& s) {
  VoxelGrid g(s);
  for (std::size_t i = 0; i < prob.size(); ++i)
    g.values[i] = static_cast<double>(prob[i]);
  return g;
}

VoxelGrid prob_to_grid(const std::vector<double>& prob, const GridShape& s) {
  return VoxelGrid(s, prob);
}

}  // namespace

template <typename T>
TrainResultT<T> train(TinySegNetT<T>& net, const std::vector<TrainItem>& dataset,
                      LossKind loss_kind, const TrainSchedule& schedule,
                      const LossConfig* loss_cfg,
                      const std::vector<RewardPenaltyMap>* rpmap_override) {
  schedule.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  const GridShape shape = dataset.front().image.shape;
  for (const auto& item : dataset) {
    item.annotations.validate();
    item.image.check_finite("training image");
    if (item.image.shape != shape)
      throw DimensionError("train: all images must share one shape");
    if (item.annotations.shape() != shape)
      throw DimensionError("train: annotation shape differs from image shape");
  }

  LossConfig cfg = loss_cfg ? *loss_cfg : LossConfig{};
  cfg.validate();
  if (loss_kind == LossKind::WCEL && loss_cfg == nullptr) {
    std::vector<BinaryMask> all_masks;
    for (const auto& item : dataset)
      for (const auto& m : item.annotations.masks) all_masks.push_back(m);
    cfg.wcel_weight = default_wcel_weight(all_masks);
  }

  // Reward-penalty maps come from the training annotations themselves unless
  // the caller injects replacements (index-aligned with the dataset).
  std::vector<RewardPenaltyMap> maps;
  if (loss_kind == LossKind::RPDL) {
    if (rpmap_override) {
      if (rpmap_override->size() != dataset.size())
        throw DimensionError("train: rpmap override count differs from dataset");
      maps = *rpmap_override;
      for (std::size_t i = 0; i < maps.size(); ++i)
        if (maps[i].shape != shape)
          throw DimensionError("train: rpmap override shape mismatch");
    } else {
      maps.reserve(dataset.size());
      for (const auto& item : dataset) maps.push_back(build_rpmap(item.annotations));
    }
  }

  struct Pair {
    int item, annot;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    for (std::size_t a = 0; a < dataset[i].annotations.size(); ++a)
      pairs.push_back({static_cast<int>(i), static_cast<int>(a)});

  Rng rng(schedule.rng_seed);

  // Random validation split; always leave at least one training pair.
  std::vector<int> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  rng.shuffle(order);
  const int total = static_cast<int>(pairs.size());
  int val_count = static_cast<int>(
      std::ceil(schedule.validation_fraction * static_cast<double>(total)));
  val_count = std::min(val_count, total - 1);
  if (val_count < 0) val_count = 0;
  std::vector<int> val_idx(order.begin(), order.begin() + val_count);
  std::vector<int> train_idx(order.begin() + val_count, order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  std::vector<AugmentOp> ops{AugmentOp::identity()};
  if (schedule.augment) {
    ops.clear();
    for (const auto& op : AugmentOp::all())
      if (transformed_shape(shape, op) == shape) ops.push_back(op);
  }

  TrainResultT<T> result;
  result.wcel_weight_used = cfg.wcel_weight;
  result.best_params = net.params();

  ScheduleController ctrl(schedule.initial_lr, schedule.plateau_factor,
                          schedule.plateau_patience, schedule.early_stop_patience);
  AdamState<T> adam(net.param_count());
  typename TinySegNetT<T>::Trace trace;
  std::vector<T> grad_accum(net.param_count());

  for (int epoch = 0; epoch < schedule.max_epochs; ++epoch) {
    const double lr_used = ctrl.lr();
    rng.shuffle(train_idx);
    double train_sum = 0.0;
    for (std::size_t start = 0; start < train_idx.size();
         start += static_cast<std::size_t>(schedule.batch_size)) {
      const std::size_t stop =
          std::min(train_idx.size(), start + static_cast<std::size_t>(schedule.batch_size));
      std::fill(grad_accum.begin(), grad_accum.end(), T(0));
      for (std::size_t k = start; k < stop; ++k) {
        const Pair pr = pairs[static_cast<std::size_t>(train_idx[k])];
        const TrainItem& item = dataset[static_cast<std::size_t>(pr.item)];
        AugmentOp op = AugmentOp::identity();
        if (ops.size() > 1) op = ops[rng.uniform_index(ops.size())];
        const VoxelGrid img = augment(item.image, op);
        const BinaryMask mask =
            augment(item.annotations.masks[static_cast<std::size_t>(pr.annot)], op);
        net.forward_trace(img, trace, schedule.dropout_rate,
                          schedule.dropout_rate > 0.0 ? &rng : nullptr);
        const VoxelGrid prob = prob_to_grid(trace.prob, shape);
        for (double v : prob.values) {
          if (!std::isfinite(v))
            throw TrainingDivergedError("non-finite prediction", epoch);
        }
        LossGradPair lg;
        if (loss_kind == LossKind::RPDL) {
          const RewardPenaltyMap map_a =
              augment(maps[static_cast<std::size_t>(pr.item)], op);
          lg = loss_value_grad(loss_kind, mask, prob, &map_a, cfg);
        } else {
          lg = loss_value_grad(loss_kind, mask, prob, nullptr, cfg);
        }
        if (!std::isfinite(lg.value))
          throw TrainingDivergedError("non-finite training loss", epoch);
        train_sum += lg.value;
        const std::vector<T> pg = net.backward(trace, lg.gradient);
        for (std::size_t j = 0; j < pg.size(); ++j) grad_accum[j] += pg[j];
      }
      const T inv = T(1.0 / static_cast<double>(stop - start));
      for (auto& g : grad_accum) g *= inv;
      adam_step(net.params(), grad_accum, adam, ctrl.lr());
    }
    const double train_loss = train_sum / static_cast<double>(train_idx.size());

    double val_loss;
    if (val_idx.empty()) {
      val_loss = train_loss;
    } else {
      double val_sum = 0.0;
      for (int vi : val_idx) {
        const Pair pr = pairs[static_cast<std::size_t>(vi)];
        const TrainItem& item = dataset[static_cast<std::size_t>(pr.item)];
        net.forward_trace(item.image, trace);
        const VoxelGrid prob = prob_to_grid(trace.prob, shape);
        for (double v : prob.values) {
          if (!std::isfinite(v))
            throw TrainingDivergedError("non-finite prediction", epoch);
        }
        const BinaryMask& mask =
            item.annotations.masks[static_cast<std::size_t>(pr.annot)];
        const RewardPenaltyMap* map =
            loss_kind == LossKind::RPDL ? &maps[static_cast<std::size_t>(pr.item)]
                                        : nullptr;
        val_sum += loss_value(loss_kind, mask, prob, map, cfg);
      }
      val_loss = val_sum / static_cast<double>(val_idx.size());
    }

    if (!std::isfinite(train_loss) || !std::isfinite(val_loss))
      throw TrainingDivergedError("non-finite loss", epoch);

    const auto decision = ctrl.observe(val_loss);
    if (decision.improved) {
      result.best_params = net.params();
      result.best_epoch = epoch;
      result.best_val_loss = val_loss;
    }
    result.history.push_back({epoch, train_loss, val_loss, lr_used});
    if (decision.stop) break;
  }

  net.params() = result.best_params;
  return result;
}

void save_history_csv(const std::filesystem::path& path,
                      const std::vector<EpochRecord>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open history file: " + path.string());
  out << "epoch,train_loss,val_loss,lr\n";
  char buf[160];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss,
                  r.val_loss, r.lr);
    out << buf;
  }
  if (!out) throw FormatError("failed writing history file: " + path.string());
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TinySegNetT<T>& net,
                     const CheckpointInfo& info) {
  const auto& p = net.params();
  VoxelGrid blob(GridShape(static_cast<std::uint32_t>(p.size()), 1, 1));
  for (std::size_t i = 0; i < p.size(); ++i)
    blob.values[i] = static_cast<double>(p[i]);
  save_volume(path, blob, VolumeMeta{"checkpoint", "", "checkpoint"});

  nlohmann::json j;
  j["image_id"] = "checkpoint";
  j["annotator_id"] = "";
  j["kind"] = "checkpoint";
  j["arch"] = {{"name", "tiny_segnet"},
               {"hidden", TinySegNetT<T>::kHidden},
               {"leaky_slope", info.leaky_slope},
               {"param_count", p.size()}};
  j["loss"] = loss_kind_name(info.loss);
  j["wcel_weight"] = info.wcel_weight;
  j["trained_shape"] = {info.trained_shape.d, info.trained_shape.h,
                        info.trained_shape.w};
  j["schedule"] = {{"initial_lr", info.schedule.initial_lr},
                   {"plateau_factor", info.schedule.plateau_factor},
                   {"plateau_patience", info.schedule.plateau_patience},
                   {"early_stop_patience", info.schedule.early_stop_patience},
                   {"max_epochs", info.schedule.max_epochs},
                   {"batch_size", info.schedule.batch_size},
                   {"validation_fraction", info.schedule.validation_fraction},
                   {"dropout_rate", info.schedule.dropout_rate},
                   {"augment", info.schedule.augment},
                   {"rng_seed", info.schedule.rng_seed}};
  std::ofstream out(sidecar_path(path), std::ios::binary);
  if (!out) throw FormatError("cannot open checkpoint manifest for writing");
  out << j.dump(2) << "\n";
  if (!out) throw FormatError("failed writing checkpoint manifest");
}

template <typename T>
CheckpointInfo load_checkpoint(const std::filesystem::path& path,
                               TinySegNetT<T>& net) {
  const VoxelGrid blob = load_volume(path);
  std::ifstream in(sidecar_path(path), std::ios::binary);
  if (!in) throw FormatError("missing checkpoint manifest: " +
                             sidecar_path(path).string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
  }
  if (!j.contains("arch") || j["arch"].value("name", "") != "tiny_segnet")
    throw FormatError("checkpoint manifest does not describe a tiny_segnet");
  const auto& arch = j["arch"];
  if (arch.value("hidden", 0) != TinySegNetT<T>::kHidden)
    throw FormatError("checkpoint hidden width mismatch");

  CheckpointInfo info;
  info.leaky_slope = arch.value("leaky_slope", 0.3);
  net = TinySegNetT<T>(info.leaky_slope);
  if (arch.value("param_count", std::size_t(0)) != net.param_count() ||
      blob.values.size() != net.param_count())
    throw FormatError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < blob.values.size(); ++i)
    net.params()[i] = T(blob.values[i]);

  info.loss = loss_kind_from_name(j.value("loss", "dl"));
  info.wcel_weight = j.value("wcel_weight", 0.0);
  if (j.contains("trained_shape") && j["trained_shape"].is_array() &&
      j["trained_shape"].size() == 3) {
    info.trained_shape = GridShape(j["trained_shape"][0].get<std::uint32_t>(),
                                   j["trained_shape"][1].get<std::uint32_t>(),
                                   j["trained_shape"][2].get<std::uint32_t>());
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    info.schedule.initial_lr = s.value("initial_lr", 1e-4);
    info.schedule.plateau_factor = s.value("plateau_factor", 0.1);
    info.schedule.plateau_patience = s.value("plateau_patience", 10);
    info.schedule.early_stop_patience = s.value("early_stop_patience", 20);
    info.schedule.max_epochs = s.value("max_epochs", 200);
    info.schedule.batch_size = s.value("batch_size", 4);
    info.schedule.validation_fraction = s.value("validation_fraction", 0.1);
    info.schedule.dropout_rate = s.value("dropout_rate", 0.0);
    info.schedule.augment = s.value("augment", true);
    info.schedule.rng_seed = s.value("rng_seed", std::uint64_t(0));
  }
  return info;
}

template class TinySegNetT<float>;
template class TinySegNetT<double>;
template void adam_step<float>(std::vector<float>&, const std::vector<float>&,
                               AdamState<float>&, double);
template void adam_step<double>(std::vector<double>&, const std::vector<double>&,
                                AdamState<double>&, double);
template TrainResultT<float> train<float>(TinySegNetT<float>&,
                                          const std::vector<TrainItem>&, LossKind,
                                          const TrainSchedule&, const LossConfig*,
                                          const std::vector<RewardPenaltyMap>*);
template TrainResultT<double> train<double>(TinySegNetT<double>&,
                                            const std::vector<TrainItem>&, LossKind,
                                            const TrainSchedule&, const LossConfig*,
                                            const std::vector<RewardPenaltyMap>*);
template void save_checkpoint<float>(const std::filesystem::path&,
                                     const TinySegNetT<float>&,
                                     const CheckpointInfo&);
template void save_checkpoint<double>(const std::filesystem::path&,
                                      const TinySegNetT<double>&,
                                      const CheckpointInfo&);
template CheckpointInfo load_checkpoint<float>(const std::filesystem::path&,
                                               TinySegNetT<float>&);
template CheckpointInfo load_checkpoint<double>(const std::filesystem::path&,
                                                TinySegNetT<double>&);

}  // namespace nuseg
