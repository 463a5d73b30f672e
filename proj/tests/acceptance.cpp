// Acceptance gate: one pass/fail line per criterion, exit 0 iff all pass.
// argv[1] (optional) is the path to the nuseg CLI binary; when given,
// the reproducibility criterion shells out to the real executable.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "nuseg/data.hpp"
#include "nuseg/error.hpp"
#include "nuseg/harness.hpp"
#include "nuseg/io.hpp"
#include "nuseg/loss.hpp"
#include "nuseg/metrics.hpp"
#include "nuseg/model.hpp"
#include "nuseg/rng.hpp"
#include "nuseg/rpmap.hpp"

using namespace nuseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Gate {
  int failures = 0;

  void report(int index, bool ok, const std::string& what,
              const std::string& detail) {
    std::printf("[%s] criterion %2d: %s (%s)\n", ok ? "PASS" : "FAIL", index,
                what.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }
};

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// The desk-scale schedule used for the cross-validation criteria. Twenty
// epochs at batch 2 is the shortest schedule found where the RPDL-vs-DL
// ordering is stable across seeds; the full study runs ~2.3 h on one
// laptop core, slightly over the 2 h runtime target, trading time for a
// reproducible ordering.
TrainSchedule desk_schedule() {
  TrainSchedule s;
  s.initial_lr = 1e-3;
  s.plateau_factor = 0.1;
  s.plateau_patience = 4;
  s.early_stop_patience = 9;
  s.max_epochs = 20;
  s.batch_size = 2;
  s.validation_fraction = 0.1;
  s.dropout_rate = 0.0;
  s.augment = true;
  return s;
}

AnnotationSet random_annotations(GridShape s, int annotators, Rng& rng) {
  std::vector<BinaryMask> masks;
  std::vector<std::string> ids;
  for (int e = 0; e < annotators; ++e) {
    BinaryMask m(s);
    for (auto& b : m.values) b = rng.uniform01() < 0.5 ? 1 : 0;
    masks.push_back(std::move(m));
    ids.push_back("a" + std::to_string(e));
  }
  masks[0].values[rng.uniform_index(s.voxels())] = 1;
  return AnnotationSet("i", std::move(masks), std::move(ids));
}

SynthConfig tiny_synth(int images, int annotators, std::uint64_t seed) {
  SynthConfig cfg;
  cfg.shape = GridShape(16, 16, 16);
  cfg.num_images = images;
  cfg.num_annotators = annotators;
  cfg.core_radius_min = 2;
  cfg.core_radius_max = 3;
  cfg.fringe_width_min = 1;
  cfg.fringe_width_max = 1;
  cfg.forbidden_margin = 1;
  cfg.rng_seed = seed;
  return cfg;
}

// ---------------------------------------------------------------------------
// 1. analytic gradients vs central finite differences, all three losses

void criterion1(Gate& gate) {
  const auto t0 = Clock::now();
  bool ok = true;
  double worst = 0.0;
  for (LossKind kind : {LossKind::WCEL, LossKind::DL, LossKind::RPDL}) {
    const GradcheckReport rep = loss_gradcheck(kind, 100, 1e-3, 20240000 +
                                               static_cast<int>(kind));
    ok = ok && rep.passed;
    worst = std::max(worst, rep.max_rel_error);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 30.0;
  gate.report(1, ok, "loss gradients match finite differences",
              "3x100 instances, max rel err " + fmt("%.2e", worst) + ", " +
                  fmt("%.1f", secs) + "s");
}

// ---------------------------------------------------------------------------
// 2. RPDL with M == 1 collapses to DL: values, gradients, whole trajectory

void criterion2(Gate& gate) {
  Rng rng(424242);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const GridShape s(1 + static_cast<std::uint32_t>(rng.uniform_index(6)),
                      1 + static_cast<std::uint32_t>(rng.uniform_index(6)),
                      1 + static_cast<std::uint32_t>(rng.uniform_index(6)));
    BinaryMask y(s);
    VoxelGrid p(s);
    for (auto& b : y.values) b = rng.uniform01() < 0.5 ? 1 : 0;
    for (auto& v : p.values) v = rng.uniform(0.01, 0.99);
    const RewardPenaltyMap ones = unit_map(s);
    const LossGradPair r = rpdl(y, p, ones, LossConfig{});
    const LossGradPair d = dice_loss(y, p, LossConfig{});
    worst = std::max(worst, std::fabs(r.value - d.value));
    for (std::size_t i = 0; i < r.gradient.values.size(); ++i) {
      worst = std::max(worst,
                       std::fabs(r.gradient.values[i] - d.gradient.values[i]));
    }
  }
  const bool values_ok = worst <= 1e-12;

  // forced unit maps: the full RPDL training trajectory matches DL's
  const Corpus corpus = generate_corpus(tiny_synth(3, 3, 71));
  std::vector<TrainItem> items;
  std::vector<RewardPenaltyMap> ones;
  for (const auto& img : corpus.images) {
    items.push_back({img.intensity, img.annotations});
    ones.push_back(unit_map(img.intensity.shape));
  }
  TrainSchedule sched;
  sched.initial_lr = 1e-3;
  sched.max_epochs = 10;
  sched.rng_seed = 72;
  TinySegNetF dl_net, rp_net;
  dl_net.init_params(73);
  rp_net.init_params(73);
  const auto rd = train(dl_net, items, LossKind::DL, sched);
  const auto rr = train(rp_net, items, LossKind::RPDL, sched, nullptr, &ones);
  bool traj_ok = rd.history.size() == rr.history.size() &&
                 rd.best_params == rr.best_params;
  for (std::size_t i = 0; traj_ok && i < rd.history.size(); ++i) {
    traj_ok = rd.history[i].train_loss == rr.history[i].train_loss &&
              rd.history[i].val_loss == rr.history[i].val_loss;
  }

  gate.report(2, values_ok && traj_ok, "unit-map RPDL reduces to DL",
              "1000 instances, max |diff| " + fmt("%.2e", worst) +
                  (traj_ok ? ", trajectory bit-identical"
                           : ", trajectory DIVERGED"));
}

// ---------------------------------------------------------------------------
// 3. RPMap construction: worked example, order invariance, equivariance

void criterion3(Gate& gate) {
  const GridShape q(1, 2, 2);
  const AnnotationSet worked(
      "img01",
      {BinaryMask(q, std::vector<std::uint8_t>{1, 1, 1, 0}),
       BinaryMask(q, std::vector<std::uint8_t>{1, 1, 0, 0}),
       BinaryMask(q, std::vector<std::uint8_t>{1, 0, 0, 0})},
      {"a01", "a02", "a03"});
  const RewardPenaltyMap m = build_rpmap(worked);
  bool ok = m.values.size() == 4 && m.values[0] == 1.0 &&
            m.values[1] == 2.0 / 3.0 && m.values[2] == 1.0 / 3.0 &&
            m.values[3] == -1.0;

  Rng rng(4242);
  const auto ops = AugmentOp::all();
  for (int trial = 0; ok && trial < 100; ++trial) {
    const AnnotationSet set = random_annotations(GridShape(2, 3, 4), 4, rng);
    const RewardPenaltyMap base = build_rpmap(set);

    // order invariance
    std::vector<std::size_t> order = {0, 1, 2, 3};
    rng.shuffle(order);
    std::vector<BinaryMask> masks;
    std::vector<std::string> ids;
    for (std::size_t i : order) {
      masks.push_back(set.masks[i]);
      ids.push_back(set.annotator_ids[i]);
    }
    ok = ok && build_rpmap(AnnotationSet("i", masks, ids)).values == base.values;

    // augmentation equivariance
    const AugmentOp t = ops[rng.uniform_index(ops.size())];
    std::vector<BinaryMask> tm;
    for (const auto& mm : set.masks) tm.push_back(augment(mm, t));
    ok = ok &&
         build_rpmap(AnnotationSet("i", tm, set.annotator_ids)).values ==
             augment(base, t).values;

    // range and exact penalty placement
    const VoxelGrid counts = count_map(set);
    for (std::size_t i = 0; ok && i < base.values.size(); ++i) {
      ok = base.values[i] >= -1.0 && base.values[i] <= 1.0 &&
           (counts.values[i] == 0.0 ? base.values[i] == -1.0
                                    : base.values[i] > 0.0);
    }
  }
  gate.report(3, ok, "rpmap worked example, order invariance, equivariance",
              "2x2 fixture exact, 100 random annotation sets");
}

// ---------------------------------------------------------------------------
// 4. penalty voxels: loss strictly increases, gradient strictly positive

void criterion4(Gate& gate) {
  const double eps = LossConfig{}.epsilon;
  const GridShape s(1, 1, 4);
  const BinaryMask y(s, std::vector<std::uint8_t>{1, 1, 0, 0});
  const RewardPenaltyMap m = RewardPenaltyMap::from_grid(
      VoxelGrid(s, std::vector<double>{1.0, 0.5, -1.0, -1.0}));

  const auto hit =
      rpdl(y, VoxelGrid(s, std::vector<double>{1, 0, 0, 1}), m, LossConfig{});
  const auto clean =
      rpdl(y, VoxelGrid(s, std::vector<double>{1, 0, 0, 0}), m, LossConfig{});
  const double hit_expected = 1.0 - (2.0 + eps) / (3.5 + eps);    // ~0.4286
  const double clean_expected = 1.0 - (2.0 + eps) / (2.5 + eps);  // ~0.2

  const bool ok = std::fabs(hit.value - hit_expected) < 1e-9 &&
                  std::fabs(clean.value - clean_expected) < 1e-9 &&
                  clean.value < hit.value && hit.gradient.values[3] > 0.0 &&
                  clean.gradient.values[3] > 0.0;
  gate.report(4, ok, "penalty mass raises RPDL with positive gradient",
              fmt("%.4f", clean.value) + " -> " + fmt("%.4f", hit.value) +
                  ", d/dp at penalty voxel " +
                  fmt("%.3f", hit.gradient.values[3]));
}

// ---------------------------------------------------------------------------
// 5. metric reductions

void criterion5(Gate& gate) {
  Rng rng(52525);
  bool ok = true;
  const GridShape s(4, 4, 4);
  const RewardPenaltyMap ones = unit_map(s);
  for (int trial = 0; ok && trial < 1000; ++trial) {
    BinaryMask a(s), b(s);
    for (auto& v : a.values) v = rng.uniform01() < 0.35 ? 1 : 0;
    for (auto& v : b.values) v = rng.uniform01() < 0.35 ? 1 : 0;
    a.values[trial % a.values.size()] = 1;
    ok = rpd_coefficient(a, b, ones) == dice_coefficient(a, b);
  }
  BinaryMask left(s), right(s);
  left.values[0] = left.values[1] = 1;
  right.values[2] = right.values[3] = 1;
  ok = ok && dice_coefficient(left, left) == 1.0 &&
       dice_coefficient(left, right) == 0.0;
  gate.report(5, ok, "unit-map RPD equals Dice; identity/disjoint anchors",
              "1000 random mask pairs, exact equality");
}

// ---------------------------------------------------------------------------
// 6. end-to-end parameter gradients through each loss

void criterion6(Gate& gate) {
  const auto t0 = Clock::now();
  const GridShape s(8, 8, 8);
  Rng rng(62626);
  VoxelGrid x(s);
  for (auto& v : x.values) v = rng.normal();
  BinaryMask y(s);
  for (auto& b : y.values) b = rng.uniform01() < 0.3 ? 1 : 0;
  y.values[100] = 1;
  BinaryMask y2(s);
  for (auto& b : y2.values) b = rng.uniform01() < 0.3 ? 1 : 0;
  const RewardPenaltyMap map =
      build_rpmap(AnnotationSet("i", {y, y2}, {"a01", "a02"}));
  const LossConfig cfg;
  const double h = 1e-5;

  bool ok = true;
  double worst = 0.0;
  for (LossKind kind : {LossKind::WCEL, LossKind::DL, LossKind::RPDL}) {
    TinySegNet net;
    net.init_params(63);
    const RewardPenaltyMap* m = kind == LossKind::RPDL ? &map : nullptr;
    TinySegNet::Trace trace;
    net.forward_trace(x, trace);
    const LossGradPair lg =
        loss_value_grad(kind, y, VoxelGrid(s, trace.prob), m, cfg);
    const std::vector<double> analytic = net.backward(trace, lg.gradient);
    for (std::size_t j = 0; j < net.param_count(); ++j) {
      const double orig = net.params()[j];
      net.params()[j] = orig + h;
      const double plus = loss_value(kind, y, net.forward(x), m, cfg);
      net.params()[j] = orig - h;
      const double minus = loss_value(kind, y, net.forward(x), m, cfg);
      net.params()[j] = orig;
      const double fd = (plus - minus) / (2.0 * h);
      const double scale =
          std::max(std::max(std::fabs(analytic[j]), std::fabs(fd)), 1e-8);
      worst = std::max(worst, std::fabs(analytic[j] - fd) / scale);
    }
    ok = ok && worst < 1e-3;
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 300.0;
  gate.report(6, ok, "backprop matches finite differences for every parameter",
              "3 losses x 1969 params on 8x8x8, max rel err " +
                  fmt("%.2e", worst) + ", " + fmt("%.1f", secs) + "s");
}

// ---------------------------------------------------------------------------
// 7. schedule conformance on synthetic traces

void criterion7(Gate& gate) {
  bool ok = true;

  // flat trace: one decay of x0.1 after 10 stagnant epochs, stop at 20
  ScheduleController flat(1e-4, 0.1, 10, 20);
  flat.observe(1.0);
  int decays = 0, steps = 0;
  bool stopped = false;
  while (!stopped && steps < 100) {
    const auto d = flat.observe(1.0);
    ++steps;
    if (d.decayed) ++decays;
    stopped = d.stop;
  }
  ok = ok && stopped && steps == 20 && decays == 1 &&
       std::fabs(flat.lr() - 1e-5) < 1e-17;

  // improving trace: no decay, no stop
  ScheduleController improving(1e-4, 0.1, 10, 20);
  for (int i = 0; i < 50; ++i) {
    const auto d = improving.observe(1.0 - 0.01 * i);
    ok = ok && d.improved && !d.decayed && !d.stop;
  }
  ok = ok && improving.lr() == 1e-4;

  // recovery within patience resets the stagnation clock
  ScheduleController recover(1e-4, 0.1, 10, 20);
  recover.observe(1.0);
  for (int i = 0; i < 9; ++i) ok = ok && !recover.observe(1.0).decayed;
  ok = ok && recover.observe(0.5).improved;
  for (int i = 0; i < 9; ++i) ok = ok && !recover.observe(0.5).decayed;
  ok = ok && recover.lr() == 1e-4;

  gate.report(7, ok, "plateau decay x0.1 after 10, early stop at 20",
              "synthetic flat/improving/recovering traces");
}

// ---------------------------------------------------------------------------
// 8. Experiment 1 directional reproduction on the default corpus

void criterion8(Gate& gate) {
  const auto t0 = Clock::now();
  const Corpus corpus = generate_corpus(SynthConfig{});  // 9 x 7 x 32^3
  ExperimentConfig cfg;
  cfg.protocol = Protocol::LeaveOneImageOut;
  cfg.loss_kinds = {LossKind::WCEL, LossKind::DL, LossKind::RPDL};
  cfg.schedule = desk_schedule();
  cfg.seeds = default_seeds(5);

  const auto results = run_experiment(corpus, cfg);
  const Summary s = summarize(results, cfg);
  const double wcel = s.overall_dice[0].mean;
  const double dl = s.overall_dice[1].mean;
  const double rpdl_mean = s.overall_dice[2].mean;

  int rpdl_wins = 0;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    if (s.per_seed_dice[i][2] > s.per_seed_dice[i][1]) ++rpdl_wins;
  }
  const double secs = seconds_since(t0);
  const bool ok = rpdl_mean >= dl && dl >= wcel && rpdl_wins >= 3;
  gate.report(8, ok, "exp1: mean Dice RPDL >= DL >= WCEL over 5 seeds",
              "WCEL " + fmt("%.3f", wcel) + ", DL " + fmt("%.3f", dl) +
                  ", RPDL " + fmt("%.3f", rpdl_mean) + ", RPDL>DL in " +
                  std::to_string(rpdl_wins) + "/5 seeds, " +
                  fmt("%.0f", secs) + "s");
}

// ---------------------------------------------------------------------------
// 9. Experiment 2 baseline logic

void criterion9(Gate& gate) {
  // twin-annotator fixture: held-out copy scores baseline dice 1
  Corpus twin = generate_corpus(tiny_synth(2, 3, 91));
  for (auto& img : twin.images) {
    img.annotations.masks[2] = img.annotations.masks[0];
  }
  ExperimentConfig tiny_cfg;
  tiny_cfg.protocol = Protocol::LeaveOneAnnotatorOut;
  tiny_cfg.loss_kinds = {LossKind::DL};
  tiny_cfg.schedule = desk_schedule();
  tiny_cfg.schedule.max_epochs = 2;
  tiny_cfg.seeds = {1};
  const FoldResult twin_fold = run_single_fold(twin, tiny_cfg, 1, 2, LossKind::DL);
  bool twin_ok = twin_fold.baseline.has_value();
  if (twin_ok) {
    int hits = 0;
    for (const auto& e : twin_fold.baseline->per_reference) {
      if (e.annotator_id.find("/a01") != std::string::npos) {
        twin_ok = twin_ok && e.dice == 1.0;
        ++hits;
      }
    }
    twin_ok = twin_ok && hits == 2;
  }

  // default corpus: DL and RPDL beat the human baseline, WCEL falls below,
  // in the majority of folds
  const Corpus corpus = generate_corpus(SynthConfig{});
  ExperimentConfig cfg;
  cfg.protocol = Protocol::LeaveOneAnnotatorOut;
  cfg.loss_kinds = {LossKind::WCEL, LossKind::DL, LossKind::RPDL};
  cfg.schedule = desk_schedule();
  cfg.seeds = {1};
  const auto results = run_experiment(corpus, cfg);
  const Summary s = summarize(results, cfg);

  const int folds = static_cast<int>(s.fold_ids.size());
  int wcel_below = 0, dl_above = 0, rpdl_above = 0;
  for (int f = 0; f < folds; ++f) {
    const double base = s.baseline_dice[static_cast<std::size_t>(f)].mean;
    if (s.dice[static_cast<std::size_t>(f)][0].mean < base) ++wcel_below;
    if (s.dice[static_cast<std::size_t>(f)][1].mean > base) ++dl_above;
    if (s.dice[static_cast<std::size_t>(f)][2].mean > base) ++rpdl_above;
  }
  const bool majority_ok = 2 * wcel_below > folds && 2 * dl_above > folds &&
                           2 * rpdl_above > folds;
  gate.report(9, twin_ok && majority_ok,
              "exp2: twin baseline = 1; DL/RPDL above, WCEL below baseline",
              "twin " + std::string(twin_ok ? "exact" : "BROKEN") +
                  "; folds above/below: DL " + std::to_string(dl_above) +
                  "/" + std::to_string(folds) + ", RPDL " +
                  std::to_string(rpdl_above) + "/" + std::to_string(folds) +
                  ", WCEL below " + std::to_string(wcel_below) + "/" +
                  std::to_string(folds));
}

// ---------------------------------------------------------------------------
// 10. byte-identical cross-validation outputs

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void criterion10(Gate& gate, const char* cli_path) {
  const fs::path root =
      fs::temp_directory_path() / ("nuseg_accept_" + std::to_string(::getpid()));
  fs::create_directories(root);
  bool ok = true;
  std::string mode;

  const std::vector<std::string> csvs = {"raw.csv", "summary_dice.csv",
                                         "summary_rpd.csv", "per_seed.csv"};
  if (cli_path) {
    mode = "via the CLI";
    const std::string corpus_dir = (root / "corpus").string();
    const std::string cmd_gen = std::string(cli_path) +
                                " generate --out " + corpus_dir +
                                " --images 2 --annotators 3 --shape 16"
                                " --core-min 2 --core-max 3 --fringe-min 1"
                                " --fringe-max 1 --margin 1 --seed 5 > /dev/null";
    ok = ok && std::system(cmd_gen.c_str()) == 0;
    for (const char* run : {"r1", "r2"}) {
      const std::string cmd = std::string(cli_path) +
                              " xval --protocol exp1 --corpus " + corpus_dir +
                              " --out " + (root / run).string() +
                              " --losses dl,rpdl --seed-list 1"
                              " --epochs 3 --lr 1e-3 --no-augment > /dev/null";
      ok = ok && std::system(cmd.c_str()) == 0;
    }
  } else {
    mode = "library-level (no CLI path given)";
    const Corpus corpus = generate_corpus(tiny_synth(2, 3, 5));
    ExperimentConfig cfg;
    cfg.loss_kinds = {LossKind::DL, LossKind::RPDL};
    cfg.schedule = desk_schedule();
    cfg.schedule.max_epochs = 3;
    cfg.schedule.augment = false;
    cfg.seeds = {1};
    for (const char* run : {"r1", "r2"}) {
      const auto results = run_experiment(corpus, cfg);
      write_experiment_outputs(results, summarize(results, cfg), root / run);
    }
  }

  for (const auto& name : csvs) {
    ok = ok && fs::exists(root / "r1" / name) &&
         slurp(root / "r1" / name) == slurp(root / "r2" / name);
  }
  ok = ok && slurp(root / "r1" / "summary.txt") ==
                 slurp(root / "r2" / "summary.txt");
  fs::remove_all(root);
  gate.report(10, ok, "repeated xval runs emit byte-identical tables", mode);
}

}  // namespace

int main(int argc, char** argv) {
  Gate gate;
  criterion1(gate);
  criterion2(gate);
  criterion3(gate);
  criterion4(gate);
  criterion5(gate);
  criterion6(gate);
  criterion7(gate);
  criterion8(gate);
  criterion9(gate);
  criterion10(gate, argc > 1 ? argv[1] : nullptr);

  if (gate.failures == 0) {
    std::printf("acceptance: all 10 criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criterion(s) FAILED\n", gate.failures);
  return 1;
}
