#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nuseg/data.hpp"
#include "nuseg/loss.hpp"
#include "nuseg/metrics.hpp"
#include "nuseg/model.hpp"

namespace nuseg {

/// Experiment 1 holds each image out in turn; Experiment 2 holds each
/// annotator out in turn.
enum class Protocol { LeaveOneImageOut, LeaveOneAnnotatorOut };

/// Which annotations build the RPD evaluation map: the evaluated image's
/// full set (`Test`, default) or only the annotators seen in training
/// (`Train`). The two coincide under Experiment 1, where no annotator is
/// ever held out.
enum class MapSide { Test, Train };

const char* protocol_name(Protocol p);
Protocol protocol_from_name(const std::string& name);
const char* map_side_name(MapSide s);
MapSide map_side_from_name(const std::string& name);

/// The shipped default seed set (verified directional behavior); asking for
/// more than the curated list extends it with consecutive integers.
std::vector<std::uint64_t> default_seeds(std::size_t n);

struct ExperimentConfig {
  Protocol protocol = Protocol::LeaveOneImageOut;
  std::vector<LossKind> loss_kinds{LossKind::WCEL, LossKind::DL, LossKind::RPDL};
  TrainSchedule schedule;
  std::vector<std::uint64_t> seeds = default_seeds(5);
  MapSide rpd_map_side = MapSide::Test;
  int jobs = 1;

  void validate() const;
};

struct FoldResult {
  Protocol protocol = Protocol::LeaveOneImageOut;
  std::uint64_t seed = 0;
  int fold = 0;
  std::string held_out_id;
  LossKind loss = LossKind::DL;
  MetricReport report;                    // model scored against references
  std::optional<MetricReport> baseline;   // inter-annotator level (Experiment 2)
  double wall_seconds = 0.0;
  int best_epoch = -1;
};

int fold_count(const Corpus& corpus, Protocol protocol);
std::string fold_held_out_id(const Corpus& corpus, Protocol protocol, int fold);

/// Fold-scoped training view: deep copies containing no held-out data.
/// Experiment 1 drops the held-out image; Experiment 2 drops the held-out
/// annotator's mask from every image.
std::vector<TrainItem> fold_train_items(const Corpus& corpus, Protocol protocol,
                                        int fold);

/// Train and evaluate one (seed, fold, loss) cell. Model initialization and
/// the training data split depend on (seed, fold) only, so losses compete on
/// identical footing. Pass `history` to capture the epoch log.
FoldResult run_single_fold(const Corpus& corpus, const ExperimentConfig& cfg,
                           std::uint64_t seed, int fold, LossKind loss,
                           std::vector<EpochRecord>* history = nullptr);

/// All (seed, fold, loss) cells, returned in deterministic
/// (fold, loss, seed) order regardless of `cfg.jobs`.
std::vector<FoldResult> run_experiment(const Corpus& corpus,
                                       const ExperimentConfig& cfg);
std::vector<FoldResult> run_experiment1(const Corpus& corpus,
                                        const ExperimentConfig& cfg);
std::vector<FoldResult> run_experiment2(const Corpus& corpus,
                                        const ExperimentConfig& cfg);

/// Aggregated tables. A fold cell averages the per-seed fold means and the
/// per-seed fold stds; the Overall row averages the fold cells, so with one
/// seed and one fold it reproduces that fold's report exactly.
struct Summary {
  Protocol protocol = Protocol::LeaveOneImageOut;
  std::vector<LossKind> losses;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> fold_ids;

  struct Cell {
    double mean = 0.0;
    double stddev = 0.0;
  };
  std::vector<std::vector<Cell>> dice, rpd;  // [fold][loss]
  std::vector<Cell> overall_dice, overall_rpd;  // [loss]
  std::vector<Cell> baseline_dice, baseline_rpd;  // [fold]; empty for Exp 1
  Cell overall_baseline_dice, overall_baseline_rpd;

  std::vector<std::vector<double>> per_seed_dice, per_seed_rpd;  // [seed][loss]
};

Summary summarize(const std::vector<FoldResult>& results,
                  const ExperimentConfig& cfg);

std::string render_text_tables(const Summary& summary);

/// Write raw.csv, summary_dice.csv, summary_rpd.csv, per_seed.csv,
/// summary.txt into `out_dir` (all byte-reproducible for a fixed config),
/// plus wall-clock notes in timings.txt (excluded from that guarantee).
void write_experiment_outputs(const std::vector<FoldResult>& results,
                              const Summary& summary,
                              const std::filesystem::path& out_dir);

}  // namespace nuseg
