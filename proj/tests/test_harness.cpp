#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "nuseg/error.hpp"
#include "nuseg/harness.hpp"

using namespace nuseg;
namespace fs = std::filesystem;

namespace {

// smallest feasible geometry so folds train in well under a second
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

TrainSchedule quick_schedule() {
  TrainSchedule s;
  s.initial_lr = 1e-3;
  s.max_epochs = 3;
  s.batch_size = 2;
  s.augment = false;
  return s;
}

ExperimentConfig quick_config(Protocol protocol) {
  ExperimentConfig cfg;
  cfg.protocol = protocol;
  cfg.loss_kinds = {LossKind::DL, LossKind::RPDL};
  cfg.schedule = quick_schedule();
  cfg.seeds = {1, 2};
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* tag) {
    path = fs::temp_directory_path() /
           (std::string("nuseg_harness_") + tag + "_" +
            std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

FoldResult fake_result(Protocol proto, std::uint64_t seed, int fold,
                       const std::string& held, LossKind loss, double dice,
                       double dice_sd, double rpd, double rpd_sd) {
  FoldResult r;
  r.protocol = proto;
  r.seed = seed;
  r.fold = fold;
  r.held_out_id = held;
  r.loss = loss;
  r.report.dice_mean = dice;
  r.report.dice_std = dice_sd;
  r.report.rpd_mean = rpd;
  r.report.rpd_std = rpd_sd;
  return r;
}

}  // namespace

TEST_CASE("name round trips") {
  CHECK(protocol_from_name("exp1") == Protocol::LeaveOneImageOut);
  CHECK(protocol_from_name("exp2") == Protocol::LeaveOneAnnotatorOut);
  CHECK_THROWS_AS(protocol_from_name("exp3"), ConfigError);
  CHECK(map_side_from_name("test") == MapSide::Test);
  CHECK(map_side_from_name("train") == MapSide::Train);
  CHECK_THROWS_AS(map_side_from_name("both"), ConfigError);
}

TEST_CASE("default seeds are the curated list extended consecutively") {
  CHECK(default_seeds(5) == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
  const auto seven = default_seeds(7);
  REQUIRE(seven.size() == 7);
  for (std::size_t i = 0; i < 5; ++i) CHECK(seven[i] == default_seeds(5)[i]);
  CHECK(seven[5] + 1 == seven[6]);
}

TEST_CASE("fold enumeration covers each entity exactly once") {
  const Corpus c = generate_corpus(tiny_synth(3, 4, 50));
  CHECK(fold_count(c, Protocol::LeaveOneImageOut) == 3);
  CHECK(fold_count(c, Protocol::LeaveOneAnnotatorOut) == 4);
  CHECK(fold_held_out_id(c, Protocol::LeaveOneImageOut, 0) == "img01");
  CHECK(fold_held_out_id(c, Protocol::LeaveOneImageOut, 2) == "img03");
  CHECK(fold_held_out_id(c, Protocol::LeaveOneAnnotatorOut, 3) == "a04");
}

TEST_CASE("experiment 1 training views exclude the held-out image only") {
  const Corpus c = generate_corpus(tiny_synth(3, 3, 51));
  for (int fold = 0; fold < 3; ++fold) {
    const auto items = fold_train_items(c, Protocol::LeaveOneImageOut, fold);
    REQUIRE(items.size() == 2);
    const std::string held = fold_held_out_id(c, Protocol::LeaveOneImageOut, fold);
    for (const auto& item : items) {
      CHECK(item.annotations.image_id != held);
      CHECK(item.annotations.size() == 3);  // all annotators stay
    }
  }
}

TEST_CASE("experiment 2 training views drop one annotator everywhere") {
  const Corpus c = generate_corpus(tiny_synth(2, 4, 52));
  for (int fold = 0; fold < 4; ++fold) {
    const auto items = fold_train_items(c, Protocol::LeaveOneAnnotatorOut, fold);
    REQUIRE(items.size() == 2);  // every image remains
    const std::string held =
        fold_held_out_id(c, Protocol::LeaveOneAnnotatorOut, fold);
    for (const auto& item : items) {
      CHECK(item.annotations.size() == 3);
      for (const auto& id : item.annotations.annotator_ids) {
        CHECK(id != held);
      }
    }
  }
}

TEST_CASE("canary: mutating held-out data leaves the training history alone") {
  Corpus c = generate_corpus(tiny_synth(3, 3, 53));
  ExperimentConfig cfg = quick_config(Protocol::LeaveOneImageOut);
  cfg.seeds = {1};

  std::vector<EpochRecord> before, after;
  run_single_fold(c, cfg, 1, 0, LossKind::DL, &before);

  // vandalize the held-out image (fold 0 holds out img01)
  for (double& v : c.images[0].intensity.values) v += 100.0;
  for (auto& m : c.images[0].annotations.masks) {
    for (auto& b : m.values) b = 1 - b;
  }
  run_single_fold(c, cfg, 1, 0, LossKind::DL, &after);

  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(before[i].train_loss == after[i].train_loss);
    CHECK(before[i].val_loss == after[i].val_loss);
  }
}

TEST_CASE("run_experiment returns cells in (fold, loss, seed) order") {
  const Corpus c = generate_corpus(tiny_synth(2, 3, 54));
  const ExperimentConfig cfg = quick_config(Protocol::LeaveOneImageOut);
  const auto results = run_experiment(c, cfg);
  REQUIRE(results.size() == 2 * 2 * 2);

  std::size_t i = 0;
  for (int fold = 0; fold < 2; ++fold) {
    for (LossKind loss : {LossKind::DL, LossKind::RPDL}) {
      for (std::uint64_t seed : {1ULL, 2ULL}) {
        CHECK(results[i].fold == fold);
        CHECK(results[i].loss == loss);
        CHECK(results[i].seed == seed);
        CHECK(results[i].held_out_id ==
              fold_held_out_id(c, cfg.protocol, fold));
        CHECK_FALSE(results[i].baseline.has_value());
        CHECK(results[i].report.per_reference.size() == 3);
        ++i;
      }
    }
  }
}

TEST_CASE("parallel jobs reproduce the sequential results") {
  const Corpus c = generate_corpus(tiny_synth(2, 3, 55));
  ExperimentConfig cfg = quick_config(Protocol::LeaveOneImageOut);
  cfg.seeds = {1};
  const auto seq = run_experiment(c, cfg);
  cfg.jobs = 2;
  const auto par = run_experiment(c, cfg);
  REQUIRE(seq.size() == par.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    CHECK(seq[i].fold == par[i].fold);
    CHECK(seq[i].loss == par[i].loss);
    CHECK(seq[i].report.dice_mean == par[i].report.dice_mean);
    CHECK(seq[i].report.rpd_mean == par[i].report.rpd_mean);
  }
}

TEST_CASE("experiment 2 reports model and baseline against training annotators") {
  const Corpus c = generate_corpus(tiny_synth(2, 3, 56));
  ExperimentConfig cfg = quick_config(Protocol::LeaveOneAnnotatorOut);
  cfg.seeds = {1};
  cfg.loss_kinds = {LossKind::DL};
  const auto results = run_experiment(c, cfg);
  REQUIRE(results.size() == 3);
  for (const auto& r : results) {
    REQUIRE(r.baseline.has_value());
    // 2 images x 2 training annotators
    CHECK(r.report.per_reference.size() == 4);
    CHECK(r.baseline->per_reference.size() == 4);
    // entries are tagged image/annotator and never name the held-out one
    for (const auto& e : r.report.per_reference) {
      CHECK(e.annotator_id.find('/') != std::string::npos);
      CHECK(e.annotator_id.find(r.held_out_id) == std::string::npos);
    }
  }
}

TEST_CASE("a twin annotator scores baseline dice 1 when held out") {
  Corpus c = generate_corpus(tiny_synth(2, 3, 57));
  // make a03 an exact copy of a01
  for (auto& img : c.images) {
    img.annotations.masks[2] = img.annotations.masks[0];
  }
  c.validate();

  ExperimentConfig cfg = quick_config(Protocol::LeaveOneAnnotatorOut);
  cfg.seeds = {1};
  cfg.loss_kinds = {LossKind::DL};
  const FoldResult fold = run_single_fold(c, cfg, 1, 2, LossKind::DL);
  REQUIRE(fold.held_out_id == "a03");
  REQUIRE(fold.baseline.has_value());
  int twin_entries = 0;
  for (const auto& e : fold.baseline->per_reference) {
    if (e.annotator_id.find("/a01") != std::string::npos) {
      CHECK(e.dice == 1.0);
      ++twin_entries;
    }
  }
  CHECK(twin_entries == 2);  // one per image
}

TEST_CASE("summarize averages seeds within folds, then folds overall") {
  ExperimentConfig cfg;
  cfg.protocol = Protocol::LeaveOneImageOut;
  cfg.loss_kinds = {LossKind::DL};
  cfg.seeds = {1, 2};
  const Protocol P = cfg.protocol;

  std::vector<FoldResult> results;
  results.push_back(fake_result(P, 1, 0, "img01", LossKind::DL, 0.6, 0.1, 0.5, 0.05));
  results.push_back(fake_result(P, 2, 0, "img01", LossKind::DL, 0.8, 0.2, 0.7, 0.15));
  results.push_back(fake_result(P, 1, 1, "img02", LossKind::DL, 0.4, 0.0, 0.3, 0.0));
  results.push_back(fake_result(P, 2, 1, "img02", LossKind::DL, 0.6, 0.1, 0.5, 0.1));

  const Summary s = summarize(results, cfg);
  REQUIRE(s.fold_ids == std::vector<std::string>{"img01", "img02"});
  REQUIRE(s.dice.size() == 2);
  CHECK(s.dice[0][0].mean == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(s.dice[0][0].stddev == doctest::Approx(0.15).epsilon(1e-15));
  CHECK(s.dice[1][0].mean == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.overall_dice[0].mean == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(s.overall_dice[0].stddev == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(s.rpd[0][0].mean == doctest::Approx(0.6).epsilon(1e-15));

  REQUIRE(s.per_seed_dice.size() == 2);
  CHECK(s.per_seed_dice[0][0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.per_seed_dice[1][0] == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("single cell summaries collapse to that cell") {
  ExperimentConfig cfg;
  cfg.loss_kinds = {LossKind::RPDL};
  cfg.seeds = {9};
  std::vector<FoldResult> results = {fake_result(
      cfg.protocol, 9, 0, "img01", LossKind::RPDL, 0.55, 0.07, 0.45, 0.06)};
  const Summary s = summarize(results, cfg);
  CHECK(s.overall_dice[0].mean == 0.55);
  CHECK(s.overall_dice[0].stddev == 0.07);
  CHECK(s.overall_rpd[0].mean == 0.45);
}

TEST_CASE("summarize rejects incomplete result grids") {
  ExperimentConfig cfg;
  cfg.loss_kinds = {LossKind::DL};
  cfg.seeds = {1, 2};
  std::vector<FoldResult> results = {
      fake_result(cfg.protocol, 1, 0, "img01", LossKind::DL, 0.6, 0.1, 0.5, 0.1)};
  CHECK_THROWS_AS(summarize(results, cfg), ConfigError);
}

TEST_CASE("text tables keep the wcel, dl, rpdl column order") {
  ExperimentConfig cfg;
  cfg.loss_kinds = {LossKind::WCEL, LossKind::DL, LossKind::RPDL};
  cfg.seeds = {1};
  std::vector<FoldResult> results;
  for (LossKind k : cfg.loss_kinds) {
    results.push_back(
        fake_result(cfg.protocol, 1, 0, "img01", k, 0.5, 0.1, 0.4, 0.1));
  }
  const Summary s = summarize(results, cfg);
  const std::string text = render_text_tables(s);
  const auto w = text.find("WCEL");
  const auto d = text.find(" DL");
  const auto r = text.find("RPDL");
  REQUIRE(w != std::string::npos);
  REQUIRE(d != std::string::npos);
  REQUIRE(r != std::string::npos);
  CHECK(w < d);
  CHECK(d < r);
  CHECK(text.find("Overall") != std::string::npos);
}

TEST_CASE("experiment outputs are byte reproducible") {
  const Corpus c = generate_corpus(tiny_synth(2, 3, 58));
  ExperimentConfig cfg = quick_config(Protocol::LeaveOneImageOut);
  cfg.seeds = {1};

  TempDir da("a"), db("b");
  const auto ra = run_experiment(c, cfg);
  write_experiment_outputs(ra, summarize(ra, cfg), da.path);
  const auto rb = run_experiment(c, cfg);
  write_experiment_outputs(rb, summarize(rb, cfg), db.path);

  for (const char* name : {"raw.csv", "summary_dice.csv", "summary_rpd.csv",
                           "per_seed.csv", "summary.txt"}) {
    REQUIRE(fs::exists(da.path / name));
    CHECK(slurp(da.path / name) == slurp(db.path / name));
  }
  CHECK(fs::exists(da.path / "timings.txt"));

  // raw.csv carries one line per (fold, loss, seed) plus a header
  std::stringstream raw(slurp(da.path / "raw.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(raw, line)) {
    if (!line.empty()) ++lines;
  }
  CHECK(lines == 1 + 2 * 2);
}

TEST_CASE("experiment preconditions are enforced") {
  const Corpus one_image = generate_corpus(tiny_synth(1, 3, 59));
  ExperimentConfig cfg = quick_config(Protocol::LeaveOneImageOut);
  CHECK_THROWS_AS(run_experiment(one_image, cfg), ConfigError);

  const Corpus two_annot = generate_corpus(tiny_synth(2, 2, 60));
  cfg = quick_config(Protocol::LeaveOneAnnotatorOut);
  CHECK_THROWS_AS(run_experiment(two_annot, cfg), ConfigError);

  cfg = quick_config(Protocol::LeaveOneImageOut);
  cfg.loss_kinds.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_config(Protocol::LeaveOneImageOut);
  cfg.seeds.clear();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
