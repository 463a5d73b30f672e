#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nuseg/data.hpp"
#include "nuseg/error.hpp"
#include "nuseg/harness.hpp"
#include "nuseg/io.hpp"
#include "nuseg/loss.hpp"
#include "nuseg/metrics.hpp"
#include "nuseg/model.hpp"
#include "nuseg/rng.hpp"
#include "nuseg/rpmap.hpp"

namespace {

using namespace nuseg;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::vector<LossKind> parse_loss_list(const std::string& csv) {
  std::vector<LossKind> kinds;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) kinds.push_back(loss_kind_from_name(item));
  }
  if (kinds.empty()) throw ConfigError("empty loss list");
  return kinds;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(item, &pos);
    if (pos != item.size()) throw ConfigError("bad seed value: " + item);
    seeds.push_back(v);
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

const CorpusImage& find_image(const Corpus& corpus, const std::string& id) {
  for (const auto& img : corpus.images)
    if (img.image_id == id) return img;
  throw ConfigError("image id not found in corpus: " + id);
}

struct ScheduleFlags {
  TrainSchedule schedule;
  bool no_augment = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--lr", schedule.initial_lr, "Initial learning rate");
    cmd->add_option("--epochs", schedule.max_epochs, "Maximum training epochs");
    cmd->add_option("--batch", schedule.batch_size, "Pairs per optimizer step");
    cmd->add_option("--val-fraction", schedule.validation_fraction,
                    "Fraction of pairs held out for validation");
    cmd->add_option("--dropout", schedule.dropout_rate, "Dropout rate (0 disables)");
    cmd->add_option("--plateau-patience", schedule.plateau_patience,
                    "Stagnant epochs before each learning-rate decay");
    cmd->add_option("--early-stop", schedule.early_stop_patience,
                    "Stagnant epochs before training stops");
    cmd->add_option("--plateau-factor", schedule.plateau_factor,
                    "Learning-rate decay factor");
    cmd->add_flag("--no-augment", no_augment,
                  "Disable per-step mirror/rotation augmentation");
  }

  TrainSchedule resolve() const {
    TrainSchedule s = schedule;
    s.augment = !no_augment;
    return s;
  }
};

int run(int argc, char** argv) {
  CLI::App app{
      "Non-unique segmentation workbench: reward-penalty Dice learning, "
      "baselines, and cross-validation experiments"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus");
  std::string gen_out;
  SynthConfig synth;
  std::uint32_t gen_shape = 32;
  gen->add_option("--out", gen_out, "Output corpus directory")->required();
  gen->add_option("--images", synth.num_images, "Number of images");
  gen->add_option("--annotators", synth.num_annotators, "Annotators per image");
  gen->add_option("--shape", gen_shape, "Cubic grid side length");
  gen->add_option("--seed", synth.rng_seed, "Generator seed");
  gen->add_option("--core-min", synth.core_radius_min, "Minimum core radius");
  gen->add_option("--core-max", synth.core_radius_max, "Maximum core radius");
  gen->add_option("--fringe-min", synth.fringe_width_min, "Minimum fringe width");
  gen->add_option("--fringe-max", synth.fringe_width_max, "Maximum fringe width");
  gen->add_option("--margin", synth.forbidden_margin, "Forbidden border margin");
  gen->add_option("--noise", synth.noise_level, "Intensity noise level");

  // rpmap
  auto* rp = app.add_subcommand("rpmap", "Build a reward-penalty map for one image");
  std::string rp_corpus, rp_image, rp_out;
  double rp_penalty = -1.0;
  rp->add_option("--corpus", rp_corpus, "Corpus directory")->required();
  rp->add_option("--image", rp_image, "Image id")->required();
  rp->add_option("--out", rp_out, "Output volume file")->required();
  rp->add_option("--penalty", rp_penalty, "Penalty value for never-annotated voxels");

  // train
  auto* tr = app.add_subcommand("train", "Train one model on a corpus");
  std::string tr_corpus, tr_loss = "dl", tr_exclude, tr_out, tr_history;
  std::uint64_t tr_seed = 0;
  ScheduleFlags tr_sched;
  tr->add_option("--corpus", tr_corpus, "Corpus directory")->required();
  tr->add_option("--loss", tr_loss, "Loss kind: wcel|dl|rpdl");
  tr->add_option("--exclude-image", tr_exclude, "Image id to hold out");
  tr->add_option("--seed", tr_seed, "Training seed");
  tr->add_option("--out", tr_out, "Checkpoint output path")->required();
  tr->add_option("--history", tr_history, "Optional epoch-history CSV path");
  tr_sched.attach(tr);

  // predict
  auto* pr = app.add_subcommand("predict", "Run a checkpoint on one volume");
  std::string pr_ckpt, pr_image, pr_out;
  pr->add_option("--ckpt", pr_ckpt, "Checkpoint path")->required();
  pr->add_option("--image", pr_image, "Input intensity volume")->required();
  pr->add_option("--out", pr_out, "Output probability volume")->required();

  // evaluate
  auto* ev = app.add_subcommand(
      "evaluate", "Score a prediction against an image's annotations");
  std::string ev_pred, ev_corpus, ev_image, ev_side = "test", ev_exclude;
  ev->add_option("--pred", ev_pred, "Prediction volume")->required();
  ev->add_option("--corpus", ev_corpus, "Corpus directory")->required();
  ev->add_option("--image", ev_image, "Image id")->required();
  ev->add_option("--map-side", ev_side,
                 "Annotations building the RPD map: test (all) or train "
                 "(excludes --exclude-annotator)");
  ev->add_option("--exclude-annotator", ev_exclude,
                 "Annotator held out during training (also dropped from the "
                 "reference set)");

  // xval
  auto* xv = app.add_subcommand("xval", "Run a cross-validation experiment");
  std::string xv_protocol = "exp1", xv_corpus, xv_losses = "wcel,dl,rpdl",
              xv_out, xv_side = "test", xv_seed_list;
  int xv_seeds = 5, xv_jobs = 1;
  ScheduleFlags xv_sched;
  xv->add_option("--protocol", xv_protocol, "exp1 (images) or exp2 (annotators)");
  xv->add_option("--corpus", xv_corpus, "Corpus directory")->required();
  xv->add_option("--losses", xv_losses, "Comma-separated loss kinds");
  xv->add_option("--seeds", xv_seeds, "Number of default seeds to run");
  xv->add_option("--seed-list", xv_seed_list, "Explicit comma-separated seeds");
  xv->add_option("--out", xv_out, "Output directory")->required();
  xv->add_option("--map-side", xv_side, "RPD evaluation map side: test|train");
  xv->add_option("--jobs", xv_jobs, "Parallel fold workers");
  xv_sched.attach(xv);

  // gradcheck
  auto* gc = app.add_subcommand(
      "gradcheck", "Verify analytic loss gradients against finite differences");
  std::string gc_loss;
  int gc_trials = 100;
  double gc_tol = 1e-3;
  std::uint64_t gc_seed = 0;
  gc->add_option("--loss", gc_loss, "Single loss kind (default: all three)");
  gc->add_option("--trials", gc_trials, "Random instances per loss");
  gc->add_option("--tol", gc_tol, "Maximum allowed relative error");
  gc->add_option("--seed", gc_seed, "Instance generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (gen->parsed()) {
    synth.shape = GridShape(gen_shape, gen_shape, gen_shape);
    const Corpus corpus = generate_corpus(synth);
    save_corpus(corpus, gen_out);
    double fg = 0.0;
    for (const auto& img : corpus.images) {
      double per_image = 0.0;
      for (const auto& m : img.annotations.masks)
        per_image += static_cast<double>(m.foreground_count());
      fg += per_image / static_cast<double>(img.annotations.size()) /
            static_cast<double>(img.intensity.shape.voxels());
    }
    std::printf("wrote %zu images x %zu annotators to %s (mean foreground %.2f%%)\n",
                corpus.size(), corpus.num_annotators(), gen_out.c_str(),
                100.0 * fg / static_cast<double>(corpus.size()));
    return kExitOk;
  }

  if (rp->parsed()) {
    const Corpus corpus = load_corpus(rp_corpus);
    const CorpusImage& img = find_image(corpus, rp_image);
    const RewardPenaltyMap map = build_rpmap(img.annotations, rp_penalty);
    save_volume(rp_out, map.to_grid(), VolumeMeta{img.image_id, "", "rpmap"});
    std::printf("wrote reward-penalty map for %s to %s\n", rp_image.c_str(),
                rp_out.c_str());
    return kExitOk;
  }

  if (tr->parsed()) {
    const Corpus corpus = load_corpus(tr_corpus);
    const LossKind kind = loss_kind_from_name(tr_loss);
    std::vector<TrainItem> items;
    bool excluded = false;
    for (const auto& img : corpus.images) {
      if (!tr_exclude.empty() && img.image_id == tr_exclude) {
        excluded = true;
        continue;
      }
      items.push_back({img.intensity, img.annotations});
    }
    if (!tr_exclude.empty() && !excluded)
      throw ConfigError("--exclude-image id not found in corpus: " + tr_exclude);
    if (items.empty()) throw ConfigError("no training images remain");

    TrainSchedule sched = tr_sched.resolve();
    sched.rng_seed = mix_seed(tr_seed, 2);
    TinySegNetF net;
    net.init_params(mix_seed(tr_seed, 1));
    const TrainResultT<float> result = train(net, items, kind, sched);

    CheckpointInfo info;
    info.loss = kind;
    info.schedule = sched;
    info.leaky_slope = net.leaky_slope();
    info.trained_shape = items.front().image.shape;
    info.wcel_weight = result.wcel_weight_used;
    save_checkpoint(tr_out, net, info);
    if (!tr_history.empty()) save_history_csv(tr_history, result.history);
    std::printf("trained %s for %zu epochs (best epoch %d, best val loss %.6f); "
                "checkpoint: %s\n",
                loss_kind_name(kind), result.history.size(), result.best_epoch,
                result.best_val_loss, tr_out.c_str());
    return kExitOk;
  }

  if (pr->parsed()) {
    TinySegNetF net;
    load_checkpoint(pr_ckpt, net);
    VolumeMeta meta;
    const VoxelGrid image = load_volume(pr_image, &meta);
    const VoxelGrid prob = net.forward(image);
    save_volume(pr_out, prob, VolumeMeta{meta.image_id, "", "prediction"});
    std::printf("wrote prediction for %s to %s\n", pr_image.c_str(), pr_out.c_str());
    return kExitOk;
  }

  if (ev->parsed()) {
    const MapSide side = map_side_from_name(ev_side);
    const Corpus corpus = load_corpus(ev_corpus);
    const CorpusImage& img = find_image(corpus, ev_image);
    const VoxelGrid pred = load_volume(ev_pred);
    if (pred.shape != img.intensity.shape)
      throw DimensionError("prediction shape does not match the image");

    AnnotationSet refs = img.annotations;
    if (!ev_exclude.empty()) {
      std::vector<BinaryMask> masks;
      std::vector<std::string> ids;
      for (std::size_t e = 0; e < img.annotations.size(); ++e) {
        if (img.annotations.annotator_ids[e] == ev_exclude) continue;
        masks.push_back(img.annotations.masks[e]);
        ids.push_back(img.annotations.annotator_ids[e]);
      }
      if (masks.size() == img.annotations.size())
        throw ConfigError("--exclude-annotator id not found: " + ev_exclude);
      refs = AnnotationSet(img.image_id, std::move(masks), std::move(ids));
    }
    const RewardPenaltyMap map = side == MapSide::Test
                                     ? build_rpmap(img.annotations)
                                     : build_rpmap(refs);
    const MetricReport report = evaluate_against_set(pred, refs, map, 0.5);
    for (const auto& entry : report.per_reference)
      std::printf("%-8s dice %.6f  rpd %.6f\n", entry.annotator_id.c_str(),
                  entry.dice, entry.rpd);
    std::printf("mean     dice %.6f ± %.6f  rpd %.6f ± %.6f  (%zu references, "
                "map side %s)\n",
                report.dice_mean, report.dice_std, report.rpd_mean, report.rpd_std,
                report.per_reference.size(), map_side_name(side));
    return kExitOk;
  }

  if (xv->parsed()) {
    ExperimentConfig cfg;
    cfg.protocol = protocol_from_name(xv_protocol);
    cfg.loss_kinds = parse_loss_list(xv_losses);
    cfg.schedule = xv_sched.resolve();
    cfg.seeds = xv_seed_list.empty()
                    ? default_seeds(static_cast<std::size_t>(std::max(1, xv_seeds)))
                    : parse_seed_list(xv_seed_list);
    cfg.rpd_map_side = map_side_from_name(xv_side);
    cfg.jobs = xv_jobs;

    const Corpus corpus = load_corpus(xv_corpus);
    const std::vector<FoldResult> results = run_experiment(corpus, cfg);
    const Summary summary = summarize(results, cfg);
    write_experiment_outputs(results, summary, xv_out);
    std::cout << render_text_tables(summary);
    std::printf("\nwrote tables to %s\n", xv_out.c_str());
    return kExitOk;
  }

  if (gc->parsed()) {
    std::vector<LossKind> kinds;
    if (gc_loss.empty())
      kinds = {LossKind::WCEL, LossKind::DL, LossKind::RPDL};
    else
      kinds = {loss_kind_from_name(gc_loss)};
    bool all_passed = true;
    for (LossKind kind : kinds) {
      const GradcheckReport report = loss_gradcheck(kind, gc_trials, gc_tol, gc_seed);
      std::printf("%-5s %d trials  max relative error %.3e  %s\n",
                  loss_kind_name(kind), report.trials, report.max_rel_error,
                  report.passed ? "ok" : "FAIL");
      all_passed = all_passed && report.passed;
    }
    if (!all_passed) {
      std::fprintf(stderr, "gradcheck failed (tolerance %.3e)\n", gc_tol);
      return kExitNumeric;
    }
    return kExitOk;
  }

  return kExitConfig;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const TrainingDivergedError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
}
