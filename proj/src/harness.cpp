#include "nuseg/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "nuseg/error.hpp"
#include "nuseg/rng.hpp"
#include "nuseg/rpmap.hpp"

namespace nuseg {

namespace {

constexpr std::uint64_t kDefaultSeedList[] = {1, 2, 3, 4, 5};

AnnotationSet drop_annotator(const AnnotationSet& set, std::size_t idx) {
  std::vector<BinaryMask> masks;
  std::vector<std::string> ids;
  for (std::size_t e = 0; e < set.size(); ++e) {
    if (e == idx) continue;
    masks.push_back(set.masks[e]);
    ids.push_back(set.annotator_ids[e]);
  }
  return AnnotationSet(set.image_id, std::move(masks), std::move(ids));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string fmt_cell(const Summary::Cell& c) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", c.mean, c.stddev);
  return buf;
}

}  // namespace

const char* protocol_name(Protocol p) {
  return p == Protocol::LeaveOneImageOut ? "exp1" : "exp2";
}

Protocol protocol_from_name(const std::string& name) {
  if (name == "exp1" || name == "leave-one-image-out")
    return Protocol::LeaveOneImageOut;
  if (name == "exp2" || name == "leave-one-annotator-out")
    return Protocol::LeaveOneAnnotatorOut;
  throw ConfigError("unknown protocol: " + name);
}

const char* map_side_name(MapSide s) { return s == MapSide::Test ? "test" : "train"; }

MapSide map_side_from_name(const std::string& name) {
  if (name == "test") return MapSide::Test;
  if (name == "train") return MapSide::Train;
  throw ConfigError("unknown map side: " + name);
}

std::vector<std::uint64_t> default_seeds(std::size_t n) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < n; ++i)
    seeds.push_back(i < std::size(kDefaultSeedList) ? kDefaultSeedList[i]
                                                    : static_cast<std::uint64_t>(i + 1));
  return seeds;
}

void ExperimentConfig::validate() const {
  if (loss_kinds.empty()) throw ConfigError("experiment: no loss kinds");
  for (std::size_t i = 0; i < loss_kinds.size(); ++i)
    for (std::size_t j = i + 1; j < loss_kinds.size(); ++j)
      if (loss_kinds[i] == loss_kinds[j])
        throw ConfigError("experiment: duplicate loss kind");
  if (seeds.empty()) throw ConfigError("experiment: no seeds");
  for (std::size_t i = 0; i < seeds.size(); ++i)
    for (std::size_t j = i + 1; j < seeds.size(); ++j)
      if (seeds[i] == seeds[j]) throw ConfigError("experiment: duplicate seed");
  if (jobs < 1) throw ConfigError("experiment: jobs must be >= 1");
  schedule.validate();
}

int fold_count(const Corpus& corpus, Protocol protocol) {
  return protocol == Protocol::LeaveOneImageOut
             ? static_cast<int>(corpus.size())
             : static_cast<int>(corpus.num_annotators());
}

std::string fold_held_out_id(const Corpus& corpus, Protocol protocol, int fold) {
  if (fold < 0 || fold >= fold_count(corpus, protocol))
    throw ConfigError("fold index out of range");
  if (protocol == Protocol::LeaveOneImageOut)
    return corpus.images[static_cast<std::size_t>(fold)].image_id;
  return corpus.images.front().annotations.annotator_ids[static_cast<std::size_t>(fold)];
}

std::vector<TrainItem> fold_train_items(const Corpus& corpus, Protocol protocol,
                                        int fold) {
  corpus.validate();
  if (fold < 0 || fold >= fold_count(corpus, protocol))
    throw ConfigError("fold index out of range");
  std::vector<TrainItem> items;
  if (protocol == Protocol::LeaveOneImageOut) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (static_cast<int>(i) == fold) continue;
      items.push_back({corpus.images[i].intensity, corpus.images[i].annotations});
    }
  } else {
    for (const auto& img : corpus.images)
      items.push_back(
          {img.intensity, drop_annotator(img.annotations, static_cast<std::size_t>(fold))});
  }
  return items;
}

FoldResult run_single_fold(const Corpus& corpus, const ExperimentConfig& cfg,
                           std::uint64_t seed, int fold, LossKind loss,
                           std::vector<EpochRecord>* history) {
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<TrainItem> items = fold_train_items(corpus, cfg.protocol, fold);
  TinySegNetF net;
  net.init_params(mix_seed(seed, static_cast<std::uint64_t>(fold), 11));
  TrainSchedule sched = cfg.schedule;
  sched.rng_seed = mix_seed(seed, static_cast<std::uint64_t>(fold), 22);
  TrainResultT<float> trained = train(net, items, loss, sched);
  if (history) *history = trained.history;

  FoldResult result;
  result.protocol = cfg.protocol;
  result.seed = seed;
  result.fold = fold;
  result.held_out_id = fold_held_out_id(corpus, cfg.protocol, fold);
  result.loss = loss;
  result.best_epoch = trained.best_epoch;

  if (cfg.protocol == Protocol::LeaveOneImageOut) {
    const CorpusImage& held = corpus.images[static_cast<std::size_t>(fold)];
    const VoxelGrid pred = net.forward(held.intensity);
    // No annotator is held out, so the train-side and test-side evaluation
    // maps coincide: the held-out image's own annotations build the map.
    const RewardPenaltyMap map = build_rpmap(held.annotations);
    result.report = evaluate_against_set(pred, held.annotations, map, 0.5);
  } else {
    const auto a = static_cast<std::size_t>(fold);
    std::vector<MetricReport::Entry> model_entries, baseline_entries;
    for (const auto& img : corpus.images) {
      const AnnotationSet train_refs = drop_annotator(img.annotations, a);
      const RewardPenaltyMap map = cfg.rpd_map_side == MapSide::Test
                                       ? build_rpmap(img.annotations)
                                       : build_rpmap(train_refs);
      const VoxelGrid pred = net.forward(img.intensity);
      const MetricReport per_image = evaluate_against_set(pred, train_refs, map, 0.5);
      for (auto entry : per_image.per_reference) {
        entry.annotator_id = img.image_id + "/" + entry.annotator_id;
        model_entries.push_back(std::move(entry));
      }
      const MetricReport base =
          inter_annotator_baseline(img.annotations.masks[a], train_refs, map);
      for (auto entry : base.per_reference) {
        entry.annotator_id = img.image_id + "/" + entry.annotator_id;
        baseline_entries.push_back(std::move(entry));
      }
    }
    result.report = MetricReport::from_entries(std::move(model_entries));
    result.baseline = MetricReport::from_entries(std::move(baseline_entries));
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::vector<FoldResult> run_experiment(const Corpus& corpus,
                                       const ExperimentConfig& cfg) {
  corpus.validate();
  cfg.validate();
  if (cfg.protocol == Protocol::LeaveOneImageOut && corpus.size() < 2)
    throw ConfigError("experiment 1 needs at least 2 images");
  if (cfg.protocol == Protocol::LeaveOneAnnotatorOut && corpus.num_annotators() < 3)
    throw ConfigError("experiment 2 needs at least 3 annotators");

  struct Task {
    int fold;
    std::size_t loss_index, seed_index;
  };
  std::vector<Task> tasks;
  const int folds = fold_count(corpus, cfg.protocol);
  for (int f = 0; f < folds; ++f)
    for (std::size_t l = 0; l < cfg.loss_kinds.size(); ++l)
      for (std::size_t s = 0; s < cfg.seeds.size(); ++s) tasks.push_back({f, l, s});

  std::vector<FoldResult> results(tasks.size());
  const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      const Task& t = tasks[i];
      results[i] = run_single_fold(corpus, cfg, cfg.seeds[t.seed_index], t.fold,
                                   cfg.loss_kinds[t.loss_index]);
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    auto worker = [&]() {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= tasks.size()) return;
        try {
          const Task& t = tasks[i];
          results[i] = run_single_fold(corpus, cfg, cfg.seeds[t.seed_index], t.fold,
                                       cfg.loss_kinds[t.loss_index]);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          next.store(tasks.size());
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  return results;
}

std::vector<FoldResult> run_experiment1(const Corpus& corpus,
                                        const ExperimentConfig& cfg) {
  if (cfg.protocol != Protocol::LeaveOneImageOut)
    throw ConfigError("run_experiment1 requires the leave-one-image-out protocol");
  return run_experiment(corpus, cfg);
}

std::vector<FoldResult> run_experiment2(const Corpus& corpus,
                                        const ExperimentConfig& cfg) {
  if (cfg.protocol != Protocol::LeaveOneAnnotatorOut)
    throw ConfigError("run_experiment2 requires the leave-one-annotator-out protocol");
  return run_experiment(corpus, cfg);
}

Summary summarize(const std::vector<FoldResult>& results,
                  const ExperimentConfig& cfg) {
  if (results.empty()) throw ConfigError("summarize: no results");
  Summary s;
  s.protocol = cfg.protocol;
  s.losses = cfg.loss_kinds;
  s.seeds = cfg.seeds;

  std::vector<int> fold_numbers;
  for (const auto& r : results)
    if (std::find(fold_numbers.begin(), fold_numbers.end(), r.fold) ==
        fold_numbers.end())
      fold_numbers.push_back(r.fold);
  std::sort(fold_numbers.begin(), fold_numbers.end());

  auto find_result = [&](int fold, LossKind loss,
                         std::uint64_t seed) -> const FoldResult* {
    for (const auto& r : results)
      if (r.fold == fold && r.loss == loss && r.seed == seed) return &r;
    return nullptr;
  };

  const std::size_t nl = s.losses.size();
  const bool exp2 = cfg.protocol == Protocol::LeaveOneAnnotatorOut;
  for (int fold : fold_numbers) {
    std::vector<Summary::Cell> dice_row(nl), rpd_row(nl);
    for (std::size_t l = 0; l < nl; ++l) {
      double mean_sum = 0, std_sum = 0, rpd_mean_sum = 0, rpd_std_sum = 0;
      int count = 0;
      for (std::uint64_t seed : s.seeds) {
        const FoldResult* r = find_result(fold, s.losses[l], seed);
        if (!r) throw ConfigError("summarize: missing (fold, loss, seed) cell");
        mean_sum += r->report.dice_mean;
        std_sum += r->report.dice_std;
        rpd_mean_sum += r->report.rpd_mean;
        rpd_std_sum += r->report.rpd_std;
        ++count;
        if (s.fold_ids.size() < fold_numbers.size() && l == 0 && seed == s.seeds[0])
          s.fold_ids.push_back(r->held_out_id);
      }
      dice_row[l] = {mean_sum / count, std_sum / count};
      rpd_row[l] = {rpd_mean_sum / count, rpd_std_sum / count};
    }
    s.dice.push_back(std::move(dice_row));
    s.rpd.push_back(std::move(rpd_row));
    if (exp2) {
      const FoldResult* r = find_result(fold, s.losses[0], s.seeds[0]);
      s.baseline_dice.push_back({r->baseline->dice_mean, r->baseline->dice_std});
      s.baseline_rpd.push_back({r->baseline->rpd_mean, r->baseline->rpd_std});
    }
  }

  // Overall row: mean of fold means, mean of fold stds (the reference
  // tables' convention).
  s.overall_dice.resize(nl);
  s.overall_rpd.resize(nl);
  const double nf = static_cast<double>(s.dice.size());
  for (std::size_t l = 0; l < nl; ++l) {
    for (std::size_t f = 0; f < s.dice.size(); ++f) {
      s.overall_dice[l].mean += s.dice[f][l].mean / nf;
      s.overall_dice[l].stddev += s.dice[f][l].stddev / nf;
      s.overall_rpd[l].mean += s.rpd[f][l].mean / nf;
      s.overall_rpd[l].stddev += s.rpd[f][l].stddev / nf;
    }
  }
  if (exp2) {
    for (std::size_t f = 0; f < s.baseline_dice.size(); ++f) {
      s.overall_baseline_dice.mean += s.baseline_dice[f].mean / nf;
      s.overall_baseline_dice.stddev += s.baseline_dice[f].stddev / nf;
      s.overall_baseline_rpd.mean += s.baseline_rpd[f].mean / nf;
      s.overall_baseline_rpd.stddev += s.baseline_rpd[f].stddev / nf;
    }
  }

  for (std::size_t si = 0; si < s.seeds.size(); ++si) {
    std::vector<double> dice_means(nl, 0.0), rpd_means(nl, 0.0);
    for (std::size_t l = 0; l < nl; ++l) {
      for (int fold : fold_numbers) {
        const FoldResult* r = find_result(fold, s.losses[l], s.seeds[si]);
        dice_means[l] += r->report.dice_mean / nf;
        rpd_means[l] += r->report.rpd_mean / nf;
      }
    }
    s.per_seed_dice.push_back(std::move(dice_means));
    s.per_seed_rpd.push_back(std::move(rpd_means));
  }
  return s;
}

std::string render_text_tables(const Summary& s) {
  std::ostringstream out;
  const bool exp2 = s.protocol == Protocol::LeaveOneAnnotatorOut;
  out << (exp2 ? "Experiment 2 (leave-one-annotator-out)"
               : "Experiment 1 (leave-one-image-out)");
  out << ", seeds:";
  for (auto seed : s.seeds) out << " " << seed;
  out << "\n\n";

  auto emit_table = [&](const char* title,
                        const std::vector<std::vector<Summary::Cell>>& cells,
                        const std::vector<Summary::Cell>& overall,
                        const std::vector<Summary::Cell>& baseline,
                        const Summary::Cell& overall_baseline) {
    out << title << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-10s", exp2 ? "annotator" : "fold");
    out << buf;
    for (LossKind l : s.losses) {
      std::snprintf(buf, sizeof(buf), "  %-16s", loss_kind_name(l));
      out << buf;
    }
    if (!baseline.empty()) {
      std::snprintf(buf, sizeof(buf), "  %-16s", "baseline");
      out << buf;
    }
    out << "\n";
    for (std::size_t f = 0; f < cells.size(); ++f) {
      std::snprintf(buf, sizeof(buf), "%-10s", s.fold_ids[f].c_str());
      out << buf;
      for (std::size_t l = 0; l < s.losses.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "  %-16s", fmt_cell(cells[f][l]).c_str());
        out << buf;
      }
      if (!baseline.empty()) {
        std::snprintf(buf, sizeof(buf), "  %-16s", fmt_cell(baseline[f]).c_str());
        out << buf;
      }
      out << "\n";
    }
    std::snprintf(buf, sizeof(buf), "%-10s", "Overall");
    out << buf;
    for (std::size_t l = 0; l < s.losses.size(); ++l) {
      std::snprintf(buf, sizeof(buf), "  %-16s", fmt_cell(overall[l]).c_str());
      out << buf;
    }
    if (!baseline.empty()) {
      std::snprintf(buf, sizeof(buf), "  %-16s", fmt_cell(overall_baseline).c_str());
      out << buf;
    }
    out << "\n\n";
  };

  emit_table("Dice (mean ± std; fold cells averaged over seeds)", s.dice,
             s.overall_dice, s.baseline_dice, s.overall_baseline_dice);
  emit_table("RPD (mean ± std; fold cells averaged over seeds)", s.rpd,
             s.overall_rpd, s.baseline_rpd, s.overall_baseline_rpd);

  out << "Per-seed corpus means (Dice):\n";
  {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-10s", "seed");
    out << buf;
    for (LossKind l : s.losses) {
      std::snprintf(buf, sizeof(buf), "  %-10s", loss_kind_name(l));
      out << buf;
    }
    out << "\n";
    for (std::size_t si = 0; si < s.seeds.size(); ++si) {
      std::snprintf(buf, sizeof(buf), "%-10llu",
                    static_cast<unsigned long long>(s.seeds[si]));
      out << buf;
      for (std::size_t l = 0; l < s.losses.size(); ++l) {
        std::snprintf(buf, sizeof(buf), "  %-10.4f", s.per_seed_dice[si][l]);
        out << buf;
      }
      out << "\n";
    }
  }

  auto loss_index = [&](LossKind k) -> int {
    for (std::size_t l = 0; l < s.losses.size(); ++l)
      if (s.losses[l] == k) return static_cast<int>(l);
    return -1;
  };
  const int iw = loss_index(LossKind::WCEL);
  const int id = loss_index(LossKind::DL);
  const int ir = loss_index(LossKind::RPDL);
  if (id >= 0 && ir >= 0) {
    int wins = 0;
    for (const auto& row : s.per_seed_dice)
      if (row[static_cast<std::size_t>(ir)] > row[static_cast<std::size_t>(id)]) ++wins;
    out << "\nrpdl > dl (corpus mean Dice) in " << wins << "/" << s.seeds.size()
        << " seeds\n";
  }
  if (iw >= 0 && id >= 0) {
    int wins = 0;
    for (const auto& row : s.per_seed_dice)
      if (row[static_cast<std::size_t>(id)] > row[static_cast<std::size_t>(iw)]) ++wins;
    out << "dl > wcel (corpus mean Dice) in " << wins << "/" << s.seeds.size()
        << " seeds\n";
  }
  if (exp2) {
    auto majority = [&](int li, bool above) {
      if (li < 0) return;
      int count = 0;
      for (std::size_t f = 0; f < s.dice.size(); ++f) {
        const bool hit = above
                             ? s.dice[f][static_cast<std::size_t>(li)].mean >
                                   s.baseline_dice[f].mean
                             : s.dice[f][static_cast<std::size_t>(li)].mean <
                                   s.baseline_dice[f].mean;
        if (hit) ++count;
      }
      out << loss_kind_name(s.losses[static_cast<std::size_t>(li)])
          << (above ? " above" : " below") << " inter-annotator baseline in "
          << count << "/" << s.dice.size() << " folds\n";
    };
    out << "\n";
    majority(ir, true);
    majority(id, true);
    majority(iw, false);
  }
  return out.str();
}

void write_experiment_outputs(const std::vector<FoldResult>& results,
                              const Summary& summary,
                              const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  const bool exp2 = summary.protocol == Protocol::LeaveOneAnnotatorOut;

  {
    std::ofstream raw(out_dir / "raw.csv", std::ios::binary);
    if (!raw) throw FormatError("cannot open " + (out_dir / "raw.csv").string());
    raw << "protocol,seed,fold,held_out,loss,n_refs,dice_mean,dice_std,rpd_mean,"
           "rpd_std,baseline_dice_mean,baseline_dice_std,baseline_rpd_mean,"
           "baseline_rpd_std,best_epoch\n";
    for (const auto& r : results) {
      raw << protocol_name(r.protocol) << "," << r.seed << "," << r.fold << ","
          << r.held_out_id << "," << loss_kind_name(r.loss) << ","
          << r.report.per_reference.size() << "," << fmt(r.report.dice_mean) << ","
          << fmt(r.report.dice_std) << "," << fmt(r.report.rpd_mean) << ","
          << fmt(r.report.rpd_std) << ",";
      if (r.baseline)
        raw << fmt(r.baseline->dice_mean) << "," << fmt(r.baseline->dice_std) << ","
            << fmt(r.baseline->rpd_mean) << "," << fmt(r.baseline->rpd_std);
      else
        raw << ",,,";
      raw << "," << r.best_epoch << "\n";
    }
  }

  auto write_summary_csv = [&](const char* name,
                               const std::vector<std::vector<Summary::Cell>>& cells,
                               const std::vector<Summary::Cell>& overall,
                               const std::vector<Summary::Cell>& baseline,
                               const Summary::Cell& overall_baseline) {
    std::ofstream out(out_dir / name, std::ios::binary);
    if (!out) throw FormatError("cannot open " + (out_dir / name).string());
    out << "fold";
    for (LossKind l : summary.losses)
      out << "," << loss_kind_name(l) << "_mean," << loss_kind_name(l) << "_std";
    if (exp2) out << ",baseline_mean,baseline_std";
    out << "\n";
    for (std::size_t f = 0; f < cells.size(); ++f) {
      out << summary.fold_ids[f];
      for (std::size_t l = 0; l < summary.losses.size(); ++l)
        out << "," << fmt(cells[f][l].mean) << "," << fmt(cells[f][l].stddev);
      if (exp2)
        out << "," << fmt(baseline[f].mean) << "," << fmt(baseline[f].stddev);
      out << "\n";
    }
    out << "overall";
    for (std::size_t l = 0; l < summary.losses.size(); ++l)
      out << "," << fmt(overall[l].mean) << "," << fmt(overall[l].stddev);
    if (exp2)
      out << "," << fmt(overall_baseline.mean) << "," << fmt(overall_baseline.stddev);
    out << "\n";
  };
  write_summary_csv("summary_dice.csv", summary.dice, summary.overall_dice,
                    summary.baseline_dice, summary.overall_baseline_dice);
  write_summary_csv("summary_rpd.csv", summary.rpd, summary.overall_rpd,
                    summary.baseline_rpd, summary.overall_baseline_rpd);

  {
    std::ofstream out(out_dir / "per_seed.csv", std::ios::binary);
    if (!out) throw FormatError("cannot open " + (out_dir / "per_seed.csv").string());
    out << "seed";
    for (LossKind l : summary.losses)
      out << "," << loss_kind_name(l) << "_dice," << loss_kind_name(l) << "_rpd";
    out << "\n";
    for (std::size_t si = 0; si < summary.seeds.size(); ++si) {
      out << summary.seeds[si];
      for (std::size_t l = 0; l < summary.losses.size(); ++l)
        out << "," << fmt(summary.per_seed_dice[si][l]) << ","
            << fmt(summary.per_seed_rpd[si][l]);
      out << "\n";
    }
  }

  {
    std::ofstream out(out_dir / "summary.txt", std::ios::binary);
    if (!out) throw FormatError("cannot open " + (out_dir / "summary.txt").string());
    out << render_text_tables(summary);
  }

  {
    std::ofstream out(out_dir / "timings.txt", std::ios::binary);
    if (!out) throw FormatError("cannot open " + (out_dir / "timings.txt").string());
    double total = 0.0;
    char buf[160];
    for (const auto& r : results) {
      std::snprintf(buf, sizeof(buf), "seed=%llu fold=%d loss=%s %.2fs\n",
                    static_cast<unsigned long long>(r.seed), r.fold,
                    loss_kind_name(r.loss), r.wall_seconds);
      out << buf;
      total += r.wall_seconds;
    }
    std::snprintf(buf, sizeof(buf), "total %.2fs\n", total);
    out << buf;
  }
}

}  // namespace nuseg
