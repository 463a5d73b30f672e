#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nuseg/grid.hpp"
#include "nuseg/rpmap.hpp"

namespace nuseg {

/// Knobs for the synthetic non-unique segmentation corpus. Each image gets
/// a bright blob (the common core every annotator segments), per-annotator
/// fringes around it, bright distractor spots that nobody annotates, and a
/// forbidden border shell the fringes never reach.
struct SynthConfig {
  GridShape shape{32, 32, 32};
  int num_images = 9;
  int num_annotators = 7;
  int core_radius_min = 3;
  int core_radius_max = 5;
  int fringe_width_min = 3;
  int fringe_width_max = 5;
  int forbidden_margin = 2;
  double noise_level = 0.12;
  std::uint64_t rng_seed = 0;

  void validate() const;  // throws ConfigError when geometrically infeasible
};

struct CorpusImage {
  std::string image_id;
  VoxelGrid intensity;
  AnnotationSet annotations;
};

struct Corpus {
  std::vector<CorpusImage> images;
  SynthConfig config;  // generating config for synthetic corpora

  std::size_t size() const { return images.size(); }
  std::size_t num_annotators() const {
    return images.empty() ? 0 : images.front().annotations.size();
  }
  void validate() const;
};

/// Deterministic pure function of the config: same seed, same corpus.
Corpus generate_corpus(const SynthConfig& cfg);

/// Replicate every image under `ops`, transforming intensity and masks
/// consistently. The identity op keeps the original id; other ops append
/// an op tag. Rotating a non-cubic corpus is an error.
Corpus expand_with_augmentation(const Corpus& corpus,
                                const std::vector<AugmentOp>& ops);

/// Directory layout: <root>/<image_id>/intensity.nuseg plus
/// ann_<annotator_id>.nuseg, each with a JSON sidecar, and a corpus.json
/// manifest listing ids and the generating config.
void save_corpus(const Corpus& corpus, const std::filesystem::path& root);
Corpus load_corpus(const std::filesystem::path& root);

}  // namespace nuseg
