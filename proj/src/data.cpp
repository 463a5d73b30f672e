#include "nuseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <json.hpp>

#include "nuseg/error.hpp"
#include "nuseg/io.hpp"
#include "nuseg/rng.hpp"

namespace nuseg {

namespace {

int blob_reach(const SynthConfig& cfg) {
  // Worst-case blob + fringe radius after per-axis shape jitter (x1.15).
  return static_cast<int>(
      std::ceil(1.15 * (cfg.core_radius_max + cfg.fringe_width_max)));
}

std::string two_digits(int n) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%02d", n);
  return buf;
}

/// 3x3x3 mean filter; borders average over the in-volume neighbors only.
VoxelGrid box_smooth(const VoxelGrid& g) {
  const int D = static_cast<int>(g.shape.d);
  const int H = static_cast<int>(g.shape.h);
  const int W = static_cast<int>(g.shape.w);
  VoxelGrid out(g.shape);
  for (int z = 0; z < D; ++z) {
    const int z0 = std::max(0, z - 1), z1 = std::min(D - 1, z + 1);
    for (int y = 0; y < H; ++y) {
      const int y0 = std::max(0, y - 1), y1 = std::min(H - 1, y + 1);
      for (int x = 0; x < W; ++x) {
        const int x0 = std::max(0, x - 1), x1 = std::min(W - 1, x + 1);
        double sum = 0.0;
        int count = 0;
        for (int zz = z0; zz <= z1; ++zz)
          for (int yy = y0; yy <= y1; ++yy)
            for (int xx = x0; xx <= x1; ++xx) {
              sum += g.values[g.shape.index(zz, yy, xx)];
              ++count;
            }
        out.values[g.shape.index(z, y, x)] = sum / count;
      }
    }
  }
  return out;
}

VoxelGrid white_noise(Rng& rng, const GridShape& shape) {
  VoxelGrid g(shape);
  for (auto& v : g.values) v = rng.uniform(-1.0, 1.0);
  return g;
}

/// Zero-mean unit-variance version of a field (flat fields stay zero).
VoxelGrid standardized(const VoxelGrid& g) {
  double mean = 0.0;
  for (double v : g.values) mean += v;
  mean /= static_cast<double>(g.values.size());
  double var = 0.0;
  for (double v : g.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(g.values.size());
  const double sd = std::sqrt(var);
  VoxelGrid out(g.shape);
  if (sd > 0.0)
    for (std::size_t i = 0; i < g.values.size(); ++i)
      out.values[i] = (g.values[i] - mean) / sd;
  return out;
}

struct BlobGeometry {
  double center[3];
  double radius[3];   // ellipsoid semi-axes
  double rho_fringe;  // normalized outer shell radius (core boundary = 1)
  int reach;          // integer bounding radius of core + fringe
};

struct Distractor {
  double center[3];
  double radius;
  double brightness;
};

CorpusImage generate_image(const SynthConfig& cfg, int image_index,
                           const std::string& image_id) {
  const GridShape shape = cfg.shape;
  Rng rng(mix_seed(cfg.rng_seed, static_cast<std::uint64_t>(image_index)));

  BlobGeometry blob;
  const int r_core =
      cfg.core_radius_min +
      static_cast<int>(rng.uniform_index(
          static_cast<std::size_t>(cfg.core_radius_max - cfg.core_radius_min + 1)));
  const int f_width =
      cfg.fringe_width_min +
      static_cast<int>(rng.uniform_index(
          static_cast<std::size_t>(cfg.fringe_width_max - cfg.fringe_width_min + 1)));
  blob.rho_fringe = 1.0 + static_cast<double>(f_width) / r_core;
  int reach = 0;
  for (int k = 0; k < 3; ++k) {
    blob.radius[k] = r_core * rng.uniform(0.9, 1.15);
    reach = std::max(reach, static_cast<int>(
                                std::ceil(blob.radius[k] * blob.rho_fringe)));
  }
  blob.reach = reach;
  for (int k = 0; k < 3; ++k) {
    const int extent = static_cast<int>(shape.extent(k));
    const int lo = cfg.forbidden_margin + reach + 1;
    const int hi = extent - 2 - cfg.forbidden_margin - reach;
    blob.center[k] = lo + static_cast<int>(rng.uniform_index(
                              static_cast<std::size_t>(hi - lo + 1)));
  }

  // Bright spots no annotator ever touches; placement can fail and is then
  // simply skipped, keeping generation total.
  std::vector<Distractor> distractors;
  for (int k = 0; k < 5; ++k) {
    Distractor d;
    d.radius = rng.uniform(1.5, 2.5);
    d.brightness = 0.6 + rng.uniform(0.0, 0.2);
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      double cand[3];
      bool ok = true;
      for (int a = 0; a < 3; ++a) {
        const int extent = static_cast<int>(shape.extent(a));
        const int lo = cfg.forbidden_margin + 3;
        const int hi = extent - 4 - cfg.forbidden_margin;
        if (hi < lo) {
          ok = false;
          break;
        }
        cand[a] = lo + static_cast<int>(rng.uniform_index(
                           static_cast<std::size_t>(hi - lo + 1)));
      }
      if (!ok) break;
      double dist2 = 0.0;
      for (int a = 0; a < 3; ++a)
        dist2 += (cand[a] - blob.center[a]) * (cand[a] - blob.center[a]);
      const double min_gap = blob.reach + d.radius + 2.0;
      if (dist2 < min_gap * min_gap) continue;
      for (const auto& other : distractors) {
        double od2 = 0.0;
        for (int a = 0; a < 3; ++a)
          od2 += (cand[a] - other.center[a]) * (cand[a] - other.center[a]);
        if (od2 < (2.0 * d.radius + 1.0) * (2.0 * d.radius + 1.0)) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
      for (int a = 0; a < 3; ++a) d.center[a] = cand[a];
      distractors.push_back(d);
      placed = true;
    }
  }

  const int D = static_cast<int>(shape.d);
  const int H = static_cast<int>(shape.h);
  const int W = static_cast<int>(shape.w);

  // Normalized ellipsoid radius per voxel; <=1 is core, <=rho_fringe is shell.
  VoxelGrid rho(shape);
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const double dz = (z - blob.center[0]) / blob.radius[0];
        const double dy = (y - blob.center[1]) / blob.radius[1];
        const double dx = (x - blob.center[2]) / blob.radius[2];
        rho.values[shape.index(z, y, x)] = std::sqrt(dz * dz + dy * dy + dx * dx);
      }

  BinaryMask core(shape);
  for (std::size_t i = 0; i < rho.values.size(); ++i)
    core.values[i] = rho.values[i] <= 1.0 ? 1 : 0;

  // Per-annotator masks: core plus a seeded random fringe whose inclusion
  // decays with radius and leans toward an annotator-specific direction.
  std::vector<BinaryMask> masks;
  std::vector<std::string> annotator_ids;
  for (int e = 0; e < cfg.num_annotators; ++e) {
    Rng arng(mix_seed(cfg.rng_seed, static_cast<std::uint64_t>(image_index),
                      1000 + static_cast<std::uint64_t>(e)));
    double u[3];
    double norm = 0.0;
    do {
      norm = 0.0;
      for (int k = 0; k < 3; ++k) {
        u[k] = arng.normal();
        norm += u[k] * u[k];
      }
      norm = std::sqrt(norm);
    } while (norm < 1e-6);
    for (int k = 0; k < 3; ++k) u[k] /= norm;
    const double theta = 0.52 + arng.uniform(-0.15, 0.15);
    const VoxelGrid field = standardized(box_smooth(box_smooth(white_noise(arng, shape))));

    BinaryMask mask = core;
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const std::size_t i = shape.index(z, y, x);
          const double r = rho.values[i];
          if (r <= 1.0 || r > blob.rho_fringe) continue;
          const double t = (r - 1.0) / (blob.rho_fringe - 1.0);
          double dir[3] = {z - blob.center[0], y - blob.center[1],
                           x - blob.center[2]};
          const double dn =
              std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
          const double cosang =
              dn > 0.0
                  ? (dir[0] * u[0] + dir[1] * u[1] + dir[2] * u[2]) / dn
                  : 0.0;
          const double score = 0.9 * (1.0 - t) + 0.7 * cosang + 0.45 * field.values[i];
          if (score > theta) mask.values[i] = 1;
        }
    masks.push_back(std::move(mask));
    annotator_ids.push_back("a" + two_digits(e + 1));
  }

  // Intensity: smoothed core/shell signal plus distractors plus noise, with
  // every value passed through f32 so disk round-trips are lossless.
  VoxelGrid raw(shape);
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t i = shape.index(z, y, x);
        const double r = rho.values[i];
        double v = 0.0;
        if (r <= 1.0)
          v = 0.8;
        else if (r <= blob.rho_fringe)
          v = 0.6 * (1.0 - (r - 1.0) / (blob.rho_fringe - 1.0));
        for (const auto& d : distractors) {
          const double dz = z - d.center[0], dy = y - d.center[1],
                       dx = x - d.center[2];
          if (dz * dz + dy * dy + dx * dx <= d.radius * d.radius)
            v = std::max(v, d.brightness);
        }
        raw.values[i] = v;
      }
  VoxelGrid intensity = box_smooth(raw);
  const VoxelGrid noise = box_smooth(white_noise(rng, shape));
  for (std::size_t i = 0; i < intensity.values.size(); ++i) {
    const double v = intensity.values[i] + cfg.noise_level * noise.values[i];
    intensity.values[i] = static_cast<double>(static_cast<float>(v));
  }

  CorpusImage img;
  img.image_id = image_id;
  img.intensity = std::move(intensity);
  img.annotations = AnnotationSet(image_id, std::move(masks), std::move(annotator_ids));
  return img;
}

nlohmann::json synth_to_json(const SynthConfig& cfg) {
  return {{"shape", {cfg.shape.d, cfg.shape.h, cfg.shape.w}},
          {"num_images", cfg.num_images},
          {"num_annotators", cfg.num_annotators},
          {"core_radius_min", cfg.core_radius_min},
          {"core_radius_max", cfg.core_radius_max},
          {"fringe_width_min", cfg.fringe_width_min},
          {"fringe_width_max", cfg.fringe_width_max},
          {"forbidden_margin", cfg.forbidden_margin},
          {"noise_level", cfg.noise_level},
          {"rng_seed", cfg.rng_seed}};
}

SynthConfig synth_from_json(const nlohmann::json& j) {
  SynthConfig cfg;
  if (j.contains("shape") && j["shape"].is_array() && j["shape"].size() == 3)
    cfg.shape = GridShape(j["shape"][0].get<std::uint32_t>(),
                          j["shape"][1].get<std::uint32_t>(),
                          j["shape"][2].get<std::uint32_t>());
  cfg.num_images = j.value("num_images", cfg.num_images);
  cfg.num_annotators = j.value("num_annotators", cfg.num_annotators);
  cfg.core_radius_min = j.value("core_radius_min", cfg.core_radius_min);
  cfg.core_radius_max = j.value("core_radius_max", cfg.core_radius_max);
  cfg.fringe_width_min = j.value("fringe_width_min", cfg.fringe_width_min);
  cfg.fringe_width_max = j.value("fringe_width_max", cfg.fringe_width_max);
  cfg.forbidden_margin = j.value("forbidden_margin", cfg.forbidden_margin);
  cfg.noise_level = j.value("noise_level", cfg.noise_level);
  cfg.rng_seed = j.value("rng_seed", cfg.rng_seed);
  return cfg;
}

}  // namespace

void SynthConfig::validate() const {
  if (shape.voxels() == 0) throw ConfigError("synth: empty shape");
  if (num_images < 1) throw ConfigError("synth: num_images must be >= 1");
  if (num_annotators < 1) throw ConfigError("synth: num_annotators must be >= 1");
  if (core_radius_min < 1 || core_radius_max < core_radius_min)
    throw ConfigError("synth: invalid core radius range");
  if (fringe_width_min < 0 || fringe_width_max < fringe_width_min)
    throw ConfigError("synth: invalid fringe width range");
  if (forbidden_margin < 0) throw ConfigError("synth: negative forbidden margin");
  if (noise_level < 0.0) throw ConfigError("synth: negative noise level");
  const int reach = blob_reach(*this);
  for (int k = 0; k < 3; ++k) {
    const int extent = static_cast<int>(shape.extent(k));
    if (extent < 2 * (forbidden_margin + reach) + 3)
      throw ConfigError(
          "synth: config geometrically infeasible (core + fringe + margin "
          "exceed the volume)");
  }
}

void Corpus::validate() const {
  if (images.empty()) throw ConfigError("corpus: no images");
  const GridShape shape = images.front().intensity.shape;
  const auto& ids = images.front().annotations.annotator_ids;
  std::set<std::string> seen;
  for (const auto& img : images) {
    if (!seen.insert(img.image_id).second)
      throw ConfigError("corpus: duplicate image id " + img.image_id);
    img.annotations.validate();
    if (img.intensity.shape != shape || img.annotations.shape() != shape)
      throw DimensionError("corpus: inconsistent shapes at image " + img.image_id);
    if (img.annotations.annotator_ids != ids)
      throw ConfigError("corpus: annotator ids differ at image " + img.image_id);
    if (img.annotations.image_id != img.image_id)
      throw ConfigError("corpus: annotation set mislabeled at image " + img.image_id);
  }
}

Corpus generate_corpus(const SynthConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  corpus.config = cfg;
  for (int i = 0; i < cfg.num_images; ++i)
    corpus.images.push_back(generate_image(cfg, i, "img" + two_digits(i + 1)));
  corpus.validate();
  return corpus;
}

Corpus expand_with_augmentation(const Corpus& corpus,
                                const std::vector<AugmentOp>& ops) {
  if (ops.empty()) throw ConfigError("expand: no augmentation ops given");
  corpus.validate();
  Corpus out;
  out.config = corpus.config;
  for (const auto& img : corpus.images) {
    for (std::size_t oi = 0; oi < ops.size(); ++oi) {
      const AugmentOp& op = ops[oi];
      if (transformed_shape(img.intensity.shape, op) != img.intensity.shape)
        throw DimensionError(
            "expand: rotation op on non-cubic volume at image " + img.image_id);
      CorpusImage derived;
      derived.image_id = op.is_identity()
                             ? img.image_id
                             : img.image_id + "_aug" + two_digits(static_cast<int>(oi));
      derived.intensity = augment(img.intensity, op);
      std::vector<BinaryMask> masks;
      masks.reserve(img.annotations.size());
      for (const auto& m : img.annotations.masks) masks.push_back(augment(m, op));
      derived.annotations = AnnotationSet(derived.image_id, std::move(masks),
                                          img.annotations.annotator_ids);
      out.images.push_back(std::move(derived));
    }
  }
  out.validate();
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& root) {
  corpus.validate();
  std::filesystem::create_directories(root);
  nlohmann::json manifest;
  manifest["format"] = "nuseg-corpus-v1";
  manifest["config"] = synth_to_json(corpus.config);
  auto& imgs = manifest["images"] = nlohmann::json::array();
  for (const auto& img : corpus.images) {
    imgs.push_back({{"id", img.image_id},
                    {"annotators", img.annotations.annotator_ids}});
    const auto dir = root / img.image_id;
    std::filesystem::create_directories(dir);
    save_volume(dir / "intensity.nuseg", img.intensity,
                VolumeMeta{img.image_id, "", "intensity"});
    for (std::size_t e = 0; e < img.annotations.size(); ++e)
      save_volume(dir / ("ann_" + img.annotations.annotator_ids[e] + ".nuseg"),
                  img.annotations.masks[e],
                  VolumeMeta{img.image_id, img.annotations.annotator_ids[e],
                             "annotation"});
  }
  const auto manifest_path = root / "corpus.json";
  std::ofstream out(manifest_path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + manifest_path.string());
  out << manifest.dump(2) << "\n";
  if (!out) throw FormatError("failed writing " + manifest_path.string());
}

Corpus load_corpus(const std::filesystem::path& root) {
  const auto manifest_path = root / "corpus.json";
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw FormatError("missing corpus manifest: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad corpus manifest " + manifest_path.string() + ": " +
                      e.what());
  }
  if (manifest.value("format", "") != "nuseg-corpus-v1")
    throw FormatError("unrecognized corpus format in " + manifest_path.string());

  Corpus corpus;
  if (manifest.contains("config")) corpus.config = synth_from_json(manifest["config"]);
  if (!manifest.contains("images") || !manifest["images"].is_array() ||
      manifest["images"].empty())
    throw FormatError("corpus manifest lists no images: " + manifest_path.string());

  for (const auto& entry : manifest["images"]) {
    CorpusImage img;
    img.image_id = entry.value("id", "");
    if (img.image_id.empty())
      throw FormatError("corpus manifest entry without id in " +
                        manifest_path.string());
    const auto dir = root / img.image_id;
    img.intensity = load_volume(dir / "intensity.nuseg");
    std::vector<BinaryMask> masks;
    std::vector<std::string> ids;
    for (const auto& aid : entry["annotators"]) {
      const std::string annotator = aid.get<std::string>();
      BinaryMask m = load_mask(dir / ("ann_" + annotator + ".nuseg"));
      if (m.shape != img.intensity.shape)
        throw DimensionError("corpus: annotation shape mismatch in " +
                             (dir / ("ann_" + annotator + ".nuseg")).string());
      masks.push_back(std::move(m));
      ids.push_back(annotator);
    }
    img.annotations = AnnotationSet(img.image_id, std::move(masks), std::move(ids));
    corpus.images.push_back(std::move(img));
  }
  corpus.validate();
  return corpus;
}

}  // namespace nuseg
