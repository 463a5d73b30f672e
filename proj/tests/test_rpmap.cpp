#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "nuseg/error.hpp"
#include "nuseg/rng.hpp"
#include "nuseg/rpmap.hpp"

using namespace nuseg;

namespace {

const GridShape kQuad(1, 2, 2);

BinaryMask quad(std::uint8_t a, std::uint8_t b, std::uint8_t c,
                std::uint8_t d) {
  return BinaryMask(kQuad, std::vector<std::uint8_t>{a, b, c, d});
}

// Three annotators over a 2x2 grid giving per-voxel counts [3,2,1,0].
AnnotationSet worked_example() {
  return AnnotationSet("img01",
                       {quad(1, 1, 1, 0), quad(1, 1, 0, 0), quad(1, 0, 0, 0)},
                       {"a01", "a02", "a03"});
}

AnnotationSet random_set(GridShape s, int annotators, Rng& rng) {
  std::vector<BinaryMask> masks;
  std::vector<std::string> ids;
  for (int e = 0; e < annotators; ++e) {
    BinaryMask m(s);
    for (auto& b : m.values) b = rng.uniform01() < 0.4 ? 1 : 0;
    masks.push_back(std::move(m));
    ids.push_back("a" + std::to_string(e));
  }
  AnnotationSet set("img", std::move(masks), std::move(ids));
  // guarantee at least one annotated voxel
  set.masks[0].values[rng.uniform_index(s.voxels())] = 1;
  return set;
}

}  // namespace

TEST_CASE("count_map counts per-voxel annotator coverage") {
  const VoxelGrid c = count_map(worked_example());
  CHECK(c.values == std::vector<double>{3, 2, 1, 0});

  const AnnotationSet single("i", {quad(1, 0, 1, 0)}, {"a01"});
  CHECK(count_map(single).values == std::vector<double>{1, 0, 1, 0});
}

TEST_CASE("annotation set invariants") {
  CHECK_THROWS_AS(AnnotationSet("i", {}, {}), DegenerateAnnotationError);
  CHECK_THROWS_AS(
      AnnotationSet("i", {quad(1, 0, 0, 0), BinaryMask(GridShape(1, 1, 4))},
                    {"a", "b"}),
      DimensionError);
  CHECK_THROWS_AS(AnnotationSet("i", {quad(1, 0, 0, 0), quad(0, 1, 0, 0)},
                                {"a", "a"}),
                  DomainError);
}

TEST_CASE("apply_penalty replaces zero counts by minus the observed max") {
  CHECK(apply_penalty(VoxelGrid(GridShape(1, 1, 4),
                                std::vector<double>{3, 2, 1, 0}))
            .values == std::vector<double>{3, 2, 1, -3});
  CHECK(apply_penalty(VoxelGrid(GridShape(1, 1, 2),
                                std::vector<double>{1, 0}))
            .values == std::vector<double>{1, -1});
  // no unannotated voxel: unchanged
  CHECK(apply_penalty(VoxelGrid(GridShape(1, 1, 3),
                                std::vector<double>{2, 2, 2}))
            .values == std::vector<double>{2, 2, 2});
  CHECK_THROWS_AS(apply_penalty(VoxelGrid(GridShape(1, 1, 3), 0.0)),
                  DegenerateAnnotationError);
  CHECK_THROWS_AS(apply_penalty(VoxelGrid(GridShape(1, 1, 2),
                                          std::vector<double>{1.5, 0})),
                  DomainError);
}

TEST_CASE("worked example: counts [3,2,1,0] normalize to [1, 2/3, 1/3, -1]") {
  const RewardPenaltyMap m = build_rpmap(worked_example());
  REQUIRE(m.values.size() == 4);
  CHECK(m.values[0] == 1.0);
  CHECK(m.values[1] == 2.0 / 3.0);
  CHECK(m.values[2] == 1.0 / 3.0);
  CHECK(m.values[3] == -1.0);
  CHECK(m.penalty_value == -1.0);
}

TEST_CASE("single annotator map is 2*mask - 1") {
  const AnnotationSet single("i", {quad(1, 0, 1, 0)}, {"a01"});
  CHECK(build_rpmap(single).values == std::vector<double>{1, -1, 1, -1});
}

TEST_CASE("custom penalty pins unannotated voxels exactly") {
  const RewardPenaltyMap m = build_rpmap(worked_example(), -0.25);
  CHECK(m.values[3] == -0.25);
  CHECK(m.values[0] == 1.0);
  CHECK(m.penalty_value == -0.25);
}

TEST_CASE("full agreement yields a two-level map") {
  const AnnotationSet set("i", {quad(1, 1, 0, 0), quad(1, 1, 0, 0)},
                          {"a", "b"});
  CHECK(build_rpmap(set).values == std::vector<double>{1, 1, -1, -1});
}

TEST_CASE("order invariance over random permutations") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    AnnotationSet set = random_set(GridShape(3, 3, 3), 4, rng);
    const RewardPenaltyMap base = build_rpmap(set);

    std::vector<std::size_t> order = {0, 1, 2, 3};
    rng.shuffle(order);
    std::vector<BinaryMask> masks;
    std::vector<std::string> ids;
    for (std::size_t i : order) {
      masks.push_back(set.masks[i]);
      ids.push_back(set.annotator_ids[i]);
    }
    const RewardPenaltyMap perm =
        build_rpmap(AnnotationSet(set.image_id, masks, ids));
    CHECK(perm.values == base.values);
  }
}

TEST_CASE("augmentation equivariance: build then transform == transform then build") {
  Rng rng(32);
  const auto ops = AugmentOp::all();
  for (int trial = 0; trial < 100; ++trial) {
    AnnotationSet set = random_set(GridShape(2, 3, 4), 3, rng);
    const AugmentOp t = ops[rng.uniform_index(ops.size())];

    std::vector<BinaryMask> tm;
    for (const auto& m : set.masks) tm.push_back(augment(m, t));
    const RewardPenaltyMap lhs =
        build_rpmap(AnnotationSet(set.image_id, tm, set.annotator_ids));
    const RewardPenaltyMap rhs = augment(build_rpmap(set), t);
    CHECK(lhs.shape == rhs.shape);
    CHECK(lhs.values == rhs.values);
  }
}

TEST_CASE("growing a mask never lowers map values when a unanimous voxel exists") {
  // Normalization divides by the maximum observed count, so monotonicity
  // under mask growth holds once some voxel is annotated by everyone (the
  // ceiling is then pinned at E and cannot rise). Annotation sets produced
  // by the corpus generator always contain such a common core.
  Rng rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    AnnotationSet set = random_set(GridShape(3, 3, 3), 3, rng);
    for (auto& m : set.masks) m.values[13] = 1;  // unanimous voxel
    const RewardPenaltyMap before = build_rpmap(set);

    AnnotationSet grown = set;
    BinaryMask& target = grown.masks[rng.uniform_index(3)];
    for (auto& b : target.values) {
      if (b == 0 && rng.uniform01() < 0.3) b = 1;
    }
    const RewardPenaltyMap after = build_rpmap(grown);
    for (std::size_t i = 0; i < before.values.size(); ++i) {
      CHECK(after.values[i] >= before.values[i]);
    }
  }
}

TEST_CASE("without a unanimous voxel growth can deflate other rewards") {
  // Documents the flip side of max-observed-count normalization: raising
  // the maximum count rescales every other positive voxel downward.
  const GridShape s(1, 2, 2);
  const std::vector<std::string> ids = {"a01", "a02", "a03"};
  const AnnotationSet before(
      "i",
      {BinaryMask(s, {1, 1, 0, 0}), BinaryMask(s, {1, 1, 0, 0}),
       BinaryMask(s, {0, 0, 1, 0})},
      ids);
  const AnnotationSet after(
      "i",
      {BinaryMask(s, {1, 1, 0, 0}), BinaryMask(s, {1, 1, 0, 0}),
       BinaryMask(s, {1, 0, 1, 0})},  // third mask grew into voxel 0
      ids);
  const RewardPenaltyMap b = build_rpmap(before);
  const RewardPenaltyMap a = build_rpmap(after);
  CHECK(b.values == std::vector<double>{1.0, 1.0, 0.5, -1.0});
  CHECK(a.values == std::vector<double>{1.0, 2.0 / 3.0, 1.0 / 3.0, -1.0});
  CHECK(a.values[1] < b.values[1]);
}

TEST_CASE("range invariant and exact penalty placement") {
  Rng rng(34);
  for (int trial = 0; trial < 50; ++trial) {
    AnnotationSet set = random_set(GridShape(3, 3, 3), 5, rng);
    const VoxelGrid counts = count_map(set);
    const RewardPenaltyMap m = build_rpmap(set);
    double max_v = -2.0;
    for (std::size_t i = 0; i < m.values.size(); ++i) {
      CHECK(m.values[i] >= -1.0);
      CHECK(m.values[i] <= 1.0);
      if (counts.values[i] == 0.0) {
        CHECK(m.values[i] == -1.0);
      } else {
        CHECK(m.values[i] > 0.0);
      }
      max_v = std::max(max_v, m.values[i]);
    }
    CHECK(max_v == 1.0);
  }
}

TEST_CASE("unit map is all ones") {
  const RewardPenaltyMap u = unit_map(GridShape(2, 2, 2));
  CHECK(std::all_of(u.values.begin(), u.values.end(),
                    [](double v) { return v == 1.0; }));
}
