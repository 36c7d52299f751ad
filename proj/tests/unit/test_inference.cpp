#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cpsseg/inference.hpp"

using namespace cpsseg;

namespace {

ProbabilityChip random_chip(std::mt19937_64& rng, ChipIndex ix) {
  std::gamma_distribution<float> g(1.0f, 1.0f);
  ProbabilityChip c{std::vector<float>(5 * ix.chip_size * ix.chip_size), ix};
  const std::size_t hw = ix.chip_size * ix.chip_size;
  for (std::size_t i = 0; i < hw; ++i) {
    float s = 0.0f;
    for (std::size_t k = 0; k < 5; ++k) s += (c.probs[k * hw + i] = g(rng) + 1e-3f);
    for (std::size_t k = 0; k < 5; ++k) c.probs[k * hw + i] /= s;
  }
  return c;
}

ProbabilityChip constant_chip(ChipIndex ix, std::array<float, 5> v) {
  ProbabilityChip c{std::vector<float>(5 * ix.chip_size * ix.chip_size), ix};
  const std::size_t hw = ix.chip_size * ix.chip_size;
  for (std::size_t k = 0; k < 5; ++k) std::fill_n(c.probs.begin() + k * hw, hw, v[k]);
  return c;
}

LabelMask mask_of(RasterShape s, std::uint8_t fill = 4) {
  return LabelMask{Grid<std::uint8_t>(s, fill), AffineGeoTransform::identity(), {}};
}

}  // namespace

TEST_CASE("ensemble is the element-wise mean") {
  const ChipIndex ix{0, 0, 4};
  const auto a = constant_chip(ix, {0.2f, 0.8f, 0, 0, 0});
  const auto b = constant_chip(ix, {0.6f, 0.4f, 0, 0, 0});
  const auto e = ensemble(a, b);
  CHECK(e.at(0, 1, 1) == doctest::Approx(0.4f));
  CHECK(e.at(1, 3, 2) == doctest::Approx(0.6f));
  CHECK(ensemble(a, a).probs == a.probs);

  std::mt19937_64 rng(1);
  const auto r1 = random_chip(rng, {0, 0, 16}), r2 = random_chip(rng, {0, 0, 16});
  const auto m = ensemble(r1, r2);
  for (std::size_t i = 0; i < 256; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 5; ++k) s += m.probs[k * 256 + i];
    CHECK(std::abs(s - 1.0) <= 1e-5);
  }
  try {
    ensemble(a, constant_chip({4, 0, 4}, {1, 0, 0, 0, 0}));
    FAIL("expected IndexMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IndexMismatch);
  }
}

TEST_CASE("merge_chips places, maxes and counts coverage") {
  const RasterShape shape{6, 6};
  const auto t = AffineGeoTransform::identity();
  SUBCASE("single chip is placed verbatim") {
    std::mt19937_64 rng(2);
    const auto c = random_chip(rng, {1, 2, 4});
    const auto m = merge_chips(std::span(&c, 1), shape, t);
    for (int k = 0; k < 5; ++k)
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t q = 0; q < 4; ++q) CHECK(m.at(k, r + 1, q + 2) == c.at(k, r, q));
    CHECK(m.coverage(0, 0) == 0);
    CHECK(m.at(0, 0, 0) == 0.0f);
    CHECK(m.coverage(1, 2) == 1);
  }
  SUBCASE("overlap keeps the max") {
    const std::vector<ProbabilityChip> chips{constant_chip({0, 0, 4}, {0.3f, 0.7f, 0, 0, 0}),
                                             constant_chip({2, 2, 4}, {0.7f, 0.3f, 0, 0, 0})};
    const auto m = merge_chips(chips, shape, t);
    CHECK(m.at(0, 3, 3) == 0.7f);
    CHECK(m.at(1, 3, 3) == 0.7f);
    CHECK(m.coverage(3, 3) == 2);
  }
  SUBCASE("out of bounds") {
    const auto c = constant_chip({3, 0, 4}, {1, 0, 0, 0, 0});
    try {
      merge_chips(std::span(&c, 1), shape, t);
      FAIL("expected ChipOutOfBounds");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ChipOutOfBounds);
    }
  }
}

TEST_CASE("merge_chips matches the brute-force oracle and ignores chip order") {
  std::mt19937_64 rng(3);
  const RasterShape shape{50, 50};
  std::vector<ProbabilityChip> chips;
  for (const auto& ix : chip_grid(shape, 32, 16)) chips.push_back(random_chip(rng, ix));
  const auto m = merge_chips(chips, shape, AffineGeoTransform::identity());
  CHECK(m.probs == oracle::merged_max(chips, 50, 50));
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(chips.begin(), chips.end(), rng);
    CHECK(merge_chips(chips, shape, AffineGeoTransform::identity()).probs == m.probs);
  }
}

TEST_CASE("merging a mosaic's own chips reproduces it") {
  std::mt19937_64 rng(4);
  const RasterShape shape{40, 40};
  std::vector<ProbabilityChip> chips;
  for (const auto& ix : chip_grid(shape, 32, 32)) chips.push_back(random_chip(rng, ix));
  const auto m = merge_chips(chips, shape, AffineGeoTransform::identity());
  std::vector<ProbabilityChip> recut;
  for (const auto& c : chips) {
    ProbabilityChip r{std::vector<float>(c.probs.size()), c.index};
    for (int k = 0; k < 5; ++k)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 32; ++x)
          r.probs[(k * 32 + y) * 32 + x] = m.at(k, c.index.row_off + y, c.index.col_off + x);
    recut.push_back(std::move(r));
  }
  CHECK(merge_chips(recut, shape, AffineGeoTransform::identity()).probs == m.probs);
}

TEST_CASE("recall examples") {
  const RasterShape shape{4, 4};
  auto gt = mask_of(shape);
  for (std::size_t i = 0; i < 4; ++i) gt.classes(0, i) = 0;  // four Buildings pixels
  ProbabilityMosaic m;
  m.shape = shape;
  m.transform = AffineGeoTransform::identity();
  m.probs.assign(5 * 16, 0.0f);
  m.coverage = Grid<std::uint32_t>(shape, 1);
  for (std::size_t i = 0; i < 3; ++i) m.probs[i] = 0.9f;  // 3 of 4 above threshold
  m.probs[3] = 0.5f;
  auto r = recall_per_class(m, gt, 0.6);
  CHECK(*r[0] == 0.75);
  CHECK(*r[4] == 0.0);
  CHECK_FALSE(r[1].has_value());
  CHECK(*recall_per_class(m, gt, 0.5)[0] == 1.0);  // inclusive comparison
  CHECK(*mean_named_recall(r) == 0.75);

  for (std::size_t i = 0; i < 16; ++i) m.probs[4 * 16 + i] = 1.0f;
  CHECK(*recall_per_class(m, gt, 0.5)[4] == 1.0);

  auto shifted = gt;
  shifted.transform.origin_x += 1.0;
  try {
    recall_per_class(m, shifted, 0.5);
    FAIL("expected AlignmentError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::AlignmentError);
  }
  CHECK_THROWS_AS(recall_per_class(m, mask_of({4, 5}), 0.5), Error);
  CHECK_THROWS_AS(recall_per_class(m, gt, 1.0), Error);
}

TEST_CASE("recall matches the confusion oracle and is monotone") {
  std::mt19937_64 rng(5);
  const RasterShape shape{64, 64};
  const auto m = merge_chips(std::vector{random_chip(rng, {0, 0, 64})}, shape,
                             AffineGeoTransform::identity());
  auto gt = mask_of(shape);
  for (auto& v : gt.classes.storage()) v = static_cast<std::uint8_t>(rng() % 5);
  std::optional<double> prev_mean;
  for (double t : {0.1, 0.2, 0.3, 0.4, 0.5, 0.6}) {
    const auto r = recall_per_class(m, gt, t);
    const auto o = oracle::recall(m, gt, t);
    for (int k = 0; k < 5; ++k) CHECK(*r[k] == o[k]);
    const auto mean = mean_named_recall(r);
    if (prev_mean) CHECK(*mean <= *prev_mean);
    prev_mean = mean;
  }
}

TEST_CASE("recall report json and text") {
  const RasterShape shape{2, 2};
  auto gt = mask_of(shape);
  gt.classes(0, 0) = 0;
  ProbabilityMosaic m;
  m.shape = shape;
  m.transform = AffineGeoTransform::identity();
  m.probs.assign(20, 0.45f);
  m.coverage = Grid<std::uint32_t>(shape, 1);
  const std::vector<double> ts{0.4, 0.5};
  const auto rep = evaluate_recall(m, gt, ts);
  const auto j = rep.to_json();
  CHECK(j["recall"]["Buildings"]["0.4"] == 1.0);
  CHECK(j["recall"]["Buildings"]["0.5"] == 0.0);
  CHECK(j["recall"]["Roads"]["0.4"].is_null());
  CHECK(j["mean_named_classes"]["0.4"] == 1.0);
  const auto text = rep.to_text();
  CHECK(text.find("t=0.4") != std::string::npos);
  CHECK(text.find("n/a") != std::string::npos);
  CHECK(rep.to_json().dump() == evaluate_recall(m, gt, ts).to_json().dump());
}

TEST_CASE("prediction store and mosaic files roundtrip") {
  fixture::TempDir tmp("pred");
  const auto ds = fixture::small_dataset(9, 3);
  ModelConfig mc;
  mc.width_multiplier = 0.25;
  const auto model = build_model(mc);
  const auto chips = predict(model, ds, 2);
  REQUIRE(chips.size() == ds.size());
  for (const auto& c : chips) {
    for (std::size_t i = 0; i < 64 * 64; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += c.probs[k * 4096 + i];
      CHECK(std::abs(s - 1.0) <= 1e-5);
    }
  }
  predstore::save(tmp.path() / "store", chips, ds);
  const auto back = predstore::load(tmp.path() / "store");
  REQUIRE(back.chips.size() == chips.size());
  for (std::size_t i = 0; i < chips.size(); ++i) {
    CHECK(back.chips[i].probs == chips[i].probs);
    CHECK(back.chips[i].index == chips[i].index);
  }
  const auto mosaic = merge_chips(back.chips, back.source_shape, back.source_transform, back.crs_id);
  write_mosaic(tmp.path() / "p.tif", tmp.path() / "c.tif", mosaic);
  const auto reread = read_mosaic(tmp.path() / "p.tif");
  CHECK(reread.probs == mosaic.probs);
  CHECK(reread.transform == mosaic.transform);
  CHECK(reread.crs_id == mosaic.crs_id);
}
