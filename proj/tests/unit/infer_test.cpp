/* Copyright 2026 The fmseg Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <vector>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "fmseg/infer.hpp"
#include "miou_oracle.hpp"

namespace fmseg::infer {
namespace {

SegmentationMap map_of(std::size_t h, std::size_t w, std::vector<std::int32_t> labels) {
  SegmentationMap m(h, w);
  m.labels = std::move(labels);
  return m;
}

// ---------------------------------------------------------------------------
// Patch classification and base maps.

TEST(ClassifyPatches, OptimumHeadGivesTruePatchClasses) {
  const auto world = synth::generate_world(4, 16, 32, 0.0, 51);
  const auto samples = fixtures::make_samples(world, fixtures::training_geometry(), 3, 52, "cp");
  align::HeadShape s;
  s.in_dim = 32;
  s.out_dim = 16;
  const auto head = align::AlignmentHead::from_parameters(
      s, {{"linear.weight", world.vision_basis}, {"linear.bias", Tensor2D(1, 16)}});
  for (const auto& smp : samples) {
    const auto pc = classify_patches(head, smp.vision, world.text_prototypes);
    EXPECT_EQ(std::vector<int>(pc.argmax.labels.begin(), pc.argmax.labels.end()),
              smp.image.vision_patch_classes);
  }
}

TEST(ClassifyPatches, SingleClassAndSelfConsistency) {
  SeededRng rng(53);
  align::HeadShape s;
  s.variant = align::HeadVariant::kMlp;
  s.in_dim = 6;
  s.out_dim = 3;
  s.hidden = 5;
  const auto head = align::AlignmentHead::create(s, 1);
  FeatureGrid g{"x", Tensor3D(3, 4, 6)};
  for (auto& v : g.features.data()) v = rng.normal();
  const auto one = classify_patches(head, g, fixtures::random_unit_rows(rng, 1, 3));
  for (const auto l : one.argmax.labels) EXPECT_EQ(l, 0);
  const auto many = classify_patches(head, g, fixtures::random_unit_rows(rng, 5, 3));
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      const auto cell = many.sim.cell(y, x);
      const double best = *std::max_element(cell.begin(), cell.end());
      EXPECT_EQ(cell[static_cast<std::size_t>(many.argmax.at(y, x))], best);
      for (const double v : cell) EXPECT_LE(std::abs(v), 1.0 + 1e-12);
    }
}

TEST(BaseSegmentation, SinglePatchAndNativeResolution) {
  Tensor3D one(1, 1, 3);
  one(0, 0, 2) = 0.5;
  const auto m = base_segmentation(one, 5, 7);
  for (const auto l : m.labels) EXPECT_EQ(l, 2);
  SeededRng rng(54);
  Tensor3D sim(4, 5, 3);
  for (auto& v : sim.data()) v = rng.normal();
  const auto native = base_segmentation(sim, 4, 5);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x)
      EXPECT_EQ(native.at(y, x), static_cast<std::int32_t>(argmax(sim.cell(y, x))));
}

TEST(BaseSegmentation, QuadrantsSurviveUpscaling) {
  Tensor3D sim(2, 2, 4);
  for (std::size_t q = 0; q < 4; ++q) sim(q / 2, q % 2, q) = 1.0;
  const auto m = base_segmentation(sim, 14, 14);
  for (std::size_t y = 0; y < 14; ++y)
    for (std::size_t x = 0; x < 14; ++x) {
      const std::int32_t q = static_cast<std::int32_t>((y / 7) * 2 + x / 7);
      EXPECT_EQ(m.at(y, x), q) << y << "," << x;
    }
  Tensor3D flat(3, 3, 2, 0.25);
  for (const auto l : base_segmentation(flat, 9, 9).labels) EXPECT_EQ(l, 0);
}

// ---------------------------------------------------------------------------
// Refinement.

TEST(Refined, MajorityVote) {
  const auto patches = map_of(1, 3, {2, 2, 1});
  const BinaryMask all(3, 3, 1);
  const auto base = map_of(3, 3, std::vector<std::int32_t>(9, 0));
  const auto out = refined_segmentation(base, std::vector<BinaryMask>{all}, patches);
  for (const auto l : out.labels) EXPECT_EQ(l, 2);
  EXPECT_EQ(mask_vote(all, map_of(1, 2, {3, 1})), 1);  // tie to the lower id
}

TEST(Refined, NoMasksAndUncoveringMasks) {
  const auto base = map_of(2, 2, {0, 1, 2, 3});
  const auto patches = map_of(1, 1, {3});
  EXPECT_EQ(refined_segmentation(base, {}, patches), base);
  BinaryMask corner(2, 2);
  corner.at(0, 0) = 1;  // a quarter of the single patch
  EXPECT_EQ(refined_segmentation(base, std::vector<BinaryMask>{corner}, patches), base);
}

TEST(Refined, NestedMasksSmallerWins) {
  // 6x6 image over a 3x3 patch grid; centre patch is class 2, the rest 1.
  const auto patches = map_of(3, 3, {1, 1, 1, 1, 2, 1, 1, 1, 1});
  BinaryMask big(6, 6, 1), small(6, 6);
  for (std::size_t y = 2; y < 4; ++y)
    for (std::size_t x = 2; x < 4; ++x) small.at(y, x) = 1;
  const auto base = map_of(6, 6, std::vector<std::int32_t>(36, 0));
  for (const auto& order : {std::vector<BinaryMask>{big, small}, std::vector<BinaryMask>{small, big}}) {
    const auto out = refined_segmentation(base, order, patches);
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) EXPECT_EQ(out.at(y, x), small.at(y, x) ? 2 : 1);
  }
}

TEST(Refined, ChangesOnlyInsideMasks) {
  SeededRng rng(55);
  for (int t = 0; t < 20; ++t) {
    SegmentationMap base(8, 8), patches(4, 4);
    for (auto& l : base.labels) l = static_cast<std::int32_t>(rng.uniform_int(3));
    for (auto& l : patches.labels) l = static_cast<std::int32_t>(rng.uniform_int(3));
    std::vector<BinaryMask> masks(2, BinaryMask(8, 8));
    for (auto& m : masks)
      for (auto& v : m.data) v = rng.uniform() < 0.4;
    const auto out = refined_segmentation(base, masks, patches);
    for (std::size_t p = 0; p < 64; ++p)
      if (!masks[0].data[p] && !masks[1].data[p]) EXPECT_EQ(out.labels[p], base.labels[p]);
  }
  EXPECT_THROW(refined_segmentation(SegmentationMap(8, 8), std::vector<BinaryMask>{BinaryMask(4, 4)},
                                    SegmentationMap(4, 4)),
               ShapeError);
}

// ---------------------------------------------------------------------------
// Protocol and metric.

TEST(RemapBackground, Examples) {
  const auto m = map_of(2, 2, {0, 1, 2, 3});
  EvalProtocol p{4, std::nullopt, {}};
  EXPECT_EQ(remap_background(m, p), m);
  p.background_id = 0;
  p.background_classes = {1, 2, 3};
  EXPECT_EQ(remap_background(m, p).labels, (std::vector<std::int32_t>{0, 0, 0, 0}));
  p.background_classes = {2};
  EXPECT_EQ(remap_background(m, p).labels, (std::vector<std::int32_t>{0, 1, 0, 3}));
  p.background_classes = {0};
  EXPECT_THROW(p.validate(), ConfigError);
  EvalProtocol orphan{4, std::nullopt, {1}};
  EXPECT_THROW(orphan.validate(), ConfigError);
}

TEST(Miou, HandCountedExample) {
  const auto r = miou(map_of(2, 2, {0, 0, 1, 1}), map_of(2, 2, {0, 1, 1, 1}), EvalProtocol{2});
  EXPECT_NEAR(*r.per_class_iou[0], 0.5, 1e-15);
  EXPECT_NEAR(*r.per_class_iou[1], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.miou, 0.583333, 5e-7);
  EXPECT_EQ(r.pixel_count, 4);
}

TEST(Miou, PerfectAndIgnoredAndMismatch) {
  const auto m = map_of(2, 2, {0, 1, 2, 2});
  const auto r = miou(m, m, EvalProtocol{4});
  EXPECT_EQ(r.miou, 1.0);
  EXPECT_FALSE(r.per_class_iou[3].has_value());
  const auto ignored = map_of(2, 2, std::vector<std::int32_t>(4, SegmentationMap::kIgnoreLabel));
  try {
    miou(m, ignored, EvalProtocol{4});
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_STREQ(e.what(), "no evaluable pixels");
  }
  EXPECT_THROW(miou(m, SegmentationMap(1, 4), EvalProtocol{4}), ShapeError);
}

TEST(Miou, MatchesOracleAndIsBoundedAndPermutationSymmetric) {
  SeededRng rng(56);
  for (int t = 0; t < 30; ++t) {
    std::vector<std::vector<int>> preds(3), gts(3);
    ConfusionCounts counts(4);
    std::vector<SegmentationMap> pm, gm;
    for (std::size_t i = 0; i < 3; ++i) {
      SegmentationMap p(5, 5), g(5, 5);
      for (std::size_t q = 0; q < 25; ++q) {
        p.labels[q] = static_cast<std::int32_t>(rng.uniform_int(4));
        g.labels[q] = rng.uniform() < 0.1 ? SegmentationMap::kIgnoreLabel
                                          : static_cast<std::int32_t>(rng.uniform_int(4));
      }
      preds[i].assign(p.labels.begin(), p.labels.end());
      gts[i].assign(g.labels.begin(), g.labels.end());
      counts.add(p, g);
      pm.push_back(p);
      gm.push_back(g);
    }
    const auto orc = oracle::count_miou(preds, gts, 4, SegmentationMap::kIgnoreLabel);
    const auto r = counts.result();
    ASSERT_TRUE(orc.miou.has_value());
    EXPECT_EQ(r.miou, *orc.miou);
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(counts.intersection(c), orc.counts[c].inter);
      EXPECT_EQ(counts.union_count(c), orc.counts[c].uni);
      if (r.per_class_iou[c]) {
        EXPECT_GE(*r.per_class_iou[c], 0.0);
        EXPECT_LE(*r.per_class_iou[c], 1.0);
      }
    }
    // Relabel both sides by the same permutation.
    const auto perm = rng.permutation(4);
    ConfusionCounts permuted(4);
    for (std::size_t i = 0; i < 3; ++i) {
      for (auto* m : {&pm[i], &gm[i]})
        for (auto& l : m->labels)
          if (l != SegmentationMap::kIgnoreLabel) l = static_cast<std::int32_t>(perm[static_cast<std::size_t>(l)]);
      permuted.add(pm[i], gm[i]);
    }
    EXPECT_NEAR(permuted.result().miou, r.miou, 1e-15);
  }
}

TEST(Miou, MergeIsOrderIndependent) {
  SeededRng rng(57);
  std::vector<ConfusionCounts> parts;
  for (int i = 0; i < 5; ++i) {
    SegmentationMap p(4, 4), g(4, 4);
    for (auto& l : p.labels) l = static_cast<std::int32_t>(rng.uniform_int(3));
    for (auto& l : g.labels) l = static_cast<std::int32_t>(rng.uniform_int(3));
    parts.emplace_back(3);
    parts.back().add(p, g);
  }
  ConfusionCounts fwd(3), rev(3);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    fwd.merge(parts[i]);
    rev.merge(parts[parts.size() - 1 - i]);
  }
  EXPECT_EQ(fwd.result().miou, rev.result().miou);
  EXPECT_EQ(fwd.pixel_count(), 80);
  EXPECT_THROW(fwd.merge(ConfusionCounts(4)), ShapeError);
}

TEST(Miou, ReportShape) {
  const auto m = map_of(1, 2, {0, 0});
  const auto j = report_json(miou(m, m, EvalProtocol{2}));
  EXPECT_EQ(j.at("miou"), 1.0);
  EXPECT_TRUE(j.at("per_class_iou")[1].is_null());
  EXPECT_EQ(j.at("pixel_count"), 2);
}

}  // namespace
}  // namespace fmseg::infer
