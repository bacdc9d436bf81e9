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

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. `acceptance N ...` runs only the listed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "finite_diff.hpp"
#include "fixtures.hpp"
#include "fmseg/align.hpp"
#include "fmseg/infer.hpp"
#include "fmseg/pipeline.hpp"
#include "fmseg/stage1.hpp"
#include "fmseg/synthworld.hpp"
#include "loss_oracle.hpp"
#include "miou_oracle.hpp"

namespace {

using namespace fmseg;
namespace al = fmseg::align;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients against central differences, every loss x head.

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  SeededRng rng(11);
  const std::size_t din = 6, dout = 4, classes = 3;
  const Tensor2D protos = fixtures::random_unit_rows(rng, classes, dout);
  // Two images of four patches each, every class present at least twice.
  std::vector<al::TrainingImage> images;
  const std::vector<std::vector<std::int32_t>> labels = {{0, 1, 2, 0}, {1, 2, PatchLabelGrid::kUnlabeled, 0}};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    images.push_back({"fd_" + std::to_string(i), fixtures::random_matrix(rng, 4, din), labels[i]});
  }
  double worst = 0.0;
  std::string where;
  bool all_nonzero = true;
  for (const auto variant : {al::HeadVariant::kLinear, al::HeadVariant::kMlp,
                             al::HeadVariant::kTransformer}) {
    const al::HeadShape shape{variant, din, dout, 8, 2};
    const auto head = al::AlignmentHead::create(shape, 5);
    for (const auto kind : {al::LossKind::kTSupCon, al::LossKind::kSupCon,
                            al::LossKind::kPrototype}) {
      const auto r = oracle::check_head_gradients(head, images, protos, kind);
      all_nonzero = all_nonzero && r.max_abs_analytic > 1e-6;
      if (r.worst > worst) {
        worst = r.worst;
        where = std::string(al::variant_name(variant)) + "/" +
                std::string(al::loss_name(kind)) + " " + r.worst_at;
      }
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < 1e-4 && all_nonzero && secs < 10.0,
          "worst rel err " + fmt("%.2e", worst) + " at " + where + ", " + fmt("%.2f s", secs)};
}

// ---------------------------------------------------------------------------
// 2. Production losses against the brute-force evaluator.

Outcome loss_oracle() {
  double worst = 0.0;
  // Hand-evaluated fixtures. The first needs z1.z2 = 0 with z_i.t = 1, which
  // only non-unit vectors realise; the losses read dot products alone.
  const double hand1 = (std::log(std::exp(1.0) + 1.0) - 1.0) / 3.0;
  const double hand2 = 2.0 * (std::log(std::exp(1.0) + 2.0) - 1.0) / 4.0;
  bool hand_ok = std::abs(hand1 - 0.104421) < 5e-7 && std::abs(hand2 - 0.275722) < 5e-7;
  {
    const Tensor2D z(2, 2, {1.0, 1.0, 1.0, -1.0});
    const Tensor2D t(1, 2, {1.0, 0.0});
    const auto b = al::LossBatch::make(z, {0, 0}, t);
    const double prod = al::tsupcon_loss(b).value;
    const double orc = oracle::tsupcon(fixtures::to_mat(z), {0, 0}, fixtures::to_mat(t));
    hand_ok = hand_ok && std::abs(prod - hand1) < 1e-12 && std::abs(orc - hand1) < 1e-12;
  }
  {
    const Tensor2D z(2, 2, {1.0, 0.0, 0.0, 1.0});
    const auto b = al::LossBatch::make(z, {0, 1}, z);
    const double prod = al::tsupcon_loss(b).value;
    const double orc = oracle::tsupcon(fixtures::to_mat(z), {0, 1}, fixtures::to_mat(z));
    hand_ok = hand_ok && std::abs(prod - hand2) < 1e-12 && std::abs(orc - hand2) < 1e-12;
  }
  SeededRng rng(2024);
  for (int f = 0; f < 100; ++f) {
    const std::size_t n = 1 + rng.uniform_int(12);
    const std::size_t k = 1 + rng.uniform_int(5);
    const std::size_t d = 2 + rng.uniform_int(7);
    const Tensor2D z = fixtures::random_unit_rows(rng, n, d);
    const Tensor2D t = fixtures::random_unit_rows(rng, k, d);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.uniform_int(k));
    const auto b = al::LossBatch::make(z, y, t);
    const auto zm = fixtures::to_mat(z), tm = fixtures::to_mat(t);
    worst = std::max(worst, std::abs(al::tsupcon_loss(b).value - oracle::tsupcon(zm, y, tm)));
    worst = std::max(worst, std::abs(al::supcon_loss(b).value - oracle::supcon(zm, y, tm)));
    worst = std::max(worst, std::abs(al::prototype_loss(b).value - oracle::prototype(zm, y, tm)));
  }
  return {worst <= 1e-10 && hand_ok,
          "100 fixtures x 3 losses, worst abs diff " + fmt("%.2e", worst) +
              (hand_ok ? ", hand values 0.104421 / 0.275722 matched" : ", hand values MISMATCH")};
}

// ---------------------------------------------------------------------------
// 3. Noiseless pipeline reaches the fixed point.

// Several root seeds, so a lucky draw cannot carry the criterion.
constexpr std::uint64_t kAcceptanceSeeds[] = {7, 5, 11};

Outcome noiseless_at(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = fixtures::scratch_dir("acceptance_noiseless_" + std::to_string(seed));
  PipelineConfig cfg = fixtures::small_config(dir, 0.0, 20, 5, 300);
  cfg.seed = seed;
  pipeline::Runner runner(cfg);
  const auto result = runner.run_all();
  const double miou = result["eval"]["miou"].get<double>();

  // Stage 1 quality against ground truth: the written annotations, plus the
  // full unbalanced automatic-mask set recomputed per image.
  const Manifest manifest = read_manifest(runner.paths().manifest());
  const TextPrototypeSet vocab = read_vocabulary(cfg.vocabulary_path());
  const AnnotationSet written = read_annotation_set(runner.paths().annotations(), vocab.size());
  std::map<std::string, SegmentationMap> gt;
  for (const auto* r : manifest.split(pipeline::kTrainSplit)) {
    gt[r->image_id] = *load_image_record(manifest, r->image_id, vocab.size(), kGroundTruth).ground_truth;
  }
  auto class_mask = [](const SegmentationMap& g, int k) {
    BinaryMask m(g.height, g.width);
    for (std::size_t p = 0; p < g.labels.size(); ++p) m.data[p] = g.labels[p] == k;
    return m;
  };
  double min_iou = 1.0;
  for (const auto& a : written) min_iou = std::min(min_iou, mask_iou(a.mask, class_mask(gt.at(a.image_id), a.class_id)));
  std::size_t s12 = 0, s12_ok = 0;
  auto det = cfg.detection;
  for (const auto* r : manifest.split(pipeline::kTrainSplit)) {
    const auto b = load_image_record(manifest, r->image_id, vocab.size(), kCrops | kMasks);
    const auto oracle = pipeline::make_oracle(b, cfg.backend);
    const auto out = pipeline::stage1_image(b, vocab, *oracle, det);
    for (const auto& a : out.point_prompt) {
      min_iou = std::min(min_iou, mask_iou(a.mask, class_mask(gt.at(a.image_id), a.class_id)));
    }
    for (const auto& a : out.auto_mask) {
      ++s12;
      s12_ok += mask_iou(a.mask, class_mask(gt.at(a.image_id), a.class_id)) == 1.0;
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = miou == 1.0 && min_iou == 1.0 && s12 > 0 && s12_ok == s12 && !written.empty() &&
                    secs < 60.0;
  std::ostringstream os;
  os << "seed " << seed << ": mIoU " << miou << ", min stage-1 mask IoU " << min_iou << " over "
     << written.size() << " written annotations, stage-1.2 labels " << s12_ok << "/" << s12
     << ", " << fmt("%.1f s", secs);
  return {pass, os.str()};
}

Outcome noiseless() {
  Outcome all{true, ""};
  for (const auto seed : kAcceptanceSeeds) {
    const Outcome o = noiseless_at(seed);
    all.pass = all.pass && o.pass;
    all.detail += (all.detail.empty() ? "" : "; ") + o.detail;
  }
  return all;
}

// ---------------------------------------------------------------------------
// 4. Noisy world: refined mIoU and loss ordering.

Outcome noisy_at(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t threads = fixtures::hardware_threads();
  const auto world = synth::generate_world(4, 16, 32, 0.1, derive_seed(seed, "world"));
  const auto vocab = world.vocabulary();
  const auto geo = fixtures::training_geometry();
  const auto train = fixtures::make_samples(world, geo, 1000, seed, "train", threads);
  const auto held_out = fixtures::make_samples(world, geo, 20, seed, "eval", threads);

  stage1::DetectionConfig det;
  det.seed = derive_seed(seed, "stage1");
  std::vector<pipeline::Stage1Output> per(train.size());
  parallel_for(train.size(), threads, [&](std::size_t i) {
    const synth::SceneMaskOracle oracle(train[i].scene);
    per[i] = pipeline::stage1_image(train[i].bundle, vocab, oracle, det);
  });
  AnnotationSet s11, s12;
  for (const auto& p : per) {
    s11.insert(s11.end(), p.point_prompt.begin(), p.point_prompt.end());
    s12.insert(s12.end(), p.auto_mask.begin(), p.auto_mask.end());
  }
  const AnnotationSet fused = stage1::fuse_and_balance(s11, s12, det.balance_ratio, det.seed);
  std::map<std::string, AnnotationSet> by_image;
  for (const auto& a : fused) by_image[a.image_id].push_back(a);
  std::vector<al::TrainingImage> images(train.size());
  parallel_for(train.size(), threads, [&](std::size_t i) {
    const auto& s = train[i];
    images[i] = pipeline::training_image(s.vision, by_image[s.bundle.record.image_id],
                                         geo.canvas, geo.canvas);
  });

  auto run = [&](al::LossKind kind) {
    al::TrainConfig tc;
    tc.epochs = 10;
    tc.batch_size = 5;
    tc.lr = 1.0;
    tc.loss = kind;
    tc.seed = derive_seed(seed, "train");
    const al::HeadShape shape{al::HeadVariant::kLinear, world.vision_dim, world.text_dim};
    const auto res = al::train(images, vocab.prototypes,
                               al::AlignmentHead::create(shape, derive_seed(seed, "head")), tc);
    std::vector<infer::ConfusionCounts> counts(held_out.size(), infer::ConfusionCounts(4));
    parallel_for(held_out.size(), threads, [&](std::size_t i) {
      const auto& s = held_out[i];
      const auto pred = pipeline::predict(res.head, s.vision, vocab.prototypes, geo.canvas,
                                          geo.canvas, true, s.bundle.auto_masks);
      counts[i].add(pred, s.image.ground_truth);
    });
    infer::ConfusionCounts total(4);
    for (const auto& c : counts) total.merge(c);
    return total.result().miou;
  };
  const double t = run(al::LossKind::kTSupCon);
  const double s = run(al::LossKind::kSupCon);
  const double p = run(al::LossKind::kPrototype);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool pass = t >= 0.90 && t >= s && s >= p - 0.02 && secs < 300.0;
  return {pass, "seed " + std::to_string(seed) + ": refined mIoU tsupcon " + fmt("%.4f", t) +
                    ", supcon " + fmt("%.4f", s) + ", prototype " + fmt("%.4f", p) + ", " +
                    fmt("%.1f s", secs)};
}

Outcome noisy() {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome all{true, ""};
  for (const auto seed : kAcceptanceSeeds) {
    const Outcome o = noisy_at(seed);
    all.pass = all.pass && o.pass;
    all.detail += (all.detail.empty() ? "" : "; ") + o.detail;
  }
  // The time budget covers all seeds together.
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  all.pass = all.pass && secs < 300.0;
  all.detail += "; total " + fmt("%.1f s", secs);
  return all;
}

// ---------------------------------------------------------------------------
// 5. Balancing keeps exactly 75% of the automatic-mask annotations.

Outcome balancing() {
  AnnotationSet set11, set12;
  for (int i = 0; i < 40; ++i) {
    set11.push_back({"a" + std::to_string(i), 0, BinaryMask(2, 2, 1), 1.0, AnnotationStage::kPointPrompt});
  }
  for (int i = 0; i < 1000; ++i) {
    set12.push_back({"b" + std::to_string(i), i % 3, BinaryMask(2, 2, 1), 0.98, AnnotationStage::kAutoMask});
  }
  const auto out = stage1::fuse_and_balance(set11, set12, 0.75, 42);
  const auto again = stage1::fuse_and_balance(set11, set12, 0.75, 42);
  std::size_t from12 = 0;
  std::set<std::string> ids;
  for (const auto& a : out) {
    from12 += a.stage == AnnotationStage::kAutoMask;
    ids.insert(a.image_id);
  }
  // The engine's output is fixed by the C++ standard: the 10000th draw of a
  // default-seeded mt19937_64 is 9981545732273789042.
  std::mt19937_64 reference;
  reference.discard(9999);
  SeededRng ours(5489);
  for (int i = 0; i < 9999; ++i) ours.next_u64();
  const bool engine_ok = ours.next_u64() == 9981545732273789042ULL && reference() == 9981545732273789042ULL;
  const bool pass = from12 == 750 && out.size() == 790 && ids.size() == 790 && out == again && engine_ok;
  return {pass, std::to_string(from12) + " of 1000 automatic-mask annotations kept, " +
                    std::to_string(out.size()) + " total, repeatable " + (out == again ? "yes" : "no") +
                    ", engine reference " + (engine_ok ? "ok" : "MISMATCH")};
}

// ---------------------------------------------------------------------------
// 6. Crop mosaic geometry and query-point mapping.

Outcome geometry() {
  SeededRng rng(3);
  std::vector<Tensor3D> crops;
  for (int c = 0; c < 16; ++c) {
    const Tensor2D rows = fixtures::random_unit_rows(rng, 24 * 24, 8);
    crops.push_back(Tensor3D::unflatten(rows, 24, 24));
  }
  const FeatureGrid grid = stage1::mosaic_crop_features("m", crops, 4, 4);
  bool placed = grid.height() == 96 && grid.width() == 96;
  for (std::size_t r = 0; r < 4 && placed; ++r)
    for (std::size_t c = 0; c < 4 && placed; ++c)
      for (std::size_t i = 0; i < 24 && placed; ++i)
        for (std::size_t j = 0; j < 24 && placed; ++j) {
          const auto a = grid.features.cell(r * 24 + i, c * 24 + j);
          const auto b = crops[r * 4 + c].cell(i, j);
          placed = std::equal(a.begin(), a.end(), b.begin());
        }
  const auto back = stage1::demosaic(grid, 4, 4);
  bool exact = back.size() == 16;
  for (std::size_t i = 0; i < back.size() && exact; ++i) exact = back[i].data() == crops[i].data();

  Tensor2D heat(96, 96, 0.0);
  heat(0, 0) = 1.0;
  const auto pts = stage1::select_query_points(heat, 1, 14.0, 1344.0, 518.0);
  const bool point_ok = pts.size() == 1 && pts[0][0] == 3 && pts[0][1] == 3;
  return {placed && exact && point_ok,
          std::string("16 crops of 24x24 -> ") + std::to_string(grid.height()) + "x" +
              std::to_string(grid.width()) + ", demosaic " + (exact ? "bit-exact" : "DIFFERS") +
              ", query point (" + std::to_string(pts[0][0]) + "," + std::to_string(pts[0][1]) + ")"};
}

// ---------------------------------------------------------------------------
// 7. mIoU against per-pixel counting.

Outcome metric() {
  SeededRng rng(77);
  bool all = true;
  std::size_t with_ignore = 0;
  for (int f = 0; f < 50; ++f) {
    const int k = 2 + static_cast<int>(rng.uniform_int(5));
    SegmentationMap pred(16, 16), gt(16, 16);
    for (auto& v : pred.labels) v = static_cast<std::int32_t>(rng.uniform_int(k));
    for (auto& v : gt.labels) {
      v = rng.uniform() < 0.1 ? SegmentationMap::kIgnoreLabel
                              : static_cast<std::int32_t>(rng.uniform_int(k));
    }
    with_ignore += std::count(gt.labels.begin(), gt.labels.end(), SegmentationMap::kIgnoreLabel) > 0;
    infer::EvalProtocol proto;
    proto.num_classes = static_cast<std::size_t>(k);
    infer::ConfusionCounts cc(proto.num_classes);
    cc.add(pred, gt);
    const auto expect = oracle::count_miou({std::vector<int>(pred.labels.begin(), pred.labels.end())},
                                           {std::vector<int>(gt.labels.begin(), gt.labels.end())}, k);
    for (int c = 0; c < k; ++c) {
      all = all && cc.intersection(static_cast<std::size_t>(c)) == expect.counts[c].inter &&
            cc.union_count(static_cast<std::size_t>(c)) == expect.counts[c].uni;
    }
    const auto got = infer::miou(pred, gt, proto);
    all = all && expect.miou && got.miou == *expect.miou;
  }
  return {all && with_ignore > 0,
          "50 random 16x16 pairs, counts and mIoU " + std::string(all ? "identical" : "DIFFER") +
              ", " + std::to_string(with_ignore) + " with ignored pixels"};
}

// ---------------------------------------------------------------------------
// 8. Two identical runs produce identical bytes.

Outcome determinism() {
  auto run = [](const std::string& name, std::size_t threads) {
    const auto dir = fixtures::scratch_dir(name);
    PipelineConfig cfg = fixtures::small_config(dir, 0.1, 12, 4, 3);
    cfg.threads = threads;
    pipeline::Runner(cfg).run_all();
    auto files = fixtures::tree_bytes(dir / "dataset");
    for (auto& [k, v] : fixtures::tree_bytes(dir / "output")) files["output/" + k] = std::move(v);
    return files;
  };
  const auto a = run("acceptance_det_a", 1);
  const auto b = run("acceptance_det_b", fixtures::hardware_threads() > 1 ? 4 : 1);
  std::size_t differing = 0;
  for (const auto& [k, v] : a) {
    const auto it = b.find(k);
    differing += it == b.end() || it->second != v;
  }
  differing += b.size() > a.size() ? b.size() - a.size() : 0;
  const auto has = [&](const std::string& prefix) {
    for (const auto& [k, _] : a)
      if (k.rfind(prefix, 0) == 0) return true;
    return false;
  };
  const bool covers = has("annotations/") && has("output/checkpoint/") &&
                      has("output/predictions/") && has("output/report.json");
  return {differing == 0 && covers && !a.empty(),
          std::to_string(a.size()) + " files compared (1 vs 4 threads), " +
              std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients}, {"loss oracle equivalence", loss_oracle},
      {"noiseless fixed point", noiseless}, {"noisy convergence", noisy},
      {"balancing exactness", balancing},  {"geometry", geometry},
      {"metric oracle", metric},           {"determinism", determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
