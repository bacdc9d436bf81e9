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

// Subcommands over a dataset directory:
//   <dataset>/manifest.json, vocab.json, tensors/, masks/   (synth or exporter)
//   <dataset>/annotations/annotations.json + masks/          (stage1)
//   <output>/checkpoint/, predictions/<id>.fmt, report.json  (train, infer, eval)
//   <output>/runs/<command>.json                             (every command)
// Stage 1 and training read the "train" split; infer and eval the "eval" split.

#ifndef FMSEG_PIPELINE_HPP_
#define FMSEG_PIPELINE_HPP_

#include <cstdint>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fmseg/align.hpp"
#include "fmseg/config.hpp"
#include "fmseg/error.hpp"
#include "fmseg/exchange.hpp"
#include "fmseg/infer.hpp"
#include "fmseg/log.hpp"
#include "fmseg/parallel.hpp"
#include "fmseg/stage1.hpp"
#include "fmseg/synthworld.hpp"

namespace fmseg::pipeline {

inline constexpr const char* kTrainSplit = "train";
inline constexpr const char* kEvalSplit = "eval";

/// Every random stream of a run, derived from the root seed.
struct Seeds {
  std::uint64_t world, scenes, render, stage1, head_init, train;

  static Seeds from_root(std::uint64_t root) {
    return {derive_seed(root, "world"), derive_seed(root, "scenes"), derive_seed(root, "render"),
            derive_seed(root, "stage1"), derive_seed(root, "head"),  derive_seed(root, "train")};
  }

  nlohmann::json to_json() const {
    return {{"world", world},       {"scenes", scenes},       {"render", render},
            {"stage1", stage1},     {"head_init", head_init}, {"train", train}};
  }
};

struct Paths {
  fs::path dataset, output;

  fs::path manifest() const { return dataset / "manifest.json"; }
  fs::path annotations() const { return dataset / "annotations" / "annotations.json"; }
  fs::path checkpoint() const { return output / "checkpoint"; }
  fs::path training_log() const { return output / "checkpoint" / "train_log.jsonl"; }
  fs::path predictions() const { return output / "predictions"; }
  fs::path prediction(const std::string& id) const { return predictions() / (id + ".fmt"); }
  fs::path report() const { return output / "report.json"; }
  fs::path run(const std::string& command) const { return output / "runs" / (command + ".json"); }
};

// ---------------------------------------------------------------------------
// Per-image building blocks, shared by the subcommands and the tests.

struct Stage1Output {
  AnnotationSet point_prompt;  // stage 1.1
  AnnotationSet auto_mask;     // stage 1.2
};

/// Both Stage 1 passes on one image.
inline Stage1Output stage1_image(const ImageBundle& bundle, const TextPrototypeSet& vocab,
                                 const MaskOracle& oracle, const stage1::DetectionConfig& cfg) {
  const FeatureGrid grid = stage1::image_grid(bundle);
  const auto detected = stage1::detected_classes(bundle, vocab, cfg);
  Stage1Output out;
  out.point_prompt = stage1::stage11_generate(bundle, grid, vocab, oracle, cfg, detected);
  out.auto_mask = stage1::stage12_label(bundle.record.image_id, grid, vocab, detected,
                                        bundle.auto_masks, cfg);
  return out;
}

/// The point-prompt oracle for one record under the configured backend.
inline std::unique_ptr<MaskOracle> make_oracle(const ImageBundle& bundle, Backend backend) {
  if (backend == Backend::kSynthetic) {
    if (!bundle.record.synthetic_scene) {
      throw ValidationError(bundle.record.image_id +
                            ": synthetic backend needs a synthetic_scene record");
    }
    return std::make_unique<synth::SceneMaskOracle>(
        synth::scene_from_json(*bundle.record.synthetic_scene));
  }
  return std::make_unique<stage1::FileMaskOracle>(bundle.point_masks);
}

/// Patch labels for one image's vision grid from its annotations.
inline align::TrainingImage training_image(const FeatureGrid& vision, const AnnotationSet& anns,
                                           std::size_t image_h, std::size_t image_w) {
  const auto labels =
      align::assign_patch_labels(anns, vision.height(), vision.width(), image_h, image_w);
  return align::TrainingImage::from_grid(vision, labels);
}

/// Base or refined segmentation of one image at pixel resolution.
inline SegmentationMap predict(const align::AlignmentHead& head, const FeatureGrid& vision,
                               const Tensor2D& prototypes, std::size_t image_h,
                               std::size_t image_w, bool refined,
                               std::span<const MaskProposal> auto_masks) {
  const auto cls = infer::classify_patches(head, vision, prototypes);
  SegmentationMap base = infer::base_segmentation(cls.sim, image_h, image_w);
  if (!refined) return base;
  std::vector<BinaryMask> masks;
  masks.reserve(auto_masks.size());
  for (const auto& m : auto_masks) masks.push_back(m.mask);
  return infer::refined_segmentation(base, masks, cls.argmax);
}

// ---------------------------------------------------------------------------
// Subcommands.

class Runner {
 public:
  explicit Runner(PipelineConfig config)
      : cfg_(std::move(config)), seeds_(Seeds::from_root(cfg_.seed)),
        paths_{cfg_.dataset, cfg_.output} {
    cfg_.validate();
    cfg_.detection.seed = seeds_.stage1;
    cfg_.train.seed = seeds_.train;
  }

  const PipelineConfig& config() const { return cfg_; }
  const Paths& paths() const { return paths_; }

  /// Renders the synthetic world into the dataset directory.
  nlohmann::json synth() {
    if (cfg_.backend != Backend::kSynthetic) {
      throw ConfigError("synth requires backend.kind = \"synthetic\"");
    }
    const auto& s = cfg_.synthetic;
    const auto world =
        synth::generate_world(s.num_classes, s.text_dim, s.vision_dim, s.sigma, seeds_.world);
    struct Item {
      std::string id, split;
      synth::SyntheticScene scene;
    };
    std::vector<Item> items;
    SeededRng rng(seeds_.scenes);
    auto name = [](const char* split, std::size_t i) {
      std::ostringstream os;
      os << split << '_' << std::setw(5) << std::setfill('0') << i;
      return os.str();
    };
    for (std::size_t i = 0; i < s.train_scenes + s.eval_scenes; ++i) {
      const bool train = i < s.train_scenes;
      const char* split = train ? kTrainSplit : kEvalSplit;
      items.push_back({name(split, train ? i : i - s.train_scenes), split,
                       synth::generate_scene(world, s.geometry, rng, s.min_crop_votes,
                                             s.max_regions)});
    }
    Manifest manifest;
    manifest.root = paths_.dataset;
    manifest.images.resize(items.size());
    parallel_for(items.size(), cfg_.threads, [&](std::size_t i) {
      const auto& it = items[i];
      const std::uint64_t seed = image_seed(seeds_.render, it.id);
      const auto img = synth::render_scene(world, it.scene, s.geometry, seed);
      const auto masks = synth::oracle_auto_masks(it.scene, seed);
      manifest.images[i] =
          synth::export_image(paths_.dataset, it.id, it.split, it.scene, img, s.geometry, masks);
    });
    write_vocabulary(paths_.dataset / "vocab.json", world.vocabulary());
    write_manifest(paths_.manifest(), manifest);
    nlohmann::json summary = {{"train_images", s.train_scenes}, {"eval_images", s.eval_scenes}};
    write_run("synth", summary);
    return summary;
  }

  /// Pseudo-labels the training split.
  nlohmann::json stage1() {
    const Manifest manifest = load_manifest();
    const TextPrototypeSet vocab = load_vocabulary();
    const auto records = manifest.split(kTrainSplit);
    if (records.empty()) throw ValidationError("dataset has no training images");
    std::vector<Stage1Output> per_image(records.size());
    parallel_for(records.size(), cfg_.threads, [&](std::size_t i) {
      const ImageBundle b =
          load_image_record(manifest, records[i]->image_id, vocab.size(), kCrops | kMasks);
      const auto oracle = make_oracle(b, cfg_.backend);
      per_image[i] = stage1_image(b, vocab, *oracle, cfg_.detection);
    });
    AnnotationSet set11, set12;
    for (auto& o : per_image) {
      for (auto& a : o.point_prompt) set11.push_back(std::move(a));
      for (auto& a : o.auto_mask) set12.push_back(std::move(a));
    }
    const AnnotationSet fused = stage1::fuse_and_balance(set11, set12, cfg_.detection.balance_ratio,
                                                         cfg_.detection.seed);
    fs::remove_all(paths_.annotations().parent_path());
    write_annotation_set(paths_.annotations(), fused, vocab.size());
    nlohmann::json summary = {{"images", records.size()},
                              {"point_prompt_annotations", set11.size()},
                              {"auto_mask_annotations", set12.size()},
                              {"fused_annotations", fused.size()}};
    log::info("stage1_done", summary);
    write_run("stage1", summary);
    return summary;
  }

  /// Trains the alignment head on Stage 1 pseudo-labels.
  nlohmann::json train() {
    const Manifest manifest = load_manifest();
    const TextPrototypeSet vocab = load_vocabulary();
    require_input(paths_.annotations(), "annotations (run stage1 first)");
    const AnnotationSet anns = read_annotation_set(paths_.annotations(), vocab.size());
    const auto records = manifest.split(kTrainSplit);
    if (records.empty()) throw ValidationError("dataset has no training images");
    std::vector<align::TrainingImage> images(records.size());
    parallel_for(records.size(), cfg_.threads, [&](std::size_t i) {
      const ImageRecord& r = *records[i];
      const ImageBundle b = load_image_record(manifest, r.image_id, vocab.size(), kVision);
      AnnotationSet mine;
      for (const auto& a : anns)
        if (a.image_id == r.image_id) mine.push_back(a);
      images[i] = training_image(*b.vision_grid, mine, r.height, r.width);
    });
    const align::HeadShape shape{cfg_.head_variant, images.front().features.cols(), vocab.dim(),
                                 cfg_.head_hidden, cfg_.head_num_heads};
    for (const auto& im : images) {
      if (im.features.cols() != shape.in_dim) {
        throw ValidationError(im.image_id + ": vision feature width differs across images");
      }
    }
    auto head = align::AlignmentHead::create(shape, seeds_.head_init);
    auto result = align::train(images, vocab.prototypes, std::move(head), cfg_.train,
                               [](const align::StepRecord& r) {
                                 log::debug("train_step", {{"step", r.step}, {"lr", r.lr},
                                                           {"loss", r.loss}});
                               });
    fs::remove_all(paths_.checkpoint());
    align::write_checkpoint(paths_.checkpoint(), result.head, result.steps);
    align::write_training_log(paths_.training_log(), result.log);
    nlohmann::json summary = {{"images", images.size()}, {"steps", result.steps}};
    summary["final_loss"] =
        result.log.empty() ? nlohmann::json() : nlohmann::json(result.log.back().loss);
    log::info("train_done", summary);
    write_run("train", summary);
    return summary;
  }

  /// Writes one prediction map per evaluation image.
  nlohmann::json infer(std::optional<bool> refined_override = {}) {
    const bool refined = refined_override.value_or(cfg_.refined);
    const Manifest manifest = load_manifest();
    const TextPrototypeSet vocab = load_vocabulary();
    require_input(paths_.checkpoint() / "head.json", "checkpoint (run train first)");
    const auto ckpt = align::read_checkpoint(paths_.checkpoint());
    if (ckpt.head.shape().out_dim != vocab.dim()) {
      throw ValidationError("checkpoint output width does not match the vocabulary");
    }
    const auto records = manifest.split(kEvalSplit);
    if (records.empty()) throw ValidationError("dataset has no evaluation images");
    fs::remove_all(paths_.predictions());
    parallel_for(records.size(), cfg_.threads, [&](std::size_t i) {
      const ImageRecord& r = *records[i];
      const ImageBundle b = load_image_record(manifest, r.image_id, vocab.size(),
                                              kVision | (refined ? kMasks : 0u));
      const auto pred = predict(ckpt.head, *b.vision_grid, vocab.prototypes, r.height, r.width,
                                refined, b.auto_masks);
      write_segmentation(paths_.prediction(r.image_id), pred);
    });
    nlohmann::json summary = {{"images", records.size()}, {"refined", refined}};
    write_run("infer", summary);
    return summary;
  }

  /// Scores the prediction maps against ground truth.
  nlohmann::json eval() {
    const Manifest manifest = load_manifest();
    const TextPrototypeSet vocab = load_vocabulary();
    const auto protocol = cfg_.eval_protocol(vocab.size());
    protocol.validate();
    const auto records = manifest.split(kEvalSplit);
    if (records.empty()) throw ValidationError("dataset has no evaluation images");
    std::vector<infer::ConfusionCounts> counts(
        records.size(), infer::ConfusionCounts(vocab.size(), protocol.ignore_label));
    parallel_for(records.size(), cfg_.threads, [&](std::size_t i) {
      const ImageRecord& r = *records[i];
      if (!r.ground_truth) throw ValidationError(r.image_id + ": no ground truth");
      require_input(paths_.prediction(r.image_id), "prediction (run infer first)");
      const ImageBundle b = load_image_record(manifest, r.image_id, vocab.size(), kGroundTruth);
      const auto pred = read_segmentation(paths_.prediction(r.image_id));
      counts[i].add(infer::remap_background(pred, protocol),
                    infer::remap_background(*b.ground_truth, protocol));
    });
    infer::ConfusionCounts total(vocab.size(), protocol.ignore_label);
    for (const auto& c : counts) total.merge(c);
    const auto report = infer::report_json(total.result());
    write_json(paths_.report(), report);
    log::info("eval_done", {{"miou", report["miou"]}});
    write_run("eval", report);
    return report;
  }

  /// synth (synthetic backend only), stage1, train, infer, eval.
  nlohmann::json run_all(std::optional<bool> refined_override = {}) {
    nlohmann::json out;
    if (cfg_.backend == Backend::kSynthetic) out["synth"] = synth();
    out["stage1"] = stage1();
    out["train"] = train();
    out["infer"] = infer(refined_override);
    out["eval"] = eval();
    write_run("pipeline", out);
    return out;
  }

 private:
  Manifest load_manifest() const {
    require_input(paths_.manifest(), "dataset manifest");
    return read_manifest(paths_.manifest());
  }

  TextPrototypeSet load_vocabulary() const {
    const fs::path p = cfg_.vocabulary_path();
    require_input(p, "vocabulary");
    return read_vocabulary(p);
  }

  static void require_input(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw IoError("missing " + what + ": '" + p.string() + "'");
  }

  void write_run(const std::string& command, const nlohmann::json& summary) const {
    write_json(paths_.run(command), {{"command", command},
                                     {"config_hash", cfg_.hash()},
                                     {"config", cfg_.effective_json()},
                                     {"seed", cfg_.seed},
                                     {"seeds", seeds_.to_json()},
                                     {"summary", summary}});
  }

  PipelineConfig cfg_;
  Seeds seeds_;
  Paths paths_;
};

}  // namespace fmseg::pipeline

#endif  // FMSEG_PIPELINE_HPP_
