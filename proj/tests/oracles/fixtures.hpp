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

// Seeded fixtures shared by the unit and acceptance tests.

#ifndef FMSEG_TESTS_FIXTURES_HPP_
#define FMSEG_TESTS_FIXTURES_HPP_

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "fmseg/align.hpp"
#include "fmseg/config.hpp"
#include "fmseg/exchange.hpp"
#include "fmseg/parallel.hpp"
#include "fmseg/pipeline.hpp"
#include "fmseg/synthworld.hpp"
#include "loss_oracle.hpp"

namespace fixtures {

using namespace fmseg;

inline Tensor2D random_unit_rows(SeededRng& rng, std::size_t n, std::size_t d) {
  Tensor2D m(n, d);
  for (auto& v : m.data()) v = rng.normal();
  return l2_normalize_rows(m);
}

inline Tensor2D random_matrix(SeededRng& rng, std::size_t n, std::size_t d) {
  Tensor2D m(n, d);
  for (auto& v : m.data()) v = rng.normal();
  return m;
}

inline oracle::Mat to_mat(const Tensor2D& t) {
  oracle::Mat out(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) out[r].assign(t.row(r).begin(), t.row(r).end());
  return out;
}

/// Geometry used by the training fixtures: a 6x6 self-supervised grid
/// (32 px patches) with rectangles snapped to that pitch.
inline synth::SceneGeometry training_geometry() {
  synth::SceneGeometry g;
  g.vision_grid = 6;
  g.align_px = 32;
  return g;
}

/// One rendered scene held in memory in the same shape the loaders produce.
struct Sample {
  synth::SyntheticScene scene;
  synth::RenderedImage image;
  ImageBundle bundle;
  FeatureGrid vision;
};

inline std::vector<Sample> make_samples(const synth::SyntheticWorld& world,
                                        const synth::SceneGeometry& geo, std::size_t count,
                                        std::uint64_t seed, const std::string& prefix,
                                        std::size_t threads = 1) {
  SeededRng rng(derive_seed(seed, prefix));
  std::vector<Sample> out(count);
  for (auto& s : out) s.scene = synth::generate_scene(world, geo, rng);
  parallel_for(count, threads, [&](std::size_t i) {
    Sample& s = out[i];
    const std::string id = prefix + "_" + std::to_string(i);
    const std::uint64_t is = image_seed(seed, id);
    s.image = synth::render_scene(world, s.scene, geo, is);
    ImageBundle& b = s.bundle;
    b.record.image_id = id;
    b.record.height = b.record.width = geo.canvas;
    b.record.crop_rows = b.record.crop_cols = geo.crop_grid;
    b.record.grid_h = b.record.grid_w = geo.clip_grid();
    b.record.patch_px = geo.patch_px;
    b.record.synthetic_scene = synth::scene_to_json(s.scene);
    b.crop_features = s.image.crop_features;
    b.cls_tokens = s.image.cls_tokens;
    b.clip_grid = FeatureGrid{id, s.image.clip_grid};
    b.auto_masks = synth::oracle_auto_masks(s.scene, is);
    b.ground_truth = s.image.ground_truth;
    s.vision = FeatureGrid{id, s.image.vision_features};
    b.vision_grid = s.vision;
  });
  return out;
}

/// A small synthetic pipeline config rooted in `dir`.
inline PipelineConfig small_config(const std::filesystem::path& dir, double sigma,
                                   std::size_t train_scenes, std::size_t eval_scenes,
                                   std::size_t epochs) {
  PipelineConfig c;
  c.seed = 7;
  c.dataset = dir / "dataset";
  c.output = dir / "output";
  c.synthetic.sigma = sigma;
  c.synthetic.train_scenes = train_scenes;
  c.synthetic.eval_scenes = eval_scenes;
  c.synthetic.geometry = training_geometry();
  c.train.epochs = epochs;
  c.train.lr = 1.0;
  c.refined = true;
  return c;
}

/// Every regular file under `root`, keyed by relative path.
inline std::map<std::string, std::vector<std::uint8_t>> tree_bytes(
    const std::filesystem::path& root) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    out[std::filesystem::relative(e.path(), root).generic_string()] =
        fmseg::detail::read_file_bytes(e.path());
  }
  return out;
}

/// Fresh empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("fmseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::size_t hardware_threads() {
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace fixtures

#endif  // FMSEG_TESTS_FIXTURES_HPP_
