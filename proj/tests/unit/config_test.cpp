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

#include <string>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "fmseg/config.hpp"

namespace fmseg {
namespace {

const fs::path kBase = "/cfg/base";

TEST(Config, DefaultsFromEmptyFile) {
  const auto c = parse_config("", kBase);
  EXPECT_EQ(c.seed, 0u);
  EXPECT_EQ(c.detection.vote_threshold, 1);
  EXPECT_EQ(c.detection.query_points, 5u);
  EXPECT_EQ(c.detection.auto_mask_confidence, 0.97);
  EXPECT_EQ(c.detection.balance_ratio, 0.75);
  EXPECT_EQ(c.train.epochs, 10u);
  EXPECT_EQ(c.train.batch_size, 5u);
  EXPECT_EQ(c.train.lr, 0.1);
  EXPECT_EQ(c.train.momentum, 0.0);
  EXPECT_EQ(c.train.loss, align::LossKind::kTSupCon);
  EXPECT_EQ(c.dataset, kBase / "dataset");
  EXPECT_EQ(c.vocabulary_path(), kBase / "dataset" / "vocab.json");
}

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"noiseless.toml", "noisy.toml"}) {
    const auto c = load_config(fs::path(FMSEG_CONFIG_DIR) / name);
    EXPECT_EQ(c.train.lr, 1.0) << name;
    EXPECT_EQ(c.synthetic.geometry.vision_grid, 6u) << name;
  }
}

TEST(Config, RelativePathsResolveAgainstTheFile) {
  const auto c = parse_config(
      "[paths]\ndataset = \"../data\"\noutput = \"/abs/out\"\nvocabulary = \"v.json\"\n", kBase);
  EXPECT_EQ(c.dataset, fs::path("/cfg/data"));
  EXPECT_EQ(c.output, fs::path("/abs/out"));
  EXPECT_EQ(c.vocabulary_path(), kBase / "v.json");
}

TEST(Config, UnknownKeysRejected) {
  EXPECT_THROW(parse_config("colour = 1\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[train]\nepoch = 3\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[model]\nx = 1\n", kBase), ConfigError);
  try {
    parse_config("[stage1]\nthreshold = 2\n", kBase);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage1.threshold"), std::string::npos) << e.what();
  }
}

TEST(Config, TypeAndRangeErrors) {
  EXPECT_THROW(parse_config("seed = \"seven\"\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("threads = -1\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("threads = 0\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[train]\nlr = -0.5\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[train]\nloss = \"triplet\"\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[head]\nvariant = \"conv\"\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[backend]\nkind = \"cloud\"\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[stage1]\nbalance_ratio = 1.5\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[eval]\nbackground_classes = [1]\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("[synthetic]\nnum_classes = 1\n", kBase), ConfigError);
  EXPECT_THROW(parse_config("seed = \n", kBase), ConfigError);  // syntax
  EXPECT_THROW(load_config("/nonexistent/fmseg.toml"), ConfigError);
}

TEST(Config, LargeSeedAndIntegerFloats) {
  const auto c = parse_config("seed = 9223372036854775807\n[train]\nlr = 1\n", kBase);
  EXPECT_EQ(c.seed, 9223372036854775807ULL);
  EXPECT_EQ(c.train.lr, 1.0);
}

TEST(Config, HashIgnoresPathsAndThreads) {
  const auto a = parse_config("seed = 3\n", kBase);
  const auto b = parse_config("seed = 3\nthreads = 8\n[paths]\noutput = \"x\"\n", "/else");
  const auto c = parse_config("seed = 4\n", kBase);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), c.hash());
  EXPECT_EQ(a.hash().size(), 16u);
}

TEST(Config, EvalProtocolCarriesBackground) {
  const auto c = parse_config("[eval]\nbackground_id = 0\nbackground_classes = [2, 3]\n", kBase);
  const auto p = c.eval_protocol(4);
  EXPECT_EQ(p.background_id, 0);
  EXPECT_EQ(p.background_classes, (std::set<std::int32_t>{2, 3}));
}

}  // namespace
}  // namespace fmseg
