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

// TOML pipeline configuration. Every key is optional; unknown keys and
// tables are errors. Relative paths resolve against the config file.

#ifndef FMSEG_CONFIG_HPP_
#define FMSEG_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fmseg/align/heads.hpp"
#include "fmseg/align/losses.hpp"
#include "fmseg/align/train.hpp"
#include "fmseg/error.hpp"
#include "fmseg/infer.hpp"
#include "fmseg/stage1.hpp"
#include "fmseg/synthworld.hpp"

#define TOML_EXCEPTIONS 1
#include "toml.hpp"

namespace fmseg {

enum class Backend { kSynthetic, kFiles };

struct SyntheticConfig {
  std::size_t num_classes = 4;
  std::size_t text_dim = 16;
  std::size_t vision_dim = 32;
  double sigma = 0.0;
  std::size_t train_scenes = 20;
  std::size_t eval_scenes = 5;
  std::size_t max_regions = 3;
  std::size_t min_crop_votes = 2;
  synth::SceneGeometry geometry;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::filesystem::path dataset = "dataset";
  std::optional<std::filesystem::path> vocabulary;  // default <dataset>/vocab.json
  std::filesystem::path output = "output";
  Backend backend = Backend::kSynthetic;
  SyntheticConfig synthetic;
  stage1::DetectionConfig detection;
  align::HeadVariant head_variant = align::HeadVariant::kLinear;
  std::size_t head_hidden = 64;
  std::size_t head_num_heads = 4;
  align::TrainConfig train;
  bool refined = false;
  std::optional<std::int32_t> background_id;
  std::set<std::int32_t> background_classes;

  std::filesystem::path vocabulary_path() const {
    return vocabulary ? *vocabulary : dataset / "vocab.json";
  }

  void validate() const {
    if (threads == 0) throw ConfigError("threads must be >= 1");
    const auto& s = synthetic;
    if (s.num_classes < 2) throw ConfigError("synthetic.num_classes must be >= 2");
    if (s.text_dim < s.num_classes) throw ConfigError("synthetic.text_dim must be >= num_classes");
    if (s.vision_dim < s.text_dim) throw ConfigError("synthetic.vision_dim must be >= text_dim");
    if (!(s.sigma >= 0.0)) throw ConfigError("synthetic.sigma must be >= 0");
    if (s.max_regions == 0) throw ConfigError("synthetic.max_regions must be >= 1");
    try {
      s.geometry.validate();
    } catch (const DomainError& e) {
      throw ConfigError(std::string("synthetic: ") + e.what());
    }
    detection.validate();
    train.validate();
    if (head_hidden == 0) throw ConfigError("head.hidden must be >= 1");
    if (head_num_heads == 0) throw ConfigError("head.num_heads must be >= 1");
    if (!background_classes.empty() && !background_id) {
      throw ConfigError("eval.background_classes requires eval.background_id");
    }
  }

  /// Everything that influences output bytes. Paths and threads are left out
  /// so relocated or parallel runs hash the same.
  nlohmann::json effective_json() const {
    const auto& s = synthetic;
    const auto& g = s.geometry;
    const auto& d = detection;
    nlohmann::json eval = {{"background_classes", background_classes}};
    eval["background_id"] = background_id ? nlohmann::json(*background_id) : nlohmann::json();
    return {
        {"seed", seed},
        {"backend", backend == Backend::kSynthetic ? "synthetic" : "files"},
        {"synthetic",
         {{"num_classes", s.num_classes}, {"text_dim", s.text_dim}, {"vision_dim", s.vision_dim},
          {"sigma", s.sigma}, {"train_scenes", s.train_scenes}, {"eval_scenes", s.eval_scenes},
          {"max_regions", s.max_regions}, {"min_crop_votes", s.min_crop_votes},
          {"canvas", g.canvas}, {"crop_grid", g.crop_grid}, {"crop_patches", g.crop_patches},
          {"vision_grid", g.vision_grid}, {"patch_px", g.patch_px}, {"align_px", g.align_px}}},
        {"stage1",
         {{"vote_threshold", d.vote_threshold}, {"strict_votes", d.strict_votes},
          {"semi_supervised", d.semi_supervised}, {"query_points", d.query_points},
          {"mask_space", d.mask_space}, {"auto_mask_confidence", d.auto_mask_confidence},
          {"auto_mask_min_area", d.auto_mask_min_area}, {"balance_ratio", d.balance_ratio}}},
        {"head",
         {{"variant", align::variant_name(head_variant)}, {"hidden", head_hidden},
          {"num_heads", head_num_heads}}},
        {"train",
         {{"epochs", train.epochs}, {"batch_size", train.batch_size}, {"lr", train.lr},
          {"momentum", train.momentum}, {"loss", align::loss_name(train.loss)},
          {"temperature", train.temperature}}},
        {"infer", {{"refined", refined}}},
        {"eval", eval}};
  }

  /// 16 hex digits of FNV-1a over the canonical effective config.
  std::string hash() const {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << fnv1a64(effective_json().dump());
    return os.str();
  }

  infer::EvalProtocol eval_protocol(std::size_t num_classes) const {
    infer::EvalProtocol p;
    p.num_classes = num_classes;
    p.background_id = background_id;
    p.background_classes = background_classes;
    return p;
  }
};

namespace detail {

/// Reads keys out of one TOML table and remembers which were consumed.
class TableReader {
 public:
  TableReader(const toml::table* table, std::string prefix)
      : table_(table), prefix_(std::move(prefix)) {}

  template <class T>
  void get(const std::string& key, T& out) {
    const toml::node* node = find(key);
    if (node == nullptr) return;
    if constexpr (std::is_same_v<T, bool>) {
      const auto v = node->value_exact<bool>();
      if (!v) fail(key, "expected a boolean");
      out = *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
      const auto v = node->value_exact<std::string>();
      if (!v) fail(key, "expected a string");
      out = *v;
    } else if constexpr (std::is_floating_point_v<T>) {
      const auto v = node->value<double>();  // integers promote
      if (!v) fail(key, "expected a number");
      out = *v;
    } else {
      const auto v = node->value_exact<std::int64_t>();
      if (!v) fail(key, "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (*v < 0) fail(key, "must be non-negative");
        if (static_cast<std::uint64_t>(*v) > std::numeric_limits<T>::max()) {
          fail(key, "out of range");
        }
      } else if (*v > std::numeric_limits<T>::max() || *v < std::numeric_limits<T>::min()) {
        fail(key, "out of range");
      }
      out = static_cast<T>(*v);
    }
  }

  void get_int_list(const std::string& key, std::set<std::int32_t>& out) {
    const toml::node* node = find(key);
    if (node == nullptr) return;
    const toml::array* arr = node->as_array();
    if (arr == nullptr) fail(key, "expected an array of integers");
    out.clear();
    for (const auto& e : *arr) {
      const auto v = e.value_exact<std::int64_t>();
      if (!v || *v < 0 || *v > std::numeric_limits<std::int32_t>::max()) {
        fail(key, "expected an array of non-negative integers");
      }
      out.insert(static_cast<std::int32_t>(*v));
    }
  }

  bool has(const std::string& key) const {
    return table_ != nullptr && table_->contains(key);
  }

  /// Marks a sub-table as consumed and returns it (or nullptr).
  const toml::table* table(const std::string& key) {
    const toml::node* node = find(key);
    if (node == nullptr) return nullptr;
    const toml::table* t = node->as_table();
    if (t == nullptr) fail(key, "expected a table");
    return t;
  }

  void reject_unknown() const {
    if (table_ == nullptr) return;
    for (const auto& [k, _] : *table_) {
      const std::string key(k.str());
      if (!seen_.contains(key)) throw ConfigError("unknown key '" + prefix_ + key + "'");
    }
  }

 private:
  const toml::node* find(const std::string& key) {
    seen_.insert(key);
    if (table_ == nullptr) return nullptr;
    return table_->get(key);
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError("'" + prefix_ + key + "': " + msg);
  }

  const toml::table* table_;
  std::string prefix_;
  std::set<std::string> seen_;
};

inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

}  // namespace detail

/// Parses TOML text. `base_dir` anchors relative paths.
inline PipelineConfig parse_config(std::string_view text, const std::filesystem::path& base_dir,
                                   std::string_view source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << e.source().begin.line << ": " << e.description();
    throw ConfigError(os.str());
  }
  PipelineConfig c;
  detail::TableReader top(&root, "");
  top.get("seed", c.seed);
  top.get("threads", c.threads);

  {
    detail::TableReader t(top.table("paths"), "paths.");
    std::string dataset = c.dataset.string(), output = c.output.string(), vocab;
    t.get("dataset", dataset);
    t.get("output", output);
    t.get("vocabulary", vocab);
    c.dataset = detail::resolve(base_dir, dataset);
    c.output = detail::resolve(base_dir, output);
    if (!vocab.empty()) c.vocabulary = detail::resolve(base_dir, vocab);
    t.reject_unknown();
  }
  {
    detail::TableReader t(top.table("backend"), "backend.");
    std::string kind = "synthetic";
    t.get("kind", kind);
    if (kind == "synthetic") {
      c.backend = Backend::kSynthetic;
    } else if (kind == "files") {
      c.backend = Backend::kFiles;
    } else {
      throw ConfigError("backend.kind: expected 'synthetic' or 'files', got '" + kind + "'");
    }
    t.reject_unknown();
  }
  {
    detail::TableReader t(top.table("synthetic"), "synthetic.");
    auto& s = c.synthetic;
    t.get("num_classes", s.num_classes);
    t.get("text_dim", s.text_dim);
    t.get("vision_dim", s.vision_dim);
    t.get("sigma", s.sigma);
    t.get("train_scenes", s.train_scenes);
    t.get("eval_scenes", s.eval_scenes);
    t.get("max_regions", s.max_regions);
    t.get("min_crop_votes", s.min_crop_votes);
    t.get("canvas", s.geometry.canvas);
    t.get("crop_grid", s.geometry.crop_grid);
    t.get("crop_patches", s.geometry.crop_patches);
    t.get("vision_grid", s.geometry.vision_grid);
    t.get("patch_px", s.geometry.patch_px);
    t.get("align_px", s.geometry.align_px);
    t.reject_unknown();
  }
  {
    detail::TableReader t(top.table("stage1"), "stage1.");
    auto& d = c.detection;
    t.get("vote_threshold", d.vote_threshold);
    t.get("strict_votes", d.strict_votes);
    t.get("semi_supervised", d.semi_supervised);
    t.get("query_points", d.query_points);
    t.get("mask_space", d.mask_space);
    t.get("auto_mask_confidence", d.auto_mask_confidence);
    t.get("auto_mask_min_area", d.auto_mask_min_area);
    t.get("balance_ratio", d.balance_ratio);
    t.reject_unknown();
  }
  {
    detail::TableReader t(top.table("head"), "head.");
    std::string variant = std::string(align::variant_name(c.head_variant));
    t.get("variant", variant);
    c.head_variant = align::parse_variant(variant);
    t.get("hidden", c.head_hidden);
    t.get("num_heads", c.head_num_heads);
    t.reject_unknown();
  }
  {
    detail::TableReader t(top.table("train"), "train.");
    auto& tr = c.train;
    t.get("epochs", tr.epochs);
    t.get("batch_size", tr.batch_size);
    t.get("lr", tr.lr);
    t.get("momentum", tr.momentum);
    std::string loss = std::string(align::loss_name(tr.loss));
    t.get("loss", loss);
    tr.loss = align::parse_loss(loss);
    t.get("temperature", tr.temperature);
    t.reject_unknown();
  }
  {
    detail::TableReader t(top.table("infer"), "infer.");
    t.get("refined", c.refined);
    t.reject_unknown();
  }
  {
    detail::TableReader t(top.table("eval"), "eval.");
    if (t.has("background_id")) {
      std::int32_t id = 0;
      t.get("background_id", id);
      c.background_id = id;
    }
    t.get_int_list("background_classes", c.background_classes);
    t.reject_unknown();
  }
  top.reject_unknown();
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw ConfigError("config file '" + path.string() + "' does not exist");
  }
  const auto bytes = fmseg::detail::read_file_bytes(path);
  const std::string text(bytes.begin(), bytes.end());
  return parse_config(text, std::filesystem::absolute(path).parent_path(), path.string());
}

}  // namespace fmseg

#endif  // FMSEG_CONFIG_HPP_
