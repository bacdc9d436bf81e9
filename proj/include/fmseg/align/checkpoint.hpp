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

// Checkpoint layout:
//   <dir>/head.json          descriptor (variant, dims, steps, parameter table)
//   <dir>/params/<name>.fmt  one f32 tensor per parameter
// Training logs are JSON lines {"step", "lr", "loss"}.

#ifndef FMSEG_ALIGN_CHECKPOINT_HPP_
#define FMSEG_ALIGN_CHECKPOINT_HPP_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fmseg/align/heads.hpp"
#include "fmseg/align/train.hpp"
#include "fmseg/error.hpp"
#include "fmseg/exchange.hpp"

namespace fmseg::align {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  AlignmentHead head;
  std::size_t steps = 0;
};

inline void write_checkpoint(const fs::path& dir, const AlignmentHead& head, std::size_t steps) {
  const HeadShape& s = head.shape();
  Json params = Json::array();
  for (const auto& p : head.parameters()) {
    const std::string rel = "params/" + p.name + ".fmt";
    write_tensor2d(dir / rel, p.value);
    params.push_back({{"name", p.name}, {"path", rel}, {"shape", {p.value.rows(), p.value.cols()}}});
  }
  Json j = {{"version", kCheckpointVersion},
            {"variant", std::string(variant_name(s.variant))},
            {"in_dim", s.in_dim},
            {"out_dim", s.out_dim},
            {"hidden", s.hidden},
            {"num_heads", s.num_heads},
            {"steps", steps},
            {"parameters", params}};
  write_json(dir / "head.json", j);
}

inline Checkpoint read_checkpoint(const fs::path& dir) {
  const fs::path desc = dir / "head.json";
  if (!fs::exists(desc)) throw IoError("checkpoint: missing '" + desc.string() + "'");
  const Json j = read_json(desc);
  try {
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw ValidationError(desc.string() + ": unsupported version");
    }
    HeadShape s;
    try {
      s.variant = parse_variant(j.at("variant").get<std::string>());
    } catch (const ConfigError& e) {
      throw ValidationError(desc.string() + ": " + e.what());
    }
    s.in_dim = j.at("in_dim").get<std::size_t>();
    s.out_dim = j.at("out_dim").get<std::size_t>();
    s.hidden = j.at("hidden").get<std::size_t>();
    s.num_heads = j.at("num_heads").get<std::size_t>();
    std::vector<Parameter> params;
    for (const auto& e : j.at("parameters")) {
      const fs::path file = dir / e.at("path").get<std::string>();
      if (!fs::exists(file)) throw IoError("checkpoint: missing '" + file.string() + "'");
      params.push_back({e.at("name").get<std::string>(), read_tensor2d(file)});
    }
    return {AlignmentHead::from_parameters(s, std::move(params)), j.at("steps").get<std::size_t>()};
  } catch (const Json::exception& e) {
    throw ValidationError(desc.string() + ": " + e.what());
  }
}

inline void write_training_log(const fs::path& path, std::span<const StepRecord> log) {
  std::string text;
  for (const auto& r : log) {
    text += Json{{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}}.dump() + "\n";
  }
  fmseg::detail::write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace fmseg::align

#endif  // FMSEG_ALIGN_CHECKPOINT_HPP_
