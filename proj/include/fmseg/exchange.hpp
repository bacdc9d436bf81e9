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

// Interchange between feature/mask backends and the pipeline.
//
// Tensor file layout (all integers little-endian):
//
//   offset 0   magic "FMSG"
//   offset 4   u16 version (= 1)
//   offset 6   u8  dtype   (0 = f32, 1 = i32, 2 = u8)
//   offset 7   u8  rank
//   offset 8   rank x u32 dims
//   then       row-major payload, element size x prod(dims) bytes
//
// Dataset layout: <root>/{manifest.json, vocab.json, tensors/, masks/}.
// Manifests and vocabularies are JSON; every path inside them is relative to
// the directory holding the JSON file.

#ifndef FMSEG_EXCHANGE_HPP_
#define FMSEG_EXCHANGE_HPP_

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fmseg/error.hpp"
#include "fmseg/numerics.hpp"
#include "fmseg/types.hpp"
#include <nlohmann/json.hpp>

namespace fmseg {

namespace fs = std::filesystem;
using Json = nlohmann::json;

enum class DType : std::uint8_t { kF32 = 0, kI32 = 1, kU8 = 2 };

inline std::size_t dtype_size(DType t) { return t == DType::kU8 ? 1 : 4; }

inline constexpr std::array<char, 4> kTensorMagic = {'F', 'M', 'S', 'G'};
inline constexpr std::uint16_t kTensorVersion = 1;

/// A tensor file as raw bytes: element type, dims, little-endian payload.
struct RawTensor {
  DType dtype = DType::kF32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (const auto d : dims) n *= d;
    return n;
  }

  bool operator==(const RawTensor&) const = default;
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::vector<std::uint8_t> read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const fs::path& path,
                             const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const RawTensor& t) {
  if (t.dims.empty() || t.dims.size() > 255) {
    throw DomainError("tensor rank must be in [1, 255]");
  }
  for (const auto d : t.dims) {
    if (d == 0) throw DomainError("tensor dims must be nonzero");
  }
  if (t.payload.size() != t.element_count() * dtype_size(t.dtype)) {
    throw ShapeError("tensor payload size does not match dims");
  }
  std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
  out.reserve(8 + 4 * t.dims.size() + t.payload.size());
  detail::put_u16(out, kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(t.dtype));
  out.push_back(static_cast<std::uint8_t>(t.dims.size()));
  for (const auto d : t.dims) detail::put_u32(out, d);
  out.insert(out.end(), t.payload.begin(), t.payload.end());
  return out;
}

inline RawTensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw FormatError("truncated magic", bytes.size());
  for (std::size_t i = 0; i < 4; ++i) {
    if (bytes[i] != static_cast<std::uint8_t>(kTensorMagic[i])) {
      throw FormatError("bad magic", i);
    }
  }
  if (bytes.size() < 8) throw FormatError("truncated header", bytes.size());
  const std::uint16_t version =
      static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (version != kTensorVersion) {
    throw FormatError("unsupported version " + std::to_string(version), 4);
  }
  if (bytes[6] > 2) {
    throw FormatError("unknown dtype code " + std::to_string(bytes[6]), 6);
  }
  RawTensor t;
  t.dtype = static_cast<DType>(bytes[6]);
  const std::size_t rank = bytes[7];
  if (rank == 0) throw FormatError("rank 0", 7);
  const std::size_t header = 8 + 4 * rank;
  if (bytes.size() < header) throw FormatError("truncated dims", bytes.size());
  t.dims.resize(rank);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    t.dims[i] = detail::get_u32(bytes.data() + 8 + 4 * i);
    if (t.dims[i] == 0) throw FormatError("zero dimension", 8 + 4 * i);
    count *= t.dims[i];
  }
  const std::uint64_t end = header + count * dtype_size(t.dtype);
  if (bytes.size() < end) {
    throw FormatError("payload truncated: file has " +
                          std::to_string(bytes.size()) + " bytes",
                      end);
  }
  if (bytes.size() > end) throw FormatError("trailing bytes after payload", end);
  t.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return t;
}

inline void write_tensor(const fs::path& path, const RawTensor& t) {
  detail::write_file_bytes(path, encode_tensor(t));
}

inline RawTensor read_tensor(const fs::path& path) {
  try {
    return decode_tensor(detail::read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

// Typed conversions. f32 is widened to f64 on load and narrowed on store.

inline RawTensor make_f32(std::vector<std::uint32_t> dims,
                          std::span<const double> values) {
  RawTensor t{DType::kF32, std::move(dims), {}};
  if (values.size() != t.element_count()) {
    throw ShapeError("make_f32: value count does not match dims");
  }
  t.payload.reserve(values.size() * 4);
  for (const double v : values) {
    detail::put_u32(t.payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return t;
}

inline RawTensor make_u8(std::vector<std::uint32_t> dims,
                         std::vector<std::uint8_t> values) {
  RawTensor t{DType::kU8, std::move(dims), std::move(values)};
  if (t.payload.size() != t.element_count()) {
    throw ShapeError("make_u8: value count does not match dims");
  }
  return t;
}

inline RawTensor make_i32(std::vector<std::uint32_t> dims,
                          std::span<const std::int32_t> values) {
  RawTensor t{DType::kI32, std::move(dims), {}};
  if (values.size() != t.element_count()) {
    throw ShapeError("make_i32: value count does not match dims");
  }
  for (const auto v : values) detail::put_u32(t.payload, static_cast<std::uint32_t>(v));
  return t;
}

inline std::vector<double> as_f64(const RawTensor& t) {
  if (t.dtype != DType::kF32) throw ValidationError("expected an f32 tensor");
  std::vector<double> out(t.element_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<float>(detail::get_u32(t.payload.data() + 4 * i));
  }
  return out;
}

inline std::vector<std::int32_t> as_i32(const RawTensor& t) {
  std::vector<std::int32_t> out(t.element_count());
  if (t.dtype == DType::kU8) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.payload[i];
  } else if (t.dtype == DType::kI32) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<std::int32_t>(detail::get_u32(t.payload.data() + 4 * i));
    }
  } else {
    throw ValidationError("expected an integer tensor");
  }
  return out;
}

inline std::string dims_string(const std::vector<std::uint32_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

inline void expect_dims(const RawTensor& t,
                        const std::vector<std::uint32_t>& expected,
                        const std::string& what) {
  if (t.dims != expected) {
    throw ShapeError(what + ": dims " + dims_string(t.dims) + ", expected " +
                     dims_string(expected));
  }
}

// Convenience readers/writers for domain types.

inline void write_tensor2d(const fs::path& path, const Tensor2D& m) {
  write_tensor(path, make_f32({static_cast<std::uint32_t>(m.rows()),
                               static_cast<std::uint32_t>(m.cols())},
                              m.data()));
}

inline Tensor2D read_tensor2d(const fs::path& path) {
  const RawTensor t = read_tensor(path);
  if (t.dims.size() != 2) {
    throw ShapeError(path.string() + ": expected rank 2, got " + dims_string(t.dims));
  }
  return Tensor2D(t.dims[0], t.dims[1], as_f64(t));
}

inline void write_tensor3d(const fs::path& path, const Tensor3D& g) {
  write_tensor(path, make_f32({static_cast<std::uint32_t>(g.height()),
                               static_cast<std::uint32_t>(g.width()),
                               static_cast<std::uint32_t>(g.channels())},
                              g.data()));
}

inline Tensor3D read_tensor3d(const fs::path& path) {
  const RawTensor t = read_tensor(path);
  if (t.dims.size() != 3) {
    throw ShapeError(path.string() + ": expected rank 3, got " + dims_string(t.dims));
  }
  return Tensor3D(t.dims[0], t.dims[1], t.dims[2], as_f64(t));
}

/// Stacked binary masks [M, H, W] as u8.
inline void write_mask_stack(const fs::path& path,
                             const std::vector<const BinaryMask*>& masks) {
  if (masks.empty()) throw DomainError("write_mask_stack: no masks");
  const auto h = masks.front()->height;
  const auto w = masks.front()->width;
  std::vector<std::uint8_t> bytes;
  bytes.reserve(masks.size() * h * w);
  for (const auto* m : masks) {
    if (m->height != h || m->width != w) throw ShapeError("mask stack: shapes differ");
    bytes.insert(bytes.end(), m->data.begin(), m->data.end());
  }
  write_tensor(path, make_u8({static_cast<std::uint32_t>(masks.size()),
                              static_cast<std::uint32_t>(h),
                              static_cast<std::uint32_t>(w)},
                             std::move(bytes)));
}

inline void check_binary(const std::vector<std::uint8_t>& values,
                         const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] > 1) {
      throw ValidationError(what + ": mask value " + std::to_string(values[i]) +
                            " at element " + std::to_string(i) +
                            " is not in {0,1}");
    }
  }
}

inline std::vector<BinaryMask> read_mask_stack(const fs::path& path) {
  const RawTensor t = read_tensor(path);
  if (t.dtype != DType::kU8 || t.dims.size() != 3) {
    throw ShapeError(path.string() + ": expected a u8 [M,H,W] mask stack");
  }
  check_binary(t.payload, path.string());
  std::vector<BinaryMask> out;
  const std::size_t plane = static_cast<std::size_t>(t.dims[1]) * t.dims[2];
  for (std::size_t m = 0; m < t.dims[0]; ++m) {
    BinaryMask mask(t.dims[1], t.dims[2]);
    std::copy_n(t.payload.begin() + static_cast<std::ptrdiff_t>(m * plane), plane,
                mask.data.begin());
    out.push_back(std::move(mask));
  }
  return out;
}

inline void write_mask(const fs::path& path, const BinaryMask& mask) {
  write_tensor(path, make_u8({static_cast<std::uint32_t>(mask.height),
                              static_cast<std::uint32_t>(mask.width)},
                             mask.data));
}

inline BinaryMask read_mask(const fs::path& path) {
  const RawTensor t = read_tensor(path);
  if (t.dtype != DType::kU8 || t.dims.size() != 2) {
    throw ShapeError(path.string() + ": expected a u8 [H,W] mask");
  }
  check_binary(t.payload, path.string());
  BinaryMask m(t.dims[0], t.dims[1]);
  m.data = t.payload;
  return m;
}

/// Written as u8 when every id fits, otherwise i32.
inline void write_segmentation(const fs::path& path, const SegmentationMap& map) {
  const std::vector<std::uint32_t> dims = {static_cast<std::uint32_t>(map.height),
                                           static_cast<std::uint32_t>(map.width)};
  const bool fits = std::all_of(map.labels.begin(), map.labels.end(),
                                [](std::int32_t v) { return v >= 0 && v <= 255; });
  if (fits) {
    write_tensor(path, make_u8(dims, std::vector<std::uint8_t>(map.labels.begin(),
                                                               map.labels.end())));
  } else {
    write_tensor(path, make_i32(dims, map.labels));
  }
}

inline SegmentationMap read_segmentation(const fs::path& path) {
  const RawTensor t = read_tensor(path);
  if (t.dims.size() != 2) throw ShapeError(path.string() + ": expected rank 2");
  SegmentationMap map(t.dims[0], t.dims[1]);
  map.labels = as_i32(t);
  return map;
}

inline Json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const Json& j) {
  const std::string text = j.dump(2) + "\n";
  detail::write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------
// Vocabulary.

inline void write_vocabulary(const fs::path& json_path, const TextPrototypeSet& vocab,
                             const std::string& tensor_rel = "tensors/prototypes.fmt") {
  write_tensor2d(json_path.parent_path() / tensor_rel, vocab.prototypes);
  write_json(json_path, Json{{"classes", vocab.names},
                             {"prototypes", tensor_rel},
                             {"template", vocab.text_template}});
}

inline TextPrototypeSet read_vocabulary(const fs::path& json_path) {
  const Json j = read_json(json_path);
  TextPrototypeSet v;
  try {
    v.names = j.at("classes").get<std::vector<std::string>>();
    v.text_template = j.at("template").get<std::string>();
    v.prototypes =
        read_tensor2d(json_path.parent_path() / j.at("prototypes").get<std::string>());
  } catch (const Json::exception& e) {
    throw ValidationError(json_path.string() + ": " + e.what());
  }
  v.validate();
  return v;
}

// ---------------------------------------------------------------------------
// Manifest.

struct PointMaskSetRef {
  int class_id = 0;
  std::vector<std::array<int, 2>> points;  // (x, y) in pixel space
  std::string path;                         // u8 [3, H, W]
  std::vector<double> confidences;
};

struct AutoMaskSetRef {
  std::string path;  // u8 [M, H, W]
  std::vector<double> confidences;
};

/// One image of a dataset manifest. Paths are relative to the manifest.
struct ImageRecord {
  std::string image_id;
  std::string split = "train";
  std::size_t height = 0;  // pixel (mask/ground-truth) space
  std::size_t width = 0;
  std::size_t crop_rows = 0;
  std::size_t crop_cols = 0;
  std::size_t grid_h = 0;  // mosaicked patch grid
  std::size_t grid_w = 0;
  double patch_px = 14.0;  // patch edge in the oversampled crop space
  std::vector<std::string> crop_features;  // row-major over crops, [h, w, D]
  std::string cls_tokens;                  // [C, D]
  std::optional<std::string> clip_features;    // optional full [H_p, W_p, D]
  std::optional<std::string> vision_features;  // [H_v, W_v, D_in]
  std::vector<PointMaskSetRef> point_masks;
  std::optional<AutoMaskSetRef> auto_masks;
  std::optional<std::string> ground_truth;  // [H, W] u8/i32
  std::optional<std::vector<int>> image_level_labels;
  std::optional<Json> synthetic_scene;
};

inline Json to_json(const ImageRecord& r) {
  Json j = {{"image_id", r.image_id},
            {"split", r.split},
            {"pixel_size", {r.height, r.width}},
            {"crop_grid", {r.crop_rows, r.crop_cols}},
            {"patch_grid", {r.grid_h, r.grid_w}},
            {"patch_px", r.patch_px},
            {"crop_features", r.crop_features},
            {"cls_tokens", r.cls_tokens}};
  if (r.clip_features) j["clip_features"] = *r.clip_features;
  if (r.vision_features) j["vision_features"] = *r.vision_features;
  if (!r.point_masks.empty()) {
    Json arr = Json::array();
    for (const auto& p : r.point_masks) {
      Json pts = Json::array();
      for (const auto& pt : p.points) pts.push_back({pt[0], pt[1]});
      arr.push_back({{"class_id", p.class_id},
                     {"points", pts},
                     {"path", p.path},
                     {"confidences", p.confidences}});
    }
    j["point_masks"] = arr;
  }
  if (r.auto_masks) {
    j["auto_masks"] = {{"path", r.auto_masks->path},
                       {"confidences", r.auto_masks->confidences}};
  }
  if (r.ground_truth) j["ground_truth"] = *r.ground_truth;
  if (r.image_level_labels) j["image_level_labels"] = *r.image_level_labels;
  if (r.synthetic_scene) j["synthetic_scene"] = *r.synthetic_scene;
  return j;
}

inline ImageRecord image_record_from_json(const Json& j) {
  static const std::set<std::string> kKnown = {
      "image_id",        "split",       "pixel_size",   "crop_grid",
      "patch_grid",      "patch_px",    "crop_features", "cls_tokens",
      "clip_features",   "vision_features", "point_masks", "auto_masks",
      "ground_truth",    "image_level_labels", "synthetic_scene"};
  ImageRecord r;
  try {
    for (const auto& [key, _] : j.items()) {
      if (!kKnown.count(key)) throw ValidationError("unknown field '" + key + "'");
    }
    r.image_id = j.at("image_id").get<std::string>();
    r.split = j.value("split", std::string("train"));
    const auto px = j.at("pixel_size").get<std::array<std::size_t, 2>>();
    r.height = px[0];
    r.width = px[1];
    const auto cg = j.at("crop_grid").get<std::array<std::size_t, 2>>();
    r.crop_rows = cg[0];
    r.crop_cols = cg[1];
    const auto pg = j.at("patch_grid").get<std::array<std::size_t, 2>>();
    r.grid_h = pg[0];
    r.grid_w = pg[1];
    r.patch_px = j.value("patch_px", 14.0);
    r.crop_features = j.at("crop_features").get<std::vector<std::string>>();
    r.cls_tokens = j.at("cls_tokens").get<std::string>();
    if (j.contains("clip_features")) r.clip_features = j["clip_features"].get<std::string>();
    if (j.contains("vision_features")) {
      r.vision_features = j["vision_features"].get<std::string>();
    }
    if (j.contains("point_masks")) {
      for (const auto& p : j["point_masks"]) {
        PointMaskSetRef ref;
        ref.class_id = p.at("class_id").get<int>();
        ref.points = p.at("points").get<std::vector<std::array<int, 2>>>();
        ref.path = p.at("path").get<std::string>();
        ref.confidences = p.at("confidences").get<std::vector<double>>();
        r.point_masks.push_back(std::move(ref));
      }
    }
    if (j.contains("auto_masks")) {
      r.auto_masks = AutoMaskSetRef{j["auto_masks"].at("path").get<std::string>(),
                                    j["auto_masks"].at("confidences").get<std::vector<double>>()};
    }
    if (j.contains("ground_truth")) r.ground_truth = j["ground_truth"].get<std::string>();
    if (j.contains("image_level_labels")) {
      r.image_level_labels = j["image_level_labels"].get<std::vector<int>>();
    }
    if (j.contains("synthetic_scene")) r.synthetic_scene = j["synthetic_scene"];
  } catch (const Json::exception& e) {
    throw ValidationError("image record: " + std::string(e.what()));
  }
  return r;
}

struct Manifest {
  fs::path root;  // directory holding manifest.json
  std::vector<ImageRecord> images;

  const ImageRecord& find(const std::string& image_id) const {
    for (const auto& r : images)
      if (r.image_id == image_id) return r;
    throw ValidationError("manifest has no image '" + image_id + "'");
  }

  std::vector<const ImageRecord*> split(const std::string& name) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : images)
      if (r.split == name) out.push_back(&r);
    return out;
  }
};

inline void write_manifest(const fs::path& json_path, const Manifest& m) {
  Json arr = Json::array();
  for (const auto& r : m.images) arr.push_back(to_json(r));
  write_json(json_path, Json{{"version", 1}, {"images", arr}});
}

inline Manifest read_manifest(const fs::path& json_path) {
  const Json j = read_json(json_path);
  Manifest m;
  m.root = json_path.parent_path();
  if (!j.is_object() || j.value("version", 0) != 1 || !j.contains("images") ||
      !j["images"].is_array()) {
    throw ValidationError(json_path.string() + ": not a version-1 manifest");
  }
  std::set<std::string> ids;
  for (const auto& rec : j["images"]) {
    m.images.push_back(image_record_from_json(rec));
    if (!ids.insert(m.images.back().image_id).second) {
      throw ValidationError(json_path.string() + ": duplicate image id '" +
                            m.images.back().image_id + "'");
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// In-memory bundle for one image.

struct PointMaskSet {
  int class_id = 0;
  std::vector<std::array<int, 2>> points;
  std::vector<MaskProposal> masks;
};

struct ImageBundle {
  ImageRecord record;
  std::vector<Tensor3D> crop_features;  // row-major over crops
  Tensor2D cls_tokens;
  std::optional<FeatureGrid> clip_grid;
  std::optional<FeatureGrid> vision_grid;
  std::vector<PointMaskSet> point_masks;
  std::vector<MaskProposal> auto_masks;
  std::optional<SegmentationMap> ground_truth;
};

enum BundleParts : unsigned {
  kCrops = 1u << 0,
  kVision = 1u << 1,
  kMasks = 1u << 2,
  kGroundTruth = 1u << 3,
  kAllParts = 0xffu,
};

namespace detail {

/// Collects per-field violations and throws them together.
class FieldErrors {
 public:
  explicit FieldErrors(std::string image_id) : image_id_(std::move(image_id)) {}

  template <class F>
  void check(const std::string& field, F&& fn) {
    try {
      fn();
    } catch (const IoError&) {
      throw;
    } catch (const ShapeError& e) {
      shape_ = true;
      errors_.push_back(field + ": " + e.what());
    } catch (const Error& e) {
      errors_.push_back(field + ": " + e.what());
    }
  }

  void add_shape(const std::string& field, const std::string& msg) {
    shape_ = true;
    errors_.push_back(field + ": " + msg);
  }
  void add(const std::string& field, const std::string& msg) {
    errors_.push_back(field + ": " + msg);
  }

  void raise() const {
    if (errors_.empty()) return;
    std::string msg = "image '" + image_id_ + "':";
    for (const auto& e : errors_) msg += "\n  " + e;
    if (shape_) throw ShapeError(msg);
    throw ValidationError(msg);
  }

 private:
  std::string image_id_;
  std::vector<std::string> errors_;
  bool shape_ = false;
};

inline void require_exists(const fs::path& p, const std::string& field) {
  if (!fs::exists(p)) {
    throw IoError(field + ": missing file '" + p.string() + "'");
  }
}

}  // namespace detail

/// Loads and validates one image's files. Never coerces shapes; every
/// violation is reported by field.
inline ImageBundle load_image_record(const Manifest& manifest,
                                     const std::string& image_id,
                                     std::size_t num_classes,
                                     unsigned parts = kAllParts) {
  const ImageRecord& r = manifest.find(image_id);
  const fs::path& root = manifest.root;
  ImageBundle b;
  b.record = r;
  detail::FieldErrors errs(image_id);

  if (r.height == 0 || r.width == 0) errs.add_shape("pixel_size", "zero extent");
  if (r.image_level_labels) {
    for (const int k : *r.image_level_labels) {
      if (k < 0 || static_cast<std::size_t>(k) >= num_classes) {
        errs.add("image_level_labels", "unknown class id " + std::to_string(k));
      }
    }
  }

  if (parts & kCrops) {
    const std::size_t n_crops = r.crop_rows * r.crop_cols;
    if (n_crops == 0) errs.add_shape("crop_grid", "zero crops");
    if (r.crop_features.size() != n_crops) {
      errs.add_shape("crop_features", std::to_string(r.crop_features.size()) +
                                          " files for a " + std::to_string(r.crop_rows) +
                                          "x" + std::to_string(r.crop_cols) + " crop grid");
    }
    for (std::size_t c = 0; c < r.crop_features.size(); ++c) {
      const auto path = root / r.crop_features[c];
      detail::require_exists(path, "crop_features[" + std::to_string(c) + "]");
      errs.check("crop_features[" + std::to_string(c) + "]",
                 [&] { b.crop_features.push_back(read_tensor3d(path)); });
    }
    std::size_t dim = 0;
    if (!b.crop_features.empty() && b.crop_features.size() == r.crop_features.size()) {
      const auto& first = b.crop_features.front();
      dim = first.channels();
      for (std::size_t c = 1; c < b.crop_features.size(); ++c) {
        const auto& f = b.crop_features[c];
        if (f.height() != first.height() || f.width() != first.width() ||
            f.channels() != first.channels()) {
          errs.add_shape("crop_features[" + std::to_string(c) + "]",
                         "shape differs from crop 0");
        }
      }
      if (r.grid_h != r.crop_rows * first.height() ||
          r.grid_w != r.crop_cols * first.width()) {
        errs.add_shape("patch_grid",
                       "declared " + std::to_string(r.grid_h) + "x" +
                           std::to_string(r.grid_w) + " but crops give " +
                           std::to_string(r.crop_rows * first.height()) + "x" +
                           std::to_string(r.crop_cols * first.width()));
      }
    }
    const auto cls_path = root / r.cls_tokens;
    detail::require_exists(cls_path, "cls_tokens");
    errs.check("cls_tokens", [&] {
      b.cls_tokens = read_tensor2d(cls_path);
      if (b.cls_tokens.rows() != n_crops || (dim && b.cls_tokens.cols() != dim)) {
        throw ShapeError("shape " + std::to_string(b.cls_tokens.rows()) + "x" +
                         std::to_string(b.cls_tokens.cols()) + " does not match " +
                         std::to_string(n_crops) + " crops of dim " + std::to_string(dim));
      }
    });
    if (r.clip_features) {
      const auto path = root / *r.clip_features;
      detail::require_exists(path, "clip_features");
      errs.check("clip_features", [&] {
        FeatureGrid g{image_id, read_tensor3d(path)};
        if (g.height() != r.grid_h || g.width() != r.grid_w || (dim && g.dim() != dim)) {
          throw ShapeError("grid shape does not match patch_grid");
        }
        g.validate();
        b.clip_grid = std::move(g);
      });
    }
  }

  if (parts & kVision) {
    if (!r.vision_features) {
      errs.add("vision_features", "required but absent");
    } else {
      const auto path = root / *r.vision_features;
      detail::require_exists(path, "vision_features");
      errs.check("vision_features", [&] {
        FeatureGrid g{image_id, read_tensor3d(path)};
        g.validate();
        b.vision_grid = std::move(g);
      });
    }
  }

  if (parts & kMasks) {
    for (std::size_t i = 0; i < r.point_masks.size(); ++i) {
      const auto& ref = r.point_masks[i];
      const std::string field = "point_masks[" + std::to_string(i) + "]";
      if (ref.class_id < 0 || static_cast<std::size_t>(ref.class_id) >= num_classes) {
        errs.add(field, "unknown class id " + std::to_string(ref.class_id));
        continue;
      }
      const auto path = root / ref.path;
      detail::require_exists(path, field);
      errs.check(field, [&] {
        auto masks = read_mask_stack(path);
        if (masks.size() != ref.confidences.size()) {
          throw ShapeError(std::to_string(masks.size()) + " masks but " +
                           std::to_string(ref.confidences.size()) + " confidences");
        }
        PointMaskSet set{ref.class_id, ref.points, {}};
        for (std::size_t m = 0; m < masks.size(); ++m) {
          if (masks[m].height != r.height || masks[m].width != r.width) {
            throw ShapeError("mask does not match pixel_size");
          }
          set.masks.push_back({std::move(masks[m]), ref.confidences[m], ref.class_id});
        }
        b.point_masks.push_back(std::move(set));
      });
    }
    if (r.auto_masks) {
      const auto path = root / r.auto_masks->path;
      detail::require_exists(path, "auto_masks");
      errs.check("auto_masks", [&] {
        auto masks = read_mask_stack(path);
        if (masks.size() != r.auto_masks->confidences.size()) {
          throw ShapeError(std::to_string(masks.size()) + " masks but " +
                           std::to_string(r.auto_masks->confidences.size()) +
                           " confidences");
        }
        for (std::size_t m = 0; m < masks.size(); ++m) {
          if (masks[m].height != r.height || masks[m].width != r.width) {
            throw ShapeError("mask does not match pixel_size");
          }
          const double c = r.auto_masks->confidences[m];
          if (!(c >= 0.0 && c <= 1.0)) throw ValidationError("confidence out of [0,1]");
          b.auto_masks.push_back({std::move(masks[m]), c, std::nullopt});
        }
      });
    }
  }

  if ((parts & kGroundTruth) && r.ground_truth) {
    const auto path = root / *r.ground_truth;
    detail::require_exists(path, "ground_truth");
    errs.check("ground_truth", [&] {
      auto gt = read_segmentation(path);
      if (gt.height != r.height || gt.width != r.width) {
        throw ShapeError("ground truth does not match pixel_size");
      }
      for (const auto v : gt.labels) {
        if (v != SegmentationMap::kIgnoreLabel &&
            (v < 0 || static_cast<std::size_t>(v) >= num_classes)) {
          throw ValidationError("unknown class id " + std::to_string(v));
        }
      }
      b.ground_truth = std::move(gt);
    });
  }

  errs.raise();
  return b;
}

// ---------------------------------------------------------------------------
// Annotation sets.

/// Writes `<json_path>` plus one mask file per annotation under
/// `<json_path dir>/masks/`. Overwrites; no append semantics.
inline void write_annotation_set(const fs::path& json_path, const AnnotationSet& set,
                                 std::size_t num_classes) {
  Json arr = Json::array();
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& a = set[i];
    if (a.class_id < 0 || static_cast<std::size_t>(a.class_id) >= num_classes) {
      throw ValidationError("annotation " + std::to_string(i) + ": class id " +
                            std::to_string(a.class_id) + " >= " +
                            std::to_string(num_classes));
    }
    std::ostringstream name;
    name << "masks/" << std::setw(6) << std::setfill('0') << i << ".fmt";
    write_mask(json_path.parent_path() / name.str(), a.mask);
    arr.push_back({{"image_id", a.image_id},
                   {"class_id", a.class_id},
                   {"mask", name.str()},
                   {"confidence", a.confidence},
                   {"stage", stage_tag(a.stage)}});
  }
  write_json(json_path, Json{{"version", 1}, {"num_classes", num_classes},
                             {"annotations", arr}});
}

inline AnnotationSet read_annotation_set(const fs::path& json_path,
                                         std::optional<std::size_t> num_classes = {}) {
  const Json j = read_json(json_path);
  AnnotationSet set;
  try {
    const auto k = j.at("num_classes").get<std::size_t>();
    if (num_classes && *num_classes != k) {
      throw ValidationError("annotation set declares " + std::to_string(k) +
                            " classes, vocabulary has " + std::to_string(*num_classes));
    }
    for (const auto& e : j.at("annotations")) {
      PseudoAnnotation a;
      a.image_id = e.at("image_id").get<std::string>();
      a.class_id = e.at("class_id").get<int>();
      if (a.class_id < 0 || static_cast<std::size_t>(a.class_id) >= k) {
        throw ValidationError("class id " + std::to_string(a.class_id) + " >= " +
                              std::to_string(k));
      }
      a.confidence = e.at("confidence").get<double>();
      if (!(a.confidence >= 0.0 && a.confidence <= 1.0)) {
        throw ValidationError("confidence out of [0,1]");
      }
      a.stage = parse_stage_tag(e.at("stage").get<std::string>());
      a.mask = read_mask(json_path.parent_path() / e.at("mask").get<std::string>());
      set.push_back(std::move(a));
    }
  } catch (const Json::exception& e) {
    throw ValidationError(json_path.string() + ": " + e.what());
  }
  return set;
}

}  // namespace fmseg

#endif  // FMSEG_EXCHANGE_HPP_
