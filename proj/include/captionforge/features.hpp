#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "captionforge/tensor.hpp"

namespace captionforge {

/// Per-video feature sequence: one row per temporal window.
struct FeatureMatrix {
  std::string video_id;
  Tensor values;  // [T, D]
  std::string extractor_tag;

  std::size_t rows() const { return values.dim(0); }
  std::size_t dim() const { return values.dim(1); }
};

/// Feature rows produced by a clip of n_frames after capping at `cap` frames
/// and emitting one row per `window` frames: floor(min(n_frames, cap) / window).
/// Frames beyond the cap are dropped from the end.
std::size_t expected_rows(std::size_t n_frames, std::size_t cap, std::size_t window);

inline constexpr std::uint32_t kFeatureFileVersion = 1;

/// Feature file, little-endian: "VFM1" | u32 version | u32 T | u32 D |
/// u32 dtype (0 = float32) | T*D float32 row-major | u64 sum of payload bytes.
void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& m);
/// The file carries no metadata: video_id is the file stem, the tag "file".
FeatureMatrix read_feature_file(const std::filesystem::path& path);

struct FeatureFileHeader {
  std::uint32_t version, rows, dim, dtype;
};
FeatureFileHeader read_feature_header(const std::filesystem::path& path);

struct SynthFeatureSpec {
  std::uint64_t seed = 0;
  std::size_t n_videos = 0;
  std::size_t rows_min = 4;
  std::size_t rows_max = 8;
  std::size_t dim = 32;
  std::size_t n_classes = 1;
  double signal_strength = 0.9;
  // Per-video class labels; when empty, video i gets class i mod n_classes.
  std::vector<std::size_t> labels;
};

struct SynthFeatures {
  std::vector<FeatureMatrix> videos;
  std::vector<std::size_t> labels;
  Tensor class_means;  // [n_classes, dim], unit-norm rows
};

/// Every row of a video is its class mean plus Gaussian noise scaled by
/// (1 - signal_strength). Bitwise deterministic from the seed.
SynthFeatures synth_features(const SynthFeatureSpec& spec);

}  // namespace captionforge
