#include "captionforge/features.hpp"

#include <algorithm>
#include <cmath>

#include "binary_io.hpp"
#include "captionforge/errors.hpp"
#include "captionforge/rng.hpp"

namespace captionforge {

std::size_t expected_rows(std::size_t n_frames, std::size_t cap, std::size_t window) {
  if (window == 0) throw ConfigError("expected_rows: window must be at least 1");
  if (cap < window) {
    throw ConfigError("expected_rows: frame cap " + std::to_string(cap) + " is below the window " +
                      std::to_string(window));
  }
  if (n_frames < window) {
    throw DataError("video too short: " + std::to_string(n_frames) + " frames for a " +
                    std::to_string(window) + "-frame window");
  }
  return std::min(n_frames, cap) / window;
}

void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& m) {
  if (m.values.rank() != 2) throw ShapeError("feature matrix must be rank 2, got " + shape_string(m.values.shape()));
  if (!all_finite(m.values)) throw DataError("feature matrix '" + m.video_id + "' holds non-finite values");
  detail::ByteWriter w;
  w.raw("VFM1");
  w.u32(kFeatureFileVersion);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.dim()));
  w.u32(0);
  const std::size_t payload_start = w.size();
  for (double v : m.values.values()) w.f32(v);
  w.u64(w.checksum(payload_start));
  detail::write_file_bytes(path.string(), w.bytes());
}

namespace {

FeatureFileHeader parse_header(detail::ByteReader& r, const std::string& source) {
  r.need(4);
  if (r.raw(4) != "VFM1") throw FormatError(FormatError::Kind::bad_magic, source + ": not a feature file (bad magic)");
  FeatureFileHeader h{};
  h.version = r.u32();
  if (h.version != kFeatureFileVersion) {
    throw FormatError(FormatError::Kind::version_mismatch,
                      source + ": feature file version " + std::to_string(h.version) + ", expected " +
                          std::to_string(kFeatureFileVersion));
  }
  h.rows = r.u32();
  h.dim = r.u32();
  h.dtype = r.u32();
  if (h.dtype != 0) {
    throw FormatError(FormatError::Kind::unsupported, source + ": unsupported dtype code " + std::to_string(h.dtype));
  }
  if (h.rows == 0 || h.dim == 0) throw DataError(source + ": empty feature matrix");
  return h;
}

}  // namespace

FeatureFileHeader read_feature_header(const std::filesystem::path& path) {
  const std::string source = path.string();
  const auto bytes = detail::read_file_bytes(source);
  detail::ByteReader r(bytes, source);
  return parse_header(r, source);
}

FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  const std::string source = path.string();
  const auto bytes = detail::read_file_bytes(source);
  detail::ByteReader r(bytes, source);
  const auto h = parse_header(r, source);
  const std::size_t n = static_cast<std::size_t>(h.rows) * h.dim;
  const std::size_t payload_start = r.position();
  r.need(n * 4);
  std::vector<double> values(n);
  for (auto& v : values) v = r.f32();
  const std::size_t payload_end = r.position();
  const auto stored = r.u64();
  if (stored != r.checksum(payload_start, payload_end)) {
    throw FormatError(FormatError::Kind::checksum_mismatch, source + ": payload checksum mismatch");
  }
  FeatureMatrix m{path.stem().string(), Tensor({h.rows, h.dim}, std::move(values)), "file"};
  if (!all_finite(m.values)) throw DataError(source + ": non-finite feature values");
  return m;
}

SynthFeatures synth_features(const SynthFeatureSpec& spec) {
  if (spec.n_classes == 0) throw ConfigError("synth_features: n_classes must be at least 1");
  if (spec.dim == 0) throw ConfigError("synth_features: dim must be positive");
  if (spec.rows_min == 0 || spec.rows_max < spec.rows_min) {
    throw ConfigError("synth_features: need 1 <= rows_min <= rows_max");
  }
  if (!spec.labels.empty() && spec.labels.size() != spec.n_videos) {
    throw ConfigError("synth_features: label count differs from n_videos");
  }
  Rng rng(spec.seed);
  SynthFeatures out;
  out.class_means = Tensor({spec.n_classes, spec.dim}, 0.0);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    double norm = 0.0;
    for (std::size_t j = 0; j < spec.dim; ++j) {
      const double v = rng.normal();
      out.class_means.at(c, j) = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < spec.dim; ++j) out.class_means.at(c, j) /= norm;
  }
  const double noise = 1.0 - spec.signal_strength;
  const std::size_t width = std::to_string(spec.n_videos).size();
  for (std::size_t v = 0; v < spec.n_videos; ++v) {
    const std::size_t label = spec.labels.empty() ? v % spec.n_classes : spec.labels[v];
    if (label >= spec.n_classes) throw ConfigError("synth_features: label out of range");
    const std::size_t rows = spec.rows_min + rng.below(spec.rows_max - spec.rows_min + 1);
    Tensor values({rows, spec.dim});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < spec.dim; ++j) {
        const double eps = rng.normal();
        values.at(r, j) = out.class_means.at(label, j) + (noise == 0.0 ? 0.0 : noise * eps);
      }
    std::string id = std::to_string(v);
    id = "video" + std::string(width - id.size(), '0') + id;
    out.videos.push_back({std::move(id), std::move(values), "synthetic"});
    out.labels.push_back(label);
  }
  return out;
}

}  // namespace captionforge
