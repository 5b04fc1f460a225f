#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "captionforge/features.hpp"

namespace captionforge {

struct PcaModel {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  Tensor mean;                       // [D]
  Tensor components;                 // [k, D], orthonormal rows
  std::vector<double> eigenvalues;   // k values, non-increasing
};

/// Fits on every row of every matrix jointly. Components are the top-k
/// eigenvectors of the sample covariance (divisor N - 1); each component's
/// largest-magnitude entry is made positive.
PcaModel pca_fit(std::span<const FeatureMatrix> matrices, std::size_t k);

/// (rows - mean) · componentsᵀ; the tag gains a "+pca{k}" suffix.
FeatureMatrix pca_apply(const PcaModel& model, const FeatureMatrix& m);

/// Maps projected rows [T, k] back to input space [T, D].
Tensor pca_reconstruct(const PcaModel& model, const Tensor& projected);

inline constexpr std::uint32_t kPcaFileVersion = 1;

/// "VPC1" | u32 version | u32 D | u32 k | u32 dtype (0) | mean (D) |
/// components (k*D) | eigenvalues (k), all float32 | u64 sum of payload bytes.
void write_pca_file(const std::filesystem::path& path, const PcaModel& model);
PcaModel read_pca_file(const std::filesystem::path& path);

}  // namespace captionforge
