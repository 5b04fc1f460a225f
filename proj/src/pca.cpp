#include "captionforge/pca.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "binary_io.hpp"
#include "captionforge/errors.hpp"

namespace captionforge {

namespace {

// Above this width the N x N Gram matrix is decomposed instead of the D x D
// covariance whenever it is smaller.
constexpr std::size_t kCovarianceLimit = 1024;

void make_sign_canonical(Eigen::Ref<Eigen::VectorXd> v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v(arg) < 0) v = -v;
}

// Completes `basis` (orthonormal columns, first `filled` valid) with
// Gram-Schmidt over the standard basis.
void complete_basis(Eigen::MatrixXd& basis, Eigen::Index filled) {
  const Eigen::Index d = basis.rows();
  for (Eigen::Index e = 0; e < d && filled < basis.cols(); ++e) {
    Eigen::VectorXd v = Eigen::VectorXd::Unit(d, e);
    for (Eigen::Index j = 0; j < filled; ++j) v -= basis.col(j).dot(v) * basis.col(j);
    const double n = v.norm();
    if (n < 1e-6) continue;
    basis.col(filled++) = v / n;
  }
}

}  // namespace

PcaModel pca_fit(std::span<const FeatureMatrix> matrices, std::size_t k) {
  if (matrices.empty()) throw DataError("pca_fit: no feature matrices");
  const std::size_t d = matrices.front().dim();
  std::size_t n = 0;
  for (const auto& m : matrices) {
    if (m.dim() != d) {
      throw ShapeError("pca_fit: '" + m.video_id + "' has dimension " + std::to_string(m.dim()) +
                       ", expected " + std::to_string(d));
    }
    n += m.rows();
  }
  if (k == 0) throw ConfigError("pca_fit: k must be at least 1");
  if (k > d) throw ShapeError("pca_fit: k = " + std::to_string(k) + " exceeds input dimension " + std::to_string(d));
  if (n <= k) {
    throw DataError("pca_fit: insufficient data, " + std::to_string(n) + " rows for " + std::to_string(k) +
                    " components");
  }

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  Eigen::Index row = 0;
  for (const auto& m : matrices)
    for (std::size_t r = 0; r < m.rows(); ++r, ++row)
      for (std::size_t j = 0; j < d; ++j) x(row, static_cast<Eigen::Index>(j)) = m.values.at(r, j);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const double denom = static_cast<double>(n - 1);
  const auto kk = static_cast<Eigen::Index>(k);

  Eigen::MatrixXd basis(static_cast<Eigen::Index>(d), kk);
  Eigen::VectorXd values(kk);
  if (d <= kCovarianceLimit || d <= n) {
    const Eigen::MatrixXd cov = (x.transpose() * x) / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    // Ascending order from Eigen; take the top k in reverse.
    for (Eigen::Index i = 0; i < kk; ++i) {
      const Eigen::Index src = static_cast<Eigen::Index>(d) - 1 - i;
      basis.col(i) = solver.eigenvectors().col(src);
      values(i) = solver.eigenvalues()(src);
    }
  } else {
    const Eigen::MatrixXd gram = (x * x.transpose()) / denom;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(gram);
    const double top = std::max(solver.eigenvalues().maxCoeff(), 0.0);
    Eigen::Index filled = 0;
    for (Eigen::Index i = 0; i < kk; ++i) {
      const Eigen::Index src = static_cast<Eigen::Index>(n) - 1 - i;
      const double lambda = solver.eigenvalues()(src);
      values(i) = lambda;
      if (lambda <= 1e-12 * std::max(top, 1e-300)) continue;
      basis.col(filled++) = x.transpose() * solver.eigenvectors().col(src) / std::sqrt(denom * lambda);
    }
    complete_basis(basis, filled);
  }

  PcaModel model;
  model.input_dim = d;
  model.output_dim = k;
  model.mean = Tensor({d}, std::vector<double>(mu.data(), mu.data() + d));
  model.components = Tensor({k, d});
  for (Eigen::Index i = 0; i < kk; ++i) {
    Eigen::VectorXd v = basis.col(i);
    make_sign_canonical(v);
    for (std::size_t j = 0; j < d; ++j) model.components.at(static_cast<std::size_t>(i), j) = v(static_cast<Eigen::Index>(j));
    model.eigenvalues.push_back(std::max(values(i), 0.0));
  }
  return model;
}

FeatureMatrix pca_apply(const PcaModel& model, const FeatureMatrix& m) {
  if (m.dim() != model.input_dim) {
    throw ShapeError("pca_apply: '" + m.video_id + "' has dimension " + std::to_string(m.dim()) +
                     ", model expects " + std::to_string(model.input_dim));
  }
  const std::size_t t = m.rows(), d = model.input_dim, k = model.output_dim;
  Tensor out({t, k}, 0.0);
  std::vector<double> centered(d);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t j = 0; j < d; ++j) centered[j] = m.values.at(r, j) - model.mean[j];
    for (std::size_t c = 0; c < k; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += centered[j] * model.components.at(c, j);
      out.at(r, c) = acc;
    }
  }
  return {m.video_id, std::move(out), m.extractor_tag + "+pca" + std::to_string(k)};
}

Tensor pca_reconstruct(const PcaModel& model, const Tensor& projected) {
  if (projected.rank() != 2 || projected.dim(1) != model.output_dim) {
    throw ShapeError("pca_reconstruct: expected [T, " + std::to_string(model.output_dim) + "], got " +
                     shape_string(projected.shape()));
  }
  const std::size_t t = projected.dim(0), d = model.input_dim, k = model.output_dim;
  Tensor out({t, d});
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = model.mean[j];
      for (std::size_t c = 0; c < k; ++c) acc += projected.at(r, c) * model.components.at(c, j);
      out.at(r, j) = acc;
    }
  return out;
}

void write_pca_file(const std::filesystem::path& path, const PcaModel& model) {
  detail::ByteWriter w;
  w.raw("VPC1");
  w.u32(kPcaFileVersion);
  w.u32(static_cast<std::uint32_t>(model.input_dim));
  w.u32(static_cast<std::uint32_t>(model.output_dim));
  w.u32(0);
  const std::size_t payload_start = w.size();
  for (double v : model.mean.values()) w.f32(v);
  for (double v : model.components.values()) w.f32(v);
  for (double v : model.eigenvalues) w.f32(v);
  w.u64(w.checksum(payload_start));
  detail::write_file_bytes(path.string(), w.bytes());
}

PcaModel read_pca_file(const std::filesystem::path& path) {
  const std::string source = path.string();
  const auto bytes = detail::read_file_bytes(source);
  detail::ByteReader r(bytes, source);
  r.need(4);
  if (r.raw(4) != "VPC1") throw FormatError(FormatError::Kind::bad_magic, source + ": not a PCA model (bad magic)");
  if (const auto v = r.u32(); v != kPcaFileVersion) {
    throw FormatError(FormatError::Kind::version_mismatch,
                      source + ": PCA file version " + std::to_string(v) + ", expected " + std::to_string(kPcaFileVersion));
  }
  PcaModel model;
  model.input_dim = r.u32();
  model.output_dim = r.u32();
  if (const auto dtype = r.u32(); dtype != 0) {
    throw FormatError(FormatError::Kind::unsupported, source + ": unsupported dtype code " + std::to_string(dtype));
  }
  const std::size_t d = model.input_dim, k = model.output_dim;
  if (d == 0 || k == 0 || k > d) throw DataError(source + ": invalid PCA dimensions");
  const std::size_t payload_start = r.position();
  r.need((d + k * d + k) * 4);
  std::vector<double> mean(d), comps(k * d);
  for (auto& v : mean) v = r.f32();
  for (auto& v : comps) v = r.f32();
  for (std::size_t i = 0; i < k; ++i) model.eigenvalues.push_back(r.f32());
  const std::size_t payload_end = r.position();
  if (r.u64() != r.checksum(payload_start, payload_end)) {
    throw FormatError(FormatError::Kind::checksum_mismatch, source + ": payload checksum mismatch");
  }
  model.mean = Tensor({d}, std::move(mean));
  model.components = Tensor({k, d}, std::move(comps));
  return model;
}

}  // namespace captionforge
