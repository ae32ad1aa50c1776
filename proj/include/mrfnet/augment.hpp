#pragma once

// Data augmentation: left-right reflection and random 2-D affine warps.
//
// Affine transforms are drawn in the Lie algebra of the 2-D affine group and
// mapped through the matrix exponential. Basis order (3x3 homogeneous
// generators acting on (x, y, 1), x = column, y = row):
//   0 translation-x   [[0,0,1],[0,0,0],[0,0,0]]
//   1 translation-y   [[0,0,0],[0,0,1],[0,0,0]]
//   2 rotation        [[0,-1,0],[1,0,0],[0,0,0]]
//   3 isotropic scale [[1,0,0],[0,1,0],[0,0,0]]
//   4 stretch         [[1,0,0],[0,-1,0],[0,0,0]]
//   5 shear           [[0,1,0],[1,0,0],[0,0,0]]
//
// Warps use pull-back sampling: output pixel p reads the input at
// round(A^-1 p). Pixel centres sit on integer coordinates and the origin is
// the image centre ((W-1)/2, (H-1)/2).

#include <array>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include "mrfnet/error.hpp"
#include "mrfnet/tensor.hpp"

namespace mrfnet {

using Matrix3 = Eigen::Matrix3d;
using Vector6 = Eigen::Matrix<double, 6, 1>;
using Matrix6 = Eigen::Matrix<double, 6, 6>;

struct LieAffine2D {
  Vector6 coeffs = Vector6::Zero();
};

inline Matrix3 lie_generator(std::size_t j) {
  Matrix3 b = Matrix3::Zero();
  switch (j) {
    case 0: b(0, 2) = 1.0; break;
    case 1: b(1, 2) = 1.0; break;
    case 2: b(0, 1) = -1.0; b(1, 0) = 1.0; break;
    case 3: b(0, 0) = 1.0; b(1, 1) = 1.0; break;
    case 4: b(0, 0) = 1.0; b(1, 1) = -1.0; break;
    case 5: b(0, 1) = 1.0; b(1, 0) = 1.0; break;
    default: throw ContractError("lie_generator: index out of range");
  }
  return b;
}

/// Homogeneous 3x3 transform exp(sum_j v_j B_j). Bottom row is (0, 0, 1).
inline Matrix3 exp_affine(const LieAffine2D& v) {
  if (!v.coeffs.allFinite()) throw NumericError("exp_affine: non-finite coefficient");
  Matrix3 g = Matrix3::Zero();
  for (std::size_t j = 0; j < 6; ++j) g += v.coeffs[static_cast<Eigen::Index>(j)] * lie_generator(j);
  Matrix3 a = g.exp();
  a.row(2) << 0.0, 0.0, 1.0;
  return a;
}

struct AffineSamplerConfig {
  Vector6 mean = Vector6::Zero();
  Matrix6 covariance = Matrix6::Zero();
  std::uint64_t seed = 0;

  /// Small warps: 2 px translations, ~3 degree rotations, 3% scale/stretch/shear.
  static AffineSamplerConfig defaults() {
    AffineSamplerConfig c;
    c.covariance.diagonal() << 4.0, 4.0, 0.0025, 0.0009, 0.0009, 0.0009;
    return c;
  }

  /// Matrix L with L L^T = covariance; throws ConfigError unless symmetric PSD.
  Matrix6 factor() const {
    if (!covariance.allFinite() || !mean.allFinite()) throw ConfigError("affine sampler: non-finite parameters");
    const double scale = std::max(1.0, covariance.cwiseAbs().maxCoeff());
    if ((covariance - covariance.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
      throw ConfigError("affine sampler: covariance is not symmetric");
    }
    Eigen::SelfAdjointEigenSolver<Matrix6> eig(covariance);
    if (eig.info() != Eigen::Success) throw ConfigError("affine sampler: covariance factorisation failed");
    const Vector6 lambda = eig.eigenvalues();
    if (lambda.minCoeff() < -1e-10 * scale) {
      throw ConfigError("affine sampler: covariance is not positive semi-definite");
    }
    return eig.eigenvectors() * lambda.cwiseMax(0.0).cwiseSqrt().asDiagonal();
  }
};

template <typename Rng>
Matrix3 sample_affine(const AffineSamplerConfig& cfg, Rng& rng) {
  const Matrix6 l = cfg.factor();
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector6 z;
  for (Eigen::Index j = 0; j < 6; ++j) z[j] = normal(rng);
  LieAffine2D v;
  v.coeffs = cfg.mean + l * z;
  return exp_affine(v);
}

namespace detail {

// Source pixel index for every output pixel, or -1 when it falls outside.
inline std::vector<std::ptrdiff_t> pullback_indices(std::size_t h, std::size_t w, const Matrix3& a) {
  if (!a.allFinite() || std::abs(a.determinant()) < 1e-12) {
    throw NumericError("warp_nearest: transform is singular");
  }
  const Matrix3 inv = a.inverse();
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  std::vector<std::ptrdiff_t> idx(h * w, -1);
  for (std::size_t row = 0; row < h; ++row) {
    for (std::size_t col = 0; col < w; ++col) {
      const Eigen::Vector3d p(static_cast<double>(col) - cx, static_cast<double>(row) - cy, 1.0);
      const Eigen::Vector3d s = inv * p;
      const double sc = std::floor(s.x() + cx + 0.5);
      const double sr = std::floor(s.y() + cy + 0.5);
      if (sc >= 0.0 && sr >= 0.0 && sc < static_cast<double>(w) && sr < static_cast<double>(h)) {
        idx[row * w + col] = static_cast<std::ptrdiff_t>(sr) * static_cast<std::ptrdiff_t>(w) +
                             static_cast<std::ptrdiff_t>(sc);
      }
    }
  }
  return idx;
}

}  // namespace detail

/// Nearest-neighbour warp; out-of-bounds pixels take `background` (one value per channel).
inline Grid2D warp_nearest(const Grid2D& field, const Matrix3& a, std::span<const double> background) {
  require(background.size() == field.channels(), "warp_nearest: background needs one value per channel");
  const auto idx = detail::pullback_indices(field.height(), field.width(), a);
  Grid2D out(field.height(), field.width(), field.channels());
  for (std::size_t p = 0; p < idx.size(); ++p) {
    const auto src = idx[p] >= 0 ? field.pixel(static_cast<std::size_t>(idx[p])) : background;
    std::copy(src.begin(), src.end(), out.pixel(p).begin());
  }
  return out;
}

inline LabelField warp_nearest(const LabelField& labels, const Matrix3& a, int background = 0) {
  const auto idx = detail::pullback_indices(labels.height(), labels.width(), a);
  LabelField out(labels.height(), labels.width(), background);
  for (std::size_t p = 0; p < idx.size(); ++p)
    if (idx[p] >= 0) out[p] = labels[static_cast<std::size_t>(idx[p])];
  return out;
}

inline Grid2D flip_lr(const Grid2D& field) {
  Grid2D out(field.height(), field.width(), field.channels());
  for (std::size_t y = 0; y < field.height(); ++y)
    for (std::size_t x = 0; x < field.width(); ++x) {
      const auto src = field.pixel(y, field.width() - 1 - x);
      std::copy(src.begin(), src.end(), out.pixel(y, x).begin());
    }
  return out;
}

inline LabelField flip_lr(const LabelField& labels) {
  LabelField out(labels.height(), labels.width());
  for (std::size_t y = 0; y < labels.height(); ++y)
    for (std::size_t x = 0; x < labels.width(); ++x) out(y, x) = labels(y, labels.width() - 1 - x);
  return out;
}

}  // namespace mrfnet
