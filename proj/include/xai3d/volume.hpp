#pragma once

// Dense 3D scalar volumes and the shared numeric primitives built on them.
//
// Layout is fixed project-wide: row-major with x fastest, so the voxel at
// (x, y, z) lives at x + w * (y + h * z). Every module indexes through
// linear_index()/coords_of() so maps and inputs never disagree on orientation.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "xai3d/error.hpp"

namespace xai3d {

struct Dims {
  int w = 0;
  int h = 0;
  int d = 0;

  Eigen::Index size() const { return Eigen::Index(w) * h * d; }
  bool valid() const { return w > 0 && h > 0 && d > 0; }
  int operator[](int axis) const { return axis == 0 ? w : (axis == 1 ? h : d); }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& dims) {
  return std::to_string(dims.w) + "x" + std::to_string(dims.h) + "x" + std::to_string(dims.d);
}

inline Eigen::Index linear_index(const Dims& dims, int x, int y, int z) {
  return Eigen::Index(x) + Eigen::Index(dims.w) * (Eigen::Index(y) + Eigen::Index(dims.h) * z);
}

inline std::array<int, 3> coords_of(const Dims& dims, Eigen::Index index) {
  const int x = int(index % dims.w);
  const int y = int((index / dims.w) % dims.h);
  const int z = int(index / (Eigen::Index(dims.w) * dims.h));
  return {x, y, z};
}

template <typename Scalar>
class Volume {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Volume() = default;

  explicit Volume(Dims dims, Scalar fill = Scalar(0)) : dims_(dims) {
    require(dims.valid(), ErrorKind::invalid_argument, "volume dims must be positive, got " + to_string(dims));
    voxels_ = Storage::Constant(dims.size(), fill);
  }

  Volume(Dims dims, Storage voxels) : dims_(dims), voxels_(std::move(voxels)) {
    require(dims.valid(), ErrorKind::invalid_argument, "volume dims must be positive, got " + to_string(dims));
    require(voxels_.size() == dims.size(), ErrorKind::dimension_mismatch,
            "voxel count " + std::to_string(voxels_.size()) + " does not match dims " + to_string(dims));
    require(voxels_.allFinite(), ErrorKind::numeric, "volume contains non-finite voxels");
  }

  const Dims& dims() const { return dims_; }
  Eigen::Index size() const { return voxels_.size(); }
  bool empty() const { return voxels_.size() == 0; }

  const Storage& voxels() const { return voxels_; }
  Storage& voxels() { return voxels_; }

  Scalar operator()(int x, int y, int z) const { return voxels_[linear_index(dims_, x, y, z)]; }
  Scalar& operator()(int x, int y, int z) { return voxels_[linear_index(dims_, x, y, z)]; }
  Scalar operator[](Eigen::Index i) const { return voxels_[i]; }
  Scalar& operator[](Eigen::Index i) { return voxels_[i]; }

  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims_.w && y < dims_.h && z < dims_.d;
  }

  const Eigen::Vector3d& spacing() const { return spacing_; }
  void set_spacing(const Eigen::Vector3d& spacing) { spacing_ = spacing; }

  bool is_finite() const { return voxels_.allFinite(); }

  template <typename Other>
  Volume<Other> cast() const {
    Volume<Other> out(dims_, voxels_.template cast<Other>().eval());
    out.set_spacing(spacing_);
    return out;
  }

 private:
  Dims dims_;
  Storage voxels_;
  Eigen::Vector3d spacing_ = Eigen::Vector3d::Ones();
};

using Volume3D = Volume<double>;
using Volume3Df = Volume<float>;

template <typename Scalar>
void require_same_dims(const Volume<Scalar>& a, const Volume<Scalar>& b, const char* context) {
  require(a.dims() == b.dims(), ErrorKind::dimension_mismatch,
          std::string(context) + ": dims " + to_string(a.dims()) + " vs " + to_string(b.dims()));
}

/// Ordered, strictly positive weights for voxelwise averaging.
class WeightTensor {
 public:
  WeightTensor() = default;
  WeightTensor(std::initializer_list<double> weights) : WeightTensor(std::vector<double>(weights)) {}
  explicit WeightTensor(std::vector<double> weights) : weights_(std::move(weights)) {
    for (double w : weights_) {
      require(std::isfinite(w) && w > 0.0, ErrorKind::invalid_argument,
              "weights must be strictly positive, got " + std::to_string(w));
    }
  }

  std::size_t size() const { return weights_.size(); }
  double operator[](std::size_t i) const { return weights_[i]; }
  const std::vector<double>& values() const { return weights_; }
  double sum() const {
    double s = 0.0;
    for (double w : weights_) s += w;
    return s;
  }

 private:
  std::vector<double> weights_;
};

/// Six-component PCA weighting used for the total-* global maps.
inline WeightTensor component_weight_tensor() { return WeightTensor{0.85, 0.7, 0.5, 0.3, 0.1, 0.001}; }

/// G = sum(w_i * x_i) / sum(w_i), voxelwise.
template <typename Scalar>
Volume<Scalar> weighted_average(std::span<const Volume<Scalar>> volumes, const WeightTensor& weights) {
  require(!volumes.empty(), ErrorKind::invalid_argument, "weighted_average: empty volume list");
  require(volumes.size() == weights.size(), ErrorKind::invalid_argument,
          "weighted_average: " + std::to_string(volumes.size()) + " volumes but " +
              std::to_string(weights.size()) + " weights");
  const Dims dims = volumes.front().dims();
  typename Volume<Scalar>::Storage acc = Volume<Scalar>::Storage::Zero(dims.size());
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    require_same_dims(volumes[i], volumes.front(), "weighted_average");
    acc += Scalar(weights[i]) * volumes[i].voxels();
  }
  acc /= Scalar(weights.sum());
  return Volume<Scalar>(dims, std::move(acc));
}

template <typename Scalar>
Volume<Scalar> weighted_average(const std::vector<Volume<Scalar>>& volumes, const WeightTensor& weights) {
  return weighted_average(std::span<const Volume<Scalar>>(volumes), weights);
}

/// Rescales to [0, 1]. A constant volume carries no signal and maps to zeros.
template <typename Scalar>
Volume<Scalar> minmax_normalize(const Volume<Scalar>& v) {
  const Scalar lo = v.voxels().minCoeff();
  const Scalar hi = v.voxels().maxCoeff();
  if (!(hi > lo)) return Volume<Scalar>(v.dims(), Scalar(0));
  typename Volume<Scalar>::Storage out = (v.voxels() - lo) / (hi - lo);
  Volume<Scalar> result(v.dims(), std::move(out));
  result.set_spacing(v.spacing());
  return result;
}

enum class Interpolation { nearest, trilinear };

/// Maps source voxel coordinates p to target coordinates q = linear * p + translation.
struct AffineTransform3D {
  Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Interpolation interpolation = Interpolation::trilinear;

  static AffineTransform3D identity(Interpolation mode = Interpolation::trilinear) {
    AffineTransform3D t;
    t.interpolation = mode;
    return t;
  }

  static AffineTransform3D translate(const Eigen::Vector3d& shift, Interpolation mode = Interpolation::trilinear) {
    AffineTransform3D t;
    t.translation = shift;
    t.interpolation = mode;
    return t;
  }

  /// Rotation by `radians` about `axis` (0=x, 1=y, 2=z) through `center`.
  static AffineTransform3D rotation_about(const Eigen::Vector3d& center, int axis, double radians,
                                          Interpolation mode = Interpolation::trilinear) {
    Eigen::Vector3d unit = Eigen::Vector3d::Zero();
    unit[axis] = 1.0;
    AffineTransform3D t;
    t.linear = Eigen::AngleAxisd(radians, unit).toRotationMatrix();
    t.translation = center - t.linear * center;
    t.interpolation = mode;
    return t;
  }

  static AffineTransform3D scale_about(const Eigen::Vector3d& center, const Eigen::Vector3d& factors,
                                       Interpolation mode = Interpolation::trilinear) {
    AffineTransform3D t;
    t.linear = factors.asDiagonal();
    t.translation = center - t.linear * center;
    t.interpolation = mode;
    return t;
  }

  bool invertible() const { return std::abs(linear.determinant()) > 1e-12; }

  /// Composition: apply `this` after `first`.
  AffineTransform3D after(const AffineTransform3D& first) const {
    AffineTransform3D t;
    t.linear = linear * first.linear;
    t.translation = linear * first.translation + translation;
    t.interpolation = interpolation;
    return t;
  }
};

namespace detail {

inline double snap_to_grid(double c) {
  const double r = std::round(c);
  return std::abs(c - r) < 1e-9 ? r : c;
}

template <typename Scalar>
Scalar zero_padded_at(const Volume<Scalar>& v, int x, int y, int z) {
  return v.contains(x, y, z) ? v(x, y, z) : Scalar(0);
}

}  // namespace detail

/// Trilinear sample with zero padding outside the domain.
template <typename Scalar>
Scalar sample_trilinear(const Volume<Scalar>& v, const Eigen::Vector3d& p) {
  const double px = detail::snap_to_grid(p.x());
  const double py = detail::snap_to_grid(p.y());
  const double pz = detail::snap_to_grid(p.z());
  const double fx = std::floor(px), fy = std::floor(py), fz = std::floor(pz);
  const int x0 = int(fx), y0 = int(fy), z0 = int(fz);
  const double tx = px - fx, ty = py - fy, tz = pz - fz;
  if (tx == 0.0 && ty == 0.0 && tz == 0.0) return detail::zero_padded_at(v, x0, y0, z0);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz) {
    const double wz = dz ? tz : 1.0 - tz;
    if (wz == 0.0) continue;
    for (int dy = 0; dy < 2; ++dy) {
      const double wy = dy ? ty : 1.0 - ty;
      if (wy == 0.0) continue;
      for (int dx = 0; dx < 2; ++dx) {
        const double wx = dx ? tx : 1.0 - tx;
        if (wx == 0.0) continue;
        acc += wx * wy * wz * double(detail::zero_padded_at(v, x0 + dx, y0 + dy, z0 + dz));
      }
    }
  }
  return Scalar(acc);
}

template <typename Scalar>
Scalar sample_nearest(const Volume<Scalar>& v, const Eigen::Vector3d& p) {
  const int x = int(std::floor(p.x() + 0.5));
  const int y = int(std::floor(p.y() + 0.5));
  const int z = int(std::floor(p.z() + 0.5));
  return detail::zero_padded_at(v, x, y, z);
}

/// Resamples `v` into a grid of `out_dims` by inverse mapping each output voxel.
/// Samples that fall outside the source domain are 0.
template <typename Scalar>
Volume<Scalar> apply_affine(const Volume<Scalar>& v, const AffineTransform3D& t, Dims out_dims) {
  require(t.invertible(), ErrorKind::invalid_argument, "apply_affine: singular transform");
  require(out_dims.valid(), ErrorKind::invalid_argument, "apply_affine: invalid output dims");
  const Eigen::Matrix3d inverse = t.linear.inverse();
  Volume<Scalar> out(out_dims);
  for (int z = 0; z < out_dims.d; ++z) {
    for (int y = 0; y < out_dims.h; ++y) {
      for (int x = 0; x < out_dims.w; ++x) {
        const Eigen::Vector3d p = inverse * (Eigen::Vector3d(x, y, z) - t.translation);
        out(x, y, z) = t.interpolation == Interpolation::nearest ? sample_nearest(v, p) : sample_trilinear(v, p);
      }
    }
  }
  out.set_spacing(v.spacing());
  return out;
}

template <typename Scalar>
Volume<Scalar> apply_affine(const Volume<Scalar>& v, const AffineTransform3D& t) {
  return apply_affine(v, t, v.dims());
}

/// Trilinear resize with voxel-center alignment and edge clamping.
template <typename Scalar>
Volume<Scalar> resize_trilinear(const Volume<Scalar>& v, Dims out_dims) {
  if (out_dims == v.dims()) return v;
  const Dims in = v.dims();
  Volume<Scalar> out(out_dims);
  auto source_coord = [](int q, int n_in, int n_out) {
    const double c = (q + 0.5) * double(n_in) / double(n_out) - 0.5;
    return std::clamp(c, 0.0, double(n_in - 1));
  };
  for (int z = 0; z < out_dims.d; ++z) {
    const double cz = source_coord(z, in.d, out_dims.d);
    for (int y = 0; y < out_dims.h; ++y) {
      const double cy = source_coord(y, in.h, out_dims.h);
      for (int x = 0; x < out_dims.w; ++x) {
        const double cx = source_coord(x, in.w, out_dims.w);
        out(x, y, z) = sample_trilinear(v, Eigen::Vector3d(cx, cy, cz));
      }
    }
  }
  return out;
}

/// Pearson correlation. Throws ErrorKind::numeric when either series has zero variance.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::dimension_mismatch, "pearson: series lengths differ");
  require(a.size() >= 2, ErrorKind::invalid_argument, "pearson: need at least two samples");
  const auto n = Eigen::Index(a.size());
  const Eigen::Map<const Eigen::ArrayXd> xa(a.data(), n);
  const Eigen::Map<const Eigen::ArrayXd> xb(b.data(), n);
  const Eigen::ArrayXd da = xa - xa.mean();
  const Eigen::ArrayXd db = xb - xb.mean();
  const double saa = da.square().sum();
  const double sbb = db.square().sum();
  if (!(saa > 0.0) || !(sbb > 0.0)) {
    throw Error(ErrorKind::numeric, "undefined correlation: zero variance in " +
                                        std::string(saa > 0.0 ? "second" : "first") + " series");
  }
  const double r = (da * db).sum() / std::sqrt(saa * sbb);
  return std::clamp(r, -1.0, 1.0);
}

}  // namespace xai3d
