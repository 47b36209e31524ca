#include "xai3d/global.hpp"

#include <cmath>

namespace xai3d {

using Eigen::MatrixXd;
using Eigen::VectorXd;

Eigen::VectorXd PCAModel::project(const Volume3D& v) const {
  require(v.dims() == dims, ErrorKind::dimension_mismatch, "pca: projection dims differ");
  return components.transpose() * (v.voxels().matrix() - mean);
}

Volume3D PCAModel::reconstruct(const Eigen::VectorXd& coefficients) const {
  require(coefficients.size() == components.cols(), ErrorKind::dimension_mismatch, "pca: coefficient count");
  return Volume3D(dims, (mean + components * coefficients).array());
}

namespace {

void fix_sign(Eigen::Ref<VectorXd> v) {
  Eigen::Index arg = 0;
  v.cwiseAbs().maxCoeff(&arg);
  if (v[arg] < 0) v = -v;
}

// Extends `basis` (orthonormal columns 0..filled-1) with unit axis vectors orthogonalized
// against what is already there; used for zero-variance directions.
void complete_basis(MatrixXd& basis, Eigen::Index filled) {
  Eigen::Index axis = 0;
  for (Eigen::Index c = filled; c < basis.cols(); ++c) {
    while (true) {
      VectorXd e = VectorXd::Unit(basis.rows(), axis++);
      for (int pass = 0; pass < 2; ++pass) {
        e -= basis.leftCols(c) * (basis.leftCols(c).transpose() * e);
      }
      if (e.norm() > 1e-6) {
        basis.col(c) = e.normalized();
        break;
      }
    }
  }
}

}  // namespace

PCAModel fit_pca(const std::vector<Volume3D>& samples, int k) {
  require(k >= 1, ErrorKind::invalid_argument, "fit_pca: k must be at least 1");
  require(samples.size() >= std::size_t(k), ErrorKind::invalid_argument,
          "fit_pca: k = " + std::to_string(k) + " exceeds the sample count " + std::to_string(samples.size()));
  require(samples.size() >= 2, ErrorKind::invalid_argument, "fit_pca: need at least two samples");
  const Dims dims = samples.front().dims();
  const auto n = Eigen::Index(samples.size());
  const Eigen::Index voxels = dims.size();
  require(k <= voxels, ErrorKind::invalid_argument, "fit_pca: k exceeds the voxel count");

  MatrixXd data(voxels, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    require_same_dims(samples[std::size_t(i)], samples.front(), "fit_pca");
    data.col(i) = samples[std::size_t(i)].voxels().matrix();
  }
  PCAModel model;
  model.dims = dims;
  model.mean = data.rowwise().mean();
  data.colwise() -= model.mean;
  const double denom = double(n - 1);
  model.total_variance = data.squaredNorm() / denom;
  require(model.total_variance > 0.0, ErrorKind::numeric, "fit_pca: data has zero variance");

  model.components.resize(voxels, k);
  model.variances.resize(k);
  Eigen::Index filled = 0;
  if (n < voxels) {
    const MatrixXd gram = data.transpose() * data / denom;
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram);
    const double tol = 1e-12 * eig.eigenvalues().cwiseAbs().maxCoeff();
    for (Eigen::Index c = 0; c < k; ++c) {
      const Eigen::Index src = n - 1 - c;  // ascending -> descending
      const double lambda = eig.eigenvalues()[src];
      model.variances[c] = std::max(lambda, 0.0);
      if (lambda <= tol) continue;
      VectorXd v = data * eig.eigenvectors().col(src);
      model.components.col(c) = v / v.norm();
      filled = c + 1;
    }
  } else {
    const MatrixXd cov = data * data.transpose() / denom;
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
    const double tol = 1e-12 * eig.eigenvalues().cwiseAbs().maxCoeff();
    for (Eigen::Index c = 0; c < k; ++c) {
      const Eigen::Index src = voxels - 1 - c;
      model.variances[c] = std::max(eig.eigenvalues()[src], 0.0);
      model.components.col(c) = eig.eigenvectors().col(src);
      if (eig.eigenvalues()[src] > tol) filled = c + 1;
    }
  }
  if (filled < k) complete_basis(model.components, filled);
  for (Eigen::Index c = 0; c < k; ++c) fix_sign(model.components.col(c));
  model.explained_ratio = model.variances / model.total_variance;
  return model;
}

Volume3D component_volume(const PCAModel& model, int i) {
  require(i >= 0 && i < model.k(), ErrorKind::invalid_argument,
          "component_volume: index " + std::to_string(i) + " out of range");
  return minmax_normalize(Volume3D(model.dims, model.components.col(i).array()));
}

const char* to_string(GlobalSource source) {
  switch (source) {
    case GlobalSource::total_shape: return "total-Shape";
    case GlobalSource::total_shap: return "total-SHAP";
    case GlobalSource::total_gradcam: return "total-GradCam";
    case GlobalSource::framework: return "3D-Framework";
  }
  return "unknown";
}

GlobalExplanation total_from_pca(const PCAModel& model, GlobalSource source, const WeightTensor& weights) {
  require(int(weights.size()) == model.k(), ErrorKind::invalid_argument,
          "total_from_pca: " + std::to_string(model.k()) + " components but " + std::to_string(weights.size()) +
              " weights");
  std::vector<Volume3D> components;
  for (int i = 0; i < model.k(); ++i) components.push_back(component_volume(model, i));
  GlobalExplanation g;
  g.map = minmax_normalize(weighted_average(components, weights));
  g.source = source;
  g.weights = weights.values();
  g.explained_variance = model.explained_total();
  return g;
}

FusionWeights FusionWeights::from_code(int code) {
  auto digit = [](int d) {
    switch (d) {
      case 8: return 0.85;
      case 5: return 0.5;
      case 1: return 0.1;
    }
    return 0.0;
  };
  const int a = code / 100, b = (code / 10) % 10, c = code % 10;
  const bool valid = code >= 100 && code <= 999 && digit(a) > 0 && digit(b) > 0 && digit(c) > 0 && a != b &&
                     b != c && a != c;
  require(valid, ErrorKind::invalid_argument,
          "fusion code " + std::to_string(code) + " is not a permutation of the digits 8, 5, 1");
  return FusionWeights{digit(a), digit(b), digit(c)};
}

int FusionWeights::code() const {
  auto digit = [](double w) {
    if (w == 0.85) return 8;
    if (w == 0.5) return 5;
    if (w == 0.1) return 1;
    throw Error(ErrorKind::invalid_argument, "fusion weight " + std::to_string(w) + " is not one of 0.85, 0.5, 0.1");
  };
  return 100 * digit(shape) + 10 * digit(shap) + digit(gradcam);
}

GlobalExplanation fuse_framework(const GlobalExplanation& shape, const GlobalExplanation& shap,
                                 const GlobalExplanation& gradcam, const FusionWeights& weights,
                                 const Alignment& alignment) {
  const Dims target = shape.map.dims();
  std::vector<Volume3D> maps;
  const GlobalExplanation* sources[3] = {&shape, &shap, &gradcam};
  for (int s = 0; s < 3; ++s) {
    const auto& t = alignment[std::size_t(s)];
    maps.push_back(t ? apply_affine(sources[s]->map, *t, target) : sources[s]->map);
    require(maps.back().dims() == target, ErrorKind::dimension_mismatch,
            std::string("fuse_framework: ") + to_string(sources[s]->source) + " map is " +
                to_string(maps.back().dims()) + " after alignment, expected " + to_string(target));
  }
  GlobalExplanation g;
  g.map = minmax_normalize(weighted_average(maps, weights.tensor()));
  g.source = GlobalSource::framework;
  g.class_index = shape.class_index;
  g.hemisphere = shape.hemisphere;
  g.modality = shape.modality;
  g.weights = weights.tensor().values();
  return g;
}

std::vector<AblationRow> run_ablation(const GlobalExplanation& shape, const GlobalExplanation& shap,
                                      const GlobalExplanation& gradcam, const Scorer& f,
                                      const PerturbationPolicy& policy, const Alignment& alignment) {
  std::vector<AblationRow> rows;
  for (int code : kAblationCodes) {
    AblationRow row;
    row.code = code;
    row.explanation = fuse_framework(shape, shap, gradcam, FusionWeights::from_code(code), alignment);
    row.score = score_global(shape.map, row.explanation.map, f, policy);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace xai3d
