#pragma once

// Cohort-level explanations. PCA treats subjects as samples and voxels as features; the
// total-* maps are weighted averages of normalized component volumes, and the framework map
// fuses total-Shape, total-SHAP and total-GradCam in that fixed order.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "xai3d/metrics.hpp"
#include "xai3d/volume.hpp"

namespace xai3d {

struct PCAModel {
  Dims dims;
  Eigen::VectorXd mean;               // voxels
  Eigen::MatrixXd components;         // voxels x k, orthonormal columns
  Eigen::VectorXd variances;          // eigenvalues, descending
  Eigen::VectorXd explained_ratio;    // variances / total variance
  double total_variance = 0.0;

  int k() const { return int(components.cols()); }
  double explained_total() const { return explained_ratio.sum(); }
  Eigen::VectorXd project(const Volume3D& v) const;
  Volume3D reconstruct(const Eigen::VectorXd& coefficients) const;
};

/// Top-k principal directions of the voxel covariance (unbiased, n - 1). Uses the n x n Gram
/// matrix when there are fewer samples than voxels. Signs make each component's
/// largest-magnitude entry positive.
PCAModel fit_pca(const std::vector<Volume3D>& samples, int k);

/// Component `i` reshaped to the sample grid and min-max normalized.
Volume3D component_volume(const PCAModel& model, int i);

enum class GlobalSource { total_shape, total_shap, total_gradcam, framework };

const char* to_string(GlobalSource source);

struct GlobalExplanation {
  Volume3D map;
  GlobalSource source = GlobalSource::total_shape;
  int class_index = 1;
  std::string hemisphere = "L";
  std::string modality = "skeleton";
  std::vector<double> weights;
  double explained_variance = 0.0;  // PCA-derived maps only
};

/// Normalized weighted average of the component volumes; k must equal the weight count.
GlobalExplanation total_from_pca(const PCAModel& model, GlobalSource source,
                                 const WeightTensor& weights = component_weight_tensor());

/// (w_shape, w_shap, w_gradcam), a permutation of {0.85, 0.5, 0.1}, named by its digits.
struct FusionWeights {
  double shape = 0.85;
  double shap = 0.5;
  double gradcam = 0.1;

  static FusionWeights from_code(int code);
  int code() const;
  WeightTensor tensor() const { return WeightTensor{shape, shap, gradcam}; }
};

inline constexpr std::array<int, 6> kAblationCodes = {851, 815, 185, 158, 518, 581};

/// Per-source alignment onto the total-Shape grid (shape, shap, gradcam).
using Alignment = std::array<std::optional<AffineTransform3D>, 3>;

GlobalExplanation fuse_framework(const GlobalExplanation& shape, const GlobalExplanation& shap,
                                 const GlobalExplanation& gradcam, const FusionWeights& weights = {},
                                 const Alignment& alignment = {});

struct AblationRow {
  int code = 0;
  GlobalExplanation explanation;
  ExplanationScore score;
};

/// One fused map and score per ablation code, in kAblationCodes order.
std::vector<AblationRow> run_ablation(const GlobalExplanation& shape, const GlobalExplanation& shap,
                                      const GlobalExplanation& gradcam, const Scorer& f,
                                      const PerturbationPolicy& policy, const Alignment& alignment = {});

}  // namespace xai3d
