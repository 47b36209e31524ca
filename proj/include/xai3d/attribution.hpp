#pragma once

// Local attributions: 3D GradCAM from last-conv activations and Shapley values over a
// supervoxel partition. Shapley "withheld" features are realized by substituting a baseline
// volume over the segments outside the coalition.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xai3d/network.hpp"
#include "xai3d/volume.hpp"

namespace xai3d {

enum class AttributionMethod { gradcam, shap };

const char* to_string(AttributionMethod method);

struct AttributionMap {
  Volume3D map;
  AttributionMethod method = AttributionMethod::gradcam;
  int class_index = 1;
  std::string subject_id;
};

/// Assigns every voxel to exactly one of `segments` nonempty segments.
class SupervoxelPartition {
 public:
  SupervoxelPartition() = default;
  SupervoxelPartition(Dims dims, std::vector<int> labels);

  const Dims& dims() const { return dims_; }
  int segments() const { return int(members_.size()); }
  int label(Eigen::Index voxel) const { return labels_[std::size_t(voxel)]; }
  const std::vector<Eigen::Index>& members(int segment) const { return members_[std::size_t(segment)]; }

 private:
  Dims dims_;
  std::vector<int> labels_;
  std::vector<std::vector<Eigen::Index>> members_;
};

/// Axis-aligned blocks of `block` voxels per axis; boundary blocks may be smaller.
SupervoxelPartition make_partition(Dims dims, int block);
SupervoxelPartition make_partition(Dims dims, Dims block);

/// Black-box model output for one input.
using Scorer = std::function<double(const Volume3D&)>;

/// Raw (pre-softmax) class score of a model.
Scorer class_scorer(const Model& model, int class_index);

/// x with every segment not in `keep` replaced by the baseline.
Volume3D compose_masked(const Volume3D& x, const Volume3D& baseline, const SupervoxelPartition& partition,
                        const std::vector<bool>& keep);

/// Spreads one value per segment uniformly over that segment's voxels.
Volume3D broadcast_segments(const std::vector<double>& values, const SupervoxelPartition& partition);

/// ReLU(sum_n alpha_n A^n) with alpha_n the voxel mean of dy/dA^n, at activation resolution.
Eigen::VectorXd gradcam_weighted_sum(const Eigen::MatrixXd& activation, const Eigen::MatrixXd& gradient);

/// GradCAM map: trilinearly upsampled to the input grid and min-max normalized.
AttributionMap gradcam3d(const Model& model, const Volume3D& x, int class_index);

inline constexpr int kMaxExactSegments = 16;

/// Exact Shapley values per segment by enumerating all 2^d coalitions.
std::vector<double> shapley_exact_values(const Scorer& f, const Volume3D& x, const SupervoxelPartition& partition,
                                         const Volume3D& baseline);

/// Permutation-sampling estimate; deterministic per seed.
std::vector<double> shapley_sampled_values(const Scorer& f, const Volume3D& x, const SupervoxelPartition& partition,
                                           const Volume3D& baseline, int n_permutations, std::uint64_t seed);

AttributionMap shapley_exact(const Scorer& f, const Volume3D& x, const SupervoxelPartition& partition,
                             const Volume3D& baseline);
AttributionMap shapley_sampled(const Scorer& f, const Volume3D& x, const SupervoxelPartition& partition,
                               const Volume3D& baseline, int n_permutations, std::uint64_t seed);

}  // namespace xai3d
