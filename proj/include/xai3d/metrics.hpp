#pragma once

// Explanation quality scores.
//
// faithfulness: Pearson correlation, over random segment subsets S, between the summed
//   attribution of S and the output drop f(x) - f(x with S set to the baseline).
// complexity: entropy of the per-segment attribution-magnitude distribution.

#include <cstdint>
#include <string>
#include <vector>

#include "xai3d/attribution.hpp"

namespace xai3d {

inline constexpr int kDefaultPerturbations = 70;

struct PerturbationPolicy {
  double baseline = 0.0;  // "black" baseline
  int draws = kDefaultPerturbations;
  SupervoxelPartition partition;
  std::uint64_t seed = 0;

  /// Zero baseline, 70 draws over a grid^3 block partition of `dims`.
  static PerturbationPolicy standard(Dims dims, int grid = 4, std::uint64_t seed = 0);
  void validate(const Dims& dims) const;
};

struct ExplanationScore {
  double faithfulness = 0.0;
  double complexity = 0.0;
  int n_perturbations = 0;
  std::string baseline_kind = "zero";
  int segments = 0;
};

/// Sum of voxel attributions within each segment.
std::vector<double> segment_sums(const Volume3D& g, const SupervoxelPartition& partition);

/// Subsets used by faithfulness: size uniform in [1, max(1, d/2)], then a uniform subset of that size.
std::vector<std::vector<int>> draw_subsets(int segments, int draws, std::uint64_t seed);

/// Summed attributions and output drops for each drawn subset.
struct FaithfulnessSamples {
  std::vector<double> attribution_sums;
  std::vector<double> output_drops;
};

FaithfulnessSamples faithfulness_samples(const Scorer& f, const Volume3D& g, const Volume3D& x,
                                         const PerturbationPolicy& policy);

/// Throws ErrorKind::numeric (undefined correlation) when either series is constant.
double faithfulness(const Scorer& f, const Volume3D& g, const Volume3D& x, const PerturbationPolicy& policy);

double complexity(const Volume3D& g, const SupervoxelPartition& partition);

/// Entropy of |p| / sum |p| with 0 ln(1/0) = 0.
double entropy_of_magnitudes(const std::vector<double>& values);

/// Scores a global map with the total-Shape map as the model input.
ExplanationScore score_global(const Volume3D& total_shape, const Volume3D& candidate, const Scorer& f,
                              const PerturbationPolicy& policy);

}  // namespace xai3d
