#pragma once

// Probabilistic region atlas, registration of a global map into atlas space, and
// top-fraction voxel histograms per region.

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "xai3d/global.hpp"
#include "xai3d/volume.hpp"

namespace xai3d {

inline constexpr const char* kUndefinedRegion = "NA";
inline constexpr std::array<double, 3> kHistogramFractions = {0.05, 0.10, 0.20};

class ProbabilisticAtlas {
 public:
  ProbabilisticAtlas() = default;
  /// Validates probabilities in [0, 1] and per-voxel sums <= 1 + 1e-6.
  ProbabilisticAtlas(std::vector<std::string> names, std::vector<Volume3D> regions);

  Dims dims() const { return dims_; }
  int regions() const { return int(names_.size()); }
  const std::string& name(int r) const { return names_[std::size_t(r)]; }
  const std::vector<std::string>& names() const { return names_; }
  const Volume3D& probability(int r) const { return regions_[std::size_t(r)]; }

  /// Region with the highest probability at voxel `v` (lowest index on ties), or -1 when
  /// every region has probability 0 there.
  int argmax(Eigen::Index v) const;

 private:
  Dims dims_;
  std::vector<std::string> names_;
  std::vector<Volume3D> regions_;
};

Volume3D register_to_atlas(const GlobalExplanation& g, const ProbabilisticAtlas& atlas, const AffineTransform3D& t);

/// ceil(fraction * voxels), tolerant to representation error in the product.
Eigen::Index selection_size(double fraction, Eigen::Index voxels);

/// Indices of the `count` largest voxels; equal values are taken in ascending index order.
std::vector<Eigen::Index> top_voxels(const Volume3D& v, Eigen::Index count);

struct RegionHistogram {
  double fraction = 0.0;
  Eigen::Index selected = 0;
  std::vector<std::pair<std::string, Eigen::Index>> counts;  // atlas order, then NA

  Eigen::Index count(const std::string& region) const;
};

RegionHistogram threshold_histogram(const Volume3D& g_in_atlas, const ProbabilisticAtlas& atlas, double fraction);

/// Smooth random blobs, cut below 5% of their peak and scaled so per-voxel sums stay <= 1.
ProbabilisticAtlas make_synthetic_atlas(Dims dims, int n_regions, std::uint64_t seed);

/// One volume per region under `dir/regions/` plus `dir/atlas.json` (names, dims, files).
void write_atlas(const std::filesystem::path& dir, const ProbabilisticAtlas& atlas);
ProbabilisticAtlas read_atlas(const std::filesystem::path& dir);

/// CSV rows: region,threshold,count.
std::string histogram_csv(const std::vector<RegionHistogram>& histograms);

}  // namespace xai3d
