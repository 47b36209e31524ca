#include "xai3d/atlas.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "xai3d/cohort.hpp"
#include "xai3d/random.hpp"

namespace xai3d {

namespace fs = std::filesystem;

ProbabilisticAtlas::ProbabilisticAtlas(std::vector<std::string> names, std::vector<Volume3D> regions)
    : names_(std::move(names)), regions_(std::move(regions)) {
  require(!names_.empty(), ErrorKind::invalid_argument, "atlas: at least one region required");
  require(names_.size() == regions_.size(), ErrorKind::invalid_argument, "atlas: one name per region volume");
  dims_ = regions_.front().dims();
  Eigen::ArrayXd total = Eigen::ArrayXd::Zero(dims_.size());
  for (std::size_t r = 0; r < regions_.size(); ++r) {
    require(regions_[r].dims() == dims_, ErrorKind::dimension_mismatch, "atlas: region " + names_[r] + " dims differ");
    require(names_[r] != kUndefinedRegion, ErrorKind::invalid_argument, "atlas: region name NA is reserved");
    const auto& p = regions_[r].voxels();
    require((p >= 0.0).all() && (p <= 1.0).all(), ErrorKind::invalid_argument,
            "atlas: region " + names_[r] + " has probabilities outside [0, 1]");
    total += p;
  }
  require((total <= 1.0 + 1e-6).all(), ErrorKind::invalid_argument,
          "atlas: per-voxel probabilities sum above 1 (max " + std::to_string(total.maxCoeff()) + ")");
}

int ProbabilisticAtlas::argmax(Eigen::Index v) const {
  int best = -1;
  double best_p = 0.0;
  for (int r = 0; r < regions(); ++r) {
    const double p = regions_[std::size_t(r)][v];
    if (p > best_p) {
      best = r;
      best_p = p;
    }
  }
  return best;
}

Volume3D register_to_atlas(const GlobalExplanation& g, const ProbabilisticAtlas& atlas, const AffineTransform3D& t) {
  return apply_affine(g.map, t, atlas.dims());
}

Eigen::Index selection_size(double fraction, Eigen::Index voxels) {
  require(fraction > 0.0 && fraction < 1.0, ErrorKind::invalid_argument, "threshold fraction must lie in (0, 1)");
  const double exact = fraction * double(voxels);
  const double nearest = std::round(exact);
  if (std::abs(exact - nearest) <= 1e-9 * std::max(1.0, exact)) return Eigen::Index(nearest);
  return Eigen::Index(std::ceil(exact));
}

std::vector<Eigen::Index> top_voxels(const Volume3D& v, Eigen::Index count) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(v.size()));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  const auto n = std::min<std::size_t>(order.size(), std::size_t(count));
  std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(n), order.end(),
                    [&](Eigen::Index a, Eigen::Index b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  order.resize(n);
  return order;
}

Eigen::Index RegionHistogram::count(const std::string& region) const {
  for (const auto& [name, n] : counts)
    if (name == region) return n;
  return 0;
}

RegionHistogram threshold_histogram(const Volume3D& g_in_atlas, const ProbabilisticAtlas& atlas, double fraction) {
  require(g_in_atlas.dims() == atlas.dims(), ErrorKind::dimension_mismatch,
          "threshold_histogram: map is " + to_string(g_in_atlas.dims()) + ", atlas is " + to_string(atlas.dims()));
  RegionHistogram h;
  h.fraction = fraction;
  const auto selected = top_voxels(g_in_atlas, selection_size(fraction, g_in_atlas.size()));
  h.selected = Eigen::Index(selected.size());
  std::vector<Eigen::Index> counts(std::size_t(atlas.regions()) + 1, 0);
  for (Eigen::Index v : selected) {
    const int r = atlas.argmax(v);
    ++counts[r < 0 ? counts.size() - 1 : std::size_t(r)];
  }
  for (int r = 0; r < atlas.regions(); ++r) h.counts.emplace_back(atlas.name(r), counts[std::size_t(r)]);
  h.counts.emplace_back(kUndefinedRegion, counts.back());
  return h;
}

ProbabilisticAtlas make_synthetic_atlas(Dims dims, int n_regions, std::uint64_t seed) {
  require(n_regions >= 1, ErrorKind::invalid_argument, "make_synthetic_atlas: need at least one region");
  require(dims.valid(), ErrorKind::invalid_argument, "make_synthetic_atlas: invalid dims");
  Rng rng(derive_seed(seed, "atlas"));
  const double extent = std::max({dims.w, dims.h, dims.d});
  std::vector<Volume3D> blobs;
  Eigen::ArrayXd total = Eigen::ArrayXd::Zero(dims.size());
  for (int r = 0; r < n_regions; ++r) {
    const Eigen::Vector3d c(uniform(rng, 0, dims.w), uniform(rng, 0, dims.h), uniform(rng, 0, dims.d));
    const double sigma = uniform(rng, 0.12, 0.3) * extent;
    const double peak = uniform(rng, 0.6, 1.0);
    Volume3D b(dims);
    for (int z = 0; z < dims.d; ++z)
      for (int y = 0; y < dims.h; ++y)
        for (int x = 0; x < dims.w; ++x) {
          const double p = peak * std::exp(-(Eigen::Vector3d(x, y, z) - c).squaredNorm() / (2 * sigma * sigma));
          b(x, y, z) = p >= 0.05 * peak ? p : 0.0;
        }
    total += b.voxels();
    blobs.push_back(std::move(b));
  }
  const Eigen::ArrayXd scale = total.max(1.0).inverse();
  std::vector<std::string> names;
  for (int r = 0; r < n_regions; ++r) {
    blobs[std::size_t(r)].voxels() *= scale;
    char name[32];
    std::snprintf(name, sizeof name, "region_%02d", r + 1);
    names.emplace_back(name);
  }
  return ProbabilisticAtlas(std::move(names), std::move(blobs));
}

void write_atlas(const fs::path& dir, const ProbabilisticAtlas& atlas) {
  json j;
  j["dims"] = {atlas.dims().w, atlas.dims().h, atlas.dims().d};
  j["regions"] = json::array();
  for (int r = 0; r < atlas.regions(); ++r) {
    const std::string file = "regions/" + atlas.name(r) + ".xv3d";
    VolumeMeta meta;
    meta.extra = {{"kind", "atlas_region"}, {"region", atlas.name(r)}};
    write_volume(dir / file, atlas.probability(r), meta);
    j["regions"].push_back({{"name", atlas.name(r)}, {"path", file}});
  }
  write_text_file(dir / "atlas.json", j.dump(2) + "\n");
}

ProbabilisticAtlas read_atlas(const fs::path& dir) {
  const json j = read_json_file(dir / "atlas.json");
  std::vector<std::string> names;
  std::vector<Volume3D> regions;
  try {
    const Dims dims{j.at("dims")[0].get<int>(), j.at("dims")[1].get<int>(), j.at("dims")[2].get<int>()};
    for (const auto& r : j.at("regions")) {
      names.push_back(r.at("name").get<std::string>());
      regions.push_back(read_volume(dir / r.at("path").get<std::string>()).volume);
      require(regions.back().dims() == dims, ErrorKind::io, "atlas region " + names.back() + " dims differ from manifest");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, std::string("malformed atlas manifest: ") + e.what());
  }
  return ProbabilisticAtlas(std::move(names), std::move(regions));
}

std::string histogram_csv(const std::vector<RegionHistogram>& histograms) {
  std::ostringstream out;
  out << "region,threshold,count\n";
  out.setf(std::ios::fixed);
  out.precision(6);
  for (const auto& h : histograms)
    for (const auto& [name, n] : h.counts) out << name << ',' << h.fraction << ',' << n << '\n';
  return out.str();
}

}  // namespace xai3d
