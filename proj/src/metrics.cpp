#include "xai3d/metrics.hpp"

#include <cmath>
#include <numeric>

#include "xai3d/parallel.hpp"
#include "xai3d/random.hpp"

namespace xai3d {

PerturbationPolicy PerturbationPolicy::standard(Dims dims, int grid, std::uint64_t seed) {
  require(grid >= 1, ErrorKind::invalid_argument, "perturbation grid must be at least 1");
  const Dims block{(dims.w + grid - 1) / grid, (dims.h + grid - 1) / grid, (dims.d + grid - 1) / grid};
  PerturbationPolicy p;
  p.partition = make_partition(dims, block);
  p.seed = seed;
  return p;
}

void PerturbationPolicy::validate(const Dims& dims) const {
  require(draws >= 2, ErrorKind::invalid_argument, "perturbation policy: at least 2 draws required");
  require(partition.dims() == dims, ErrorKind::dimension_mismatch, "perturbation policy: partition dims differ");
  require(std::isfinite(baseline), ErrorKind::invalid_argument, "perturbation policy: baseline must be finite");
}

std::vector<double> segment_sums(const Volume3D& g, const SupervoxelPartition& partition) {
  require(g.dims() == partition.dims(), ErrorKind::dimension_mismatch, "segment_sums: dims differ");
  std::vector<double> sums(static_cast<std::size_t>(partition.segments()), 0.0);
  for (int s = 0; s < partition.segments(); ++s) {
    double acc = 0.0;
    for (Eigen::Index v : partition.members(s)) acc += g[v];
    sums[std::size_t(s)] = acc;
  }
  return sums;
}

std::vector<std::vector<int>> draw_subsets(int segments, int draws, std::uint64_t seed) {
  require(segments >= 1, ErrorKind::invalid_argument, "draw_subsets: no segments");
  Rng rng(derive_seed(seed, "faithfulness-subsets"));
  const int max_size = std::max(1, segments / 2);
  std::vector<std::vector<int>> out;
  out.reserve(std::size_t(draws));
  std::vector<int> pool(static_cast<std::size_t>(segments));
  for (int k = 0; k < draws; ++k) {
    const int size = uniform_int(rng, 1, max_size);
    std::iota(pool.begin(), pool.end(), 0);
    // Partial Fisher-Yates: the first `size` entries form a uniform subset.
    for (int i = 0; i < size; ++i) {
      const int j = i + int(rng() % std::uint64_t(segments - i));
      std::swap(pool[std::size_t(i)], pool[std::size_t(j)]);
    }
    std::vector<int> subset(pool.begin(), pool.begin() + size);
    std::sort(subset.begin(), subset.end());
    out.push_back(std::move(subset));
  }
  return out;
}

FaithfulnessSamples faithfulness_samples(const Scorer& f, const Volume3D& g, const Volume3D& x,
                                         const PerturbationPolicy& policy) {
  require_same_dims(g, x, "faithfulness");
  policy.validate(x.dims());
  const auto sums = segment_sums(g, policy.partition);
  const auto subsets = draw_subsets(policy.partition.segments(), policy.draws, policy.seed);
  const double full = f(x);
  require(std::isfinite(full), ErrorKind::numeric, "faithfulness: scorer returned a non-finite value");

  FaithfulnessSamples samples;
  samples.attribution_sums.resize(subsets.size());
  samples.output_drops.resize(subsets.size());
  parallel_for(subsets.size(), [&](std::size_t k) {
    Volume3D perturbed = x;
    double attribution = 0.0;
    for (int s : subsets[k]) {
      attribution += sums[std::size_t(s)];
      for (Eigen::Index v : policy.partition.members(s)) perturbed[v] = policy.baseline;
    }
    const double value = f(perturbed);
    require(std::isfinite(value), ErrorKind::numeric, "faithfulness: scorer returned a non-finite value");
    samples.attribution_sums[k] = attribution;
    samples.output_drops[k] = full - value;
  });
  return samples;
}

double faithfulness(const Scorer& f, const Volume3D& g, const Volume3D& x, const PerturbationPolicy& policy) {
  const auto samples = faithfulness_samples(f, g, x, policy);
  try {
    return pearson(samples.attribution_sums, samples.output_drops);
  } catch (const Error& e) {
    throw Error(ErrorKind::numeric, std::string("faithfulness: ") + e.what() +
                                        " (constant attributions over the drawn subsets, or a model whose output "
                                        "does not react to the perturbations)");
  }
}

double entropy_of_magnitudes(const std::vector<double>& values) {
  double total = 0.0;
  for (double v : values) total += std::abs(v);
  require(total > 0.0, ErrorKind::numeric, "complexity: attribution is zero everywhere");
  double h = 0.0;
  for (double v : values) {
    const double p = std::abs(v) / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double complexity(const Volume3D& g, const SupervoxelPartition& partition) {
  return entropy_of_magnitudes(segment_sums(g, partition));
}

ExplanationScore score_global(const Volume3D& total_shape, const Volume3D& candidate, const Scorer& f,
                              const PerturbationPolicy& policy) {
  require_same_dims(total_shape, candidate, "score_global");
  ExplanationScore score;
  score.faithfulness = faithfulness(f, candidate, total_shape, policy);
  score.complexity = complexity(candidate, policy.partition);
  score.n_perturbations = policy.draws;
  score.baseline_kind = policy.baseline == 0.0 ? "zero" : "constant";
  score.segments = policy.partition.segments();
  return score;
}

}  // namespace xai3d
