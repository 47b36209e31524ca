#include "xai3d/attribution.hpp"

#include <cmath>
#include <numeric>

#include "xai3d/parallel.hpp"
#include "xai3d/random.hpp"

namespace xai3d {

const char* to_string(AttributionMethod method) {
  return method == AttributionMethod::gradcam ? "gradcam" : "shap";
}

SupervoxelPartition::SupervoxelPartition(Dims dims, std::vector<int> labels) : dims_(dims), labels_(std::move(labels)) {
  require(dims.valid(), ErrorKind::invalid_argument, "partition: invalid dims");
  require(Eigen::Index(labels_.size()) == dims.size(), ErrorKind::dimension_mismatch,
          "partition: label count does not match dims");
  int n = 0;
  for (int l : labels_) {
    require(l >= 0, ErrorKind::invalid_argument, "partition: negative segment label");
    n = std::max(n, l + 1);
  }
  members_.resize(std::size_t(n));
  for (std::size_t i = 0; i < labels_.size(); ++i) members_[std::size_t(labels_[i])].push_back(Eigen::Index(i));
  for (const auto& m : members_) require(!m.empty(), ErrorKind::invalid_argument, "partition: empty segment");
}

SupervoxelPartition make_partition(Dims dims, Dims block) {
  require(block.valid(), ErrorKind::invalid_argument, "make_partition: block size must be at least 1");
  const int bx = (dims.w + block.w - 1) / block.w;
  const int by = (dims.h + block.h - 1) / block.h;
  std::vector<int> labels(static_cast<std::size_t>(dims.size()));
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x) {
        labels[std::size_t(linear_index(dims, x, y, z))] = x / block.w + bx * (y / block.h + by * (z / block.d));
      }
  return SupervoxelPartition(dims, std::move(labels));
}

SupervoxelPartition make_partition(Dims dims, int block) { return make_partition(dims, Dims{block, block, block}); }

Scorer class_scorer(const Model& model, int class_index) {
  require(class_index >= 0 && class_index < kClassCount, ErrorKind::invalid_argument, "scorer: class out of range");
  return [&model, class_index](const Volume3D& x) { return class_scores(model, x)[class_index]; };
}

Volume3D compose_masked(const Volume3D& x, const Volume3D& baseline, const SupervoxelPartition& partition,
                        const std::vector<bool>& keep) {
  require_same_dims(x, baseline, "compose_masked");
  require(partition.dims() == x.dims(), ErrorKind::dimension_mismatch, "compose_masked: partition dims differ");
  Volume3D out = x;
  for (int s = 0; s < partition.segments(); ++s) {
    if (keep[std::size_t(s)]) continue;
    for (Eigen::Index v : partition.members(s)) out[v] = baseline[v];
  }
  return out;
}

Volume3D broadcast_segments(const std::vector<double>& values, const SupervoxelPartition& partition) {
  require(int(values.size()) == partition.segments(), ErrorKind::dimension_mismatch,
          "broadcast_segments: one value per segment required");
  Volume3D out(partition.dims());
  for (int s = 0; s < partition.segments(); ++s) {
    for (Eigen::Index v : partition.members(s)) out[v] = values[std::size_t(s)];
  }
  return out;
}

Eigen::VectorXd gradcam_weighted_sum(const Eigen::MatrixXd& activation, const Eigen::MatrixXd& gradient) {
  require(activation.rows() == gradient.rows() && activation.cols() == gradient.cols(), ErrorKind::dimension_mismatch,
          "gradcam: activation and gradient shapes differ");
  const Eigen::VectorXd alpha = gradient.rowwise().mean();
  return (activation.transpose() * alpha).cwiseMax(0.0);
}

AttributionMap gradcam3d(const Model& model, const Volume3D& x, int class_index) {
  ForwardCache cache;
  forward_batch(model, {&x}, PassOptions{}, &cache);
  Eigen::MatrixXd upstream = Eigen::MatrixXd::Zero(kClassCount, 1);
  upstream(class_index, 0) = 1.0;
  std::vector<Eigen::MatrixXd> grads;
  backward_batch(model, cache, upstream, nullptr, &grads);
  require(!grads.empty() && grads[0].size() > 0, ErrorKind::numeric, "gradcam: gradient unavailable");
  const auto& last = cache.levels.back();
  Eigen::VectorXd cam = gradcam_weighted_sum(last.act[0], grads[0]);
  require(cam.allFinite(), ErrorKind::numeric, "gradcam: non-finite map");
  const Volume3D coarse(last.in_dims, cam.array());
  return AttributionMap{minmax_normalize(resize_trilinear(coarse, x.dims())), AttributionMethod::gradcam, class_index,
                        {}};
}

namespace {

void check_shapley_inputs(const Volume3D& x, const SupervoxelPartition& partition, const Volume3D& baseline) {
  require_same_dims(x, baseline, "shapley: baseline");
  require(partition.dims() == x.dims(), ErrorKind::dimension_mismatch, "shapley: partition dims differ from input");
}

double checked(double value) {
  require(std::isfinite(value), ErrorKind::numeric, "shapley: scorer returned a non-finite value");
  return value;
}

}  // namespace

std::vector<double> shapley_exact_values(const Scorer& f, const Volume3D& x, const SupervoxelPartition& partition,
                                         const Volume3D& baseline) {
  check_shapley_inputs(x, partition, baseline);
  const int d = partition.segments();
  require(d <= kMaxExactSegments, ErrorKind::invalid_argument,
          "shapley_exact: " + std::to_string(d) + " segments exceeds the enumeration budget of " +
              std::to_string(kMaxExactSegments));
  const std::size_t subsets = std::size_t(1) << d;
  std::vector<double> value(subsets);
  parallel_for(subsets, [&](std::size_t mask) {
    std::vector<bool> keep(static_cast<std::size_t>(d));
    for (int s = 0; s < d; ++s) keep[std::size_t(s)] = (mask >> s) & 1u;
    value[mask] = checked(f(compose_masked(x, baseline, partition, keep)));
  });

  // |S|! (d - |S| - 1)! / d!
  std::vector<double> weight(static_cast<std::size_t>(d));
  for (int s = 0; s < d; ++s) {
    weight[std::size_t(s)] = std::exp(std::lgamma(s + 1.0) + std::lgamma(double(d - s)) - std::lgamma(d + 1.0));
  }
  std::vector<double> phi(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    const std::size_t bit = std::size_t(1) << i;
    double acc = 0.0;
    for (std::size_t mask = 0; mask < subsets; ++mask) {
      if (mask & bit) continue;
      acc += weight[std::size_t(std::popcount(mask))] * (value[mask | bit] - value[mask]);
    }
    phi[std::size_t(i)] = acc;
  }
  return phi;
}

std::vector<double> shapley_sampled_values(const Scorer& f, const Volume3D& x, const SupervoxelPartition& partition,
                                           const Volume3D& baseline, int n_permutations, std::uint64_t seed) {
  check_shapley_inputs(x, partition, baseline);
  require(n_permutations >= 1, ErrorKind::invalid_argument, "shapley_sampled: need at least one permutation");
  const int d = partition.segments();
  const double base_value = checked(f(baseline));
  std::vector<std::vector<double>> marginals(static_cast<std::size_t>(n_permutations));
  parallel_for(std::size_t(n_permutations), [&](std::size_t p) {
    Rng rng(derive_seed(seed, std::uint64_t(p)));
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    shuffle(order.begin(), order.end(), rng);
    std::vector<double> delta(static_cast<std::size_t>(d));
    Volume3D current = baseline;
    double previous = base_value;
    for (int s : order) {
      for (Eigen::Index v : partition.members(s)) current[v] = x[v];
      const double now = checked(f(current));
      delta[std::size_t(s)] = now - previous;
      previous = now;
    }
    marginals[p] = std::move(delta);
  });
  std::vector<double> phi(static_cast<std::size_t>(d), 0.0);
  for (const auto& m : marginals)
    for (int s = 0; s < d; ++s) phi[std::size_t(s)] += m[std::size_t(s)];
  for (double& v : phi) v /= n_permutations;
  return phi;
}

AttributionMap shapley_exact(const Scorer& f, const Volume3D& x, const SupervoxelPartition& partition,
                             const Volume3D& baseline) {
  return AttributionMap{broadcast_segments(shapley_exact_values(f, x, partition, baseline), partition),
                        AttributionMethod::shap, 1, {}};
}

AttributionMap shapley_sampled(const Scorer& f, const Volume3D& x, const SupervoxelPartition& partition,
                               const Volume3D& baseline, int n_permutations, std::uint64_t seed) {
  return AttributionMap{
      broadcast_segments(shapley_sampled_values(f, x, partition, baseline, n_permutations, seed), partition),
      AttributionMethod::shap, 1, {}};
}

}  // namespace xai3d
