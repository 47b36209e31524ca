#include <doctest.h>

#include <numeric>

#include "xai3d/attribution.hpp"
#include "xai3d/random.hpp"

using namespace xai3d;

namespace {

Volume3D random_volume(Dims d, std::uint64_t seed, double lo = -1, double hi = 1) {
  Rng rng(seed);
  Volume3D v(d);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = uniform(rng, lo, hi);
  return v;
}

}  // namespace

TEST_SUITE("attribution") {
  TEST_CASE("block partitions cover every voxel exactly once") {
    const Dims d{5, 4, 3};
    const auto p = make_partition(d, 2);
    CHECK(p.segments() == 3 * 2 * 2);
    std::vector<int> seen(std::size_t(d.size()), 0);
    for (int s = 0; s < p.segments(); ++s)
      for (auto v : p.members(s)) {
        ++seen[std::size_t(v)];
        CHECK(p.label(v) == s);
      }
    for (int c : seen) CHECK(c == 1);
  }

  TEST_CASE("masking and broadcasting") {
    const Dims d{4, 2, 2};
    const auto p = make_partition(d, 2);
    const Volume3D x = random_volume(d, 1), base(d, 9.0);
    std::vector<bool> keep(std::size_t(p.segments()), false);
    keep[1] = true;
    const Volume3D m = compose_masked(x, base, p, keep);
    for (Eigen::Index v = 0; v < x.size(); ++v) CHECK(m[v] == (p.label(v) == 1 ? x[v] : 9.0));
    const Volume3D b = broadcast_segments({1.0, 2.0}, p);
    for (Eigen::Index v = 0; v < b.size(); ++v) CHECK(b[v] == double(p.label(v) + 1));
  }

  TEST_CASE("exact Shapley values of a linear scorer are the segment marginals") {
    const Dims d{4, 4, 2};
    const auto p = make_partition(d, 2);
    const Volume3D w = random_volume(d, 2), x = random_volume(d, 3), zero(d);
    const Scorer f = [&](const Volume3D& v) { return (w.voxels() * v.voxels()).sum(); };
    const auto phi = shapley_exact_values(f, x, p, zero);
    for (int s = 0; s < p.segments(); ++s) {
      double expected = 0;
      for (auto v : p.members(s)) expected += w[v] * x[v];
      CHECK(phi[std::size_t(s)] == doctest::Approx(expected).epsilon(1e-12));
    }
  }

  TEST_CASE("interaction terms are split evenly between the two players") {
    const Dims d{2, 1, 1};
    const auto p = make_partition(d, 1);
    const Volume3D x(d, 1.0), zero(d);
    const Scorer f = [](const Volume3D& v) { return v[0] * v[1]; };
    const auto phi = shapley_exact_values(f, x, p, zero);
    CHECK(phi[0] == doctest::Approx(0.5));
    CHECK(phi[1] == doctest::Approx(0.5));
  }

  TEST_CASE("sampled Shapley is efficient, reproducible and converges") {
    const Dims d{6, 1, 1};
    const auto p = make_partition(d, 1);
    const Volume3D x = random_volume(d, 4, 0.5, 1.5), zero(d);
    const Scorer f = [](const Volume3D& v) { return std::tanh(v[0] * v[1] - v[2]) + v[3] * v[4] * v[5] + v[0]; };
    const auto exact = shapley_exact_values(f, x, p, zero);
    const auto a = shapley_sampled_values(f, x, p, zero, 3000, 77);
    const auto b = shapley_sampled_values(f, x, p, zero, 3000, 77);
    CHECK(a == b);
    const double sum = std::accumulate(a.begin(), a.end(), 0.0);
    CHECK(sum == doctest::Approx(f(x) - f(zero)).epsilon(1e-10));
    for (std::size_t s = 0; s < exact.size(); ++s) CHECK(std::abs(a[s] - exact[s]) < 0.03);
  }

  TEST_CASE("exact enumeration refuses more than sixteen segments") {
    const Dims d{17, 1, 1};
    const Scorer f = [](const Volume3D& v) { return v.voxels().sum(); };
    CHECK_THROWS_AS(shapley_exact_values(f, Volume3D(d), make_partition(d, 1), Volume3D(d)), Error);
  }

  TEST_CASE("GradCAM weighted sum matches a direct computation") {
    Eigen::MatrixXd A(2, 3), G(2, 3);
    A << 1, 2, 3, 4, 5, 6;
    G << 1, 1, 1, -3, 0, 0;
    // alpha = (1, -1)
    const Eigen::VectorXd cam = gradcam_weighted_sum(A, G);
    CHECK(cam.size() == 3);
    CHECK(cam[0] == 0.0);
    CHECK(cam[1] == 0.0);
    CHECK(cam[2] == 0.0);
    G << 1, 1, 1, 0, 0, 0;
    const Eigen::VectorXd cam2 = gradcam_weighted_sum(A, G);
    CHECK(cam2[0] == 1.0);
    CHECK(cam2[2] == 3.0);
  }

  TEST_CASE("GradCAM maps live on the input grid in [0, 1]") {
    const NetworkSpec spec = NetworkSpec::simple_cnn(Dims{8, 8, 8}, 0.125, 2);
    const Model m = Model::initialized(spec, 3);
    const Volume3D x = random_volume(spec.input, 5, 0, 1);
    const AttributionMap g = gradcam3d(m, x, 1);
    CHECK(g.map.dims() == x.dims());
    CHECK(g.map.voxels().minCoeff() >= 0.0);
    CHECK(g.map.voxels().maxCoeff() <= 1.0);
    CHECK(g.method == AttributionMethod::gradcam);
    CHECK_THROWS_AS(gradcam3d(m, Volume3D(Dims{4, 4, 4}), 1), Error);
  }
}
