#include <doctest.h>

#include "xai3d/random.hpp"
#include "xai3d/volume.hpp"

using namespace xai3d;

namespace {

Volume3D random_volume(Dims dims, std::uint64_t seed) {
  Rng rng(seed);
  Volume3D v(dims);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = uniform(rng, -1, 1);
  return v;
}

}  // namespace

TEST_SUITE("volume") {
  TEST_CASE("x runs fastest in the linear layout") {
    const Dims d{3, 4, 5};
    CHECK(linear_index(d, 1, 0, 0) == 1);
    CHECK(linear_index(d, 0, 1, 0) == 3);
    CHECK(linear_index(d, 0, 0, 1) == 12);
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const auto [x, y, z] = coords_of(d, i);
      CHECK(linear_index(d, x, y, z) == i);
    }
  }

  TEST_CASE("invalid dims and non-finite voxels are rejected") {
    CHECK_THROWS_AS(Volume3D(Dims{0, 2, 2}), Error);
    Eigen::ArrayXd bad = Eigen::ArrayXd::Zero(8);
    bad[3] = std::nan("");
    CHECK_THROWS_AS(Volume3D(Dims{2, 2, 2}, bad), Error);
    CHECK_THROWS_AS(Volume3D(Dims{2, 2, 2}, Eigen::ArrayXd::Zero(7)), Error);
  }

  TEST_CASE("quarter-turn rotation is a pure index permutation") {
    const Dims d{5, 5, 3};
    const Volume3D v = random_volume(d, 3);
    const Eigen::Vector3d c(2, 2, 1);
    for (auto mode : {Interpolation::trilinear, Interpolation::nearest}) {
      const auto t = AffineTransform3D::rotation_about(c, 2, std::acos(-1.0) / 2, mode);
      const Volume3D r = apply_affine(v, t);
      for (int z = 0; z < d.d; ++z)
        for (int y = 0; y < d.h; ++y)
          for (int x = 0; x < d.w; ++x) {
            // (x, y) -> (c - (y - c), c + (x - c))
            const int qx = 2 - (y - 2), qy = 2 + (x - 2);
            CHECK(r(qx, qy, z) == doctest::Approx(v(x, y, z)).epsilon(1e-12));
          }
    }
  }

  TEST_CASE("integer translation shifts voxels and zero-fills") {
    const Dims d{4, 3, 2};
    const Volume3D v = random_volume(d, 4);
    const Volume3D s = apply_affine(v, AffineTransform3D::translate({1, 0, 0}));
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y) {
        CHECK(s(0, y, z) == 0.0);
        for (int x = 1; x < d.w; ++x) CHECK(s(x, y, z) == v(x - 1, y, z));
      }
  }

  TEST_CASE("trilinear sampling at a cell midpoint averages the corners") {
    Volume3D v(Dims{2, 2, 2});
    for (Eigen::Index i = 0; i < 8; ++i) v[i] = double(i);
    CHECK(sample_trilinear(v, Eigen::Vector3d(0.5, 0.5, 0.5)) == doctest::Approx(3.5));
    CHECK(sample_trilinear(v, Eigen::Vector3d(-1, 0, 0)) == 0.0);
  }

  TEST_CASE("resize to the same grid is the identity; a constant stays constant") {
    const Volume3D v = random_volume(Dims{3, 3, 3}, 5);
    CHECK((resize_trilinear(v, v.dims()).voxels() == v.voxels()).all());
    const Volume3D up = resize_trilinear(Volume3D(Dims{2, 2, 2}, 0.7), Dims{5, 6, 7});
    CHECK((up.voxels() - 0.7).abs().maxCoeff() < 1e-12);
  }

  TEST_CASE("min-max normalization and weighted averages") {
    const Volume3D v = random_volume(Dims{4, 4, 4}, 6);
    const Volume3D n = minmax_normalize(v);
    CHECK(n.voxels().minCoeff() == 0.0);
    CHECK(n.voxels().maxCoeff() == 1.0);
    CHECK((minmax_normalize(Volume3D(Dims{2, 2, 2}, 3.0)).voxels() == 0.0).all());

    const Volume3D a(Dims{2, 2, 2}, 1.0), b(Dims{2, 2, 2}, 4.0);
    const Volume3D w = weighted_average(std::vector<Volume3D>{a, b}, WeightTensor{1.0, 2.0});
    CHECK((w.voxels() - 3.0).abs().maxCoeff() < 1e-12);
    CHECK_THROWS_AS(WeightTensor({1.0, 0.0}), Error);
    CHECK_THROWS_AS(weighted_average(std::vector<Volume3D>{a}, WeightTensor{1.0, 2.0}), Error);
  }

  TEST_CASE("pearson correlation") {
    const std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8}, z{4, 3, 2, 1}, c{1, 1, 1, 1};
    CHECK(pearson(x, y) == doctest::Approx(1.0));
    CHECK(pearson(x, z) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(pearson(x, c), Error);
  }

  TEST_CASE("seed derivation is stable and stage-specific") {
    CHECK(derive_seed(7, "train") == derive_seed(7, "train"));
    CHECK(derive_seed(7, "train") != derive_seed(7, "explain"));
    CHECK(derive_seed(7, std::uint64_t(1)) != derive_seed(7, std::uint64_t(2)));
    Rng a(11), b(11);
    for (int i = 0; i < 100; ++i) CHECK(uniform01(a) == uniform01(b));
  }
}
