#include <doctest.h>

#include <Eigen/Eigenvalues>

#include "xai3d/global.hpp"
#include "xai3d/random.hpp"

using namespace xai3d;
using Eigen::MatrixXd;

namespace {

std::vector<Volume3D> fixtures(int n, Dims d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Volume3D> out;
  for (int s = 0; s < n; ++s) {
    Volume3D v(d);
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal01(rng) * (1.0 + double(i % 7));
    out.push_back(std::move(v));
  }
  return out;
}

MatrixXd dense_covariance(const std::vector<Volume3D>& xs) {
  MatrixXd X(Eigen::Index(xs.size()), xs[0].size());
  for (std::size_t i = 0; i < xs.size(); ++i) X.row(Eigen::Index(i)) = xs[i].voxels().matrix().transpose();
  const MatrixXd c = X.rowwise() - X.colwise().mean();
  return c.transpose() * c / double(xs.size() - 1);
}

GlobalExplanation constant_map(Dims d, double v, GlobalSource s) {
  GlobalExplanation g;
  g.map = Volume3D(d, v);
  g.source = s;
  return g;
}

}  // namespace

TEST_SUITE("global") {
  TEST_CASE("PCA eigenpairs agree with a dense covariance oracle") {
    for (auto [n, d] : {std::pair{20, Dims{4, 4, 4}}, std::pair{40, Dims{3, 3, 2}}}) {
      const auto xs = fixtures(n, d, 3);
      const MatrixXd C = dense_covariance(xs);
      const int k = std::min(6, int(d.size()));
      const PCAModel m = fit_pca(xs, k);
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(C);
      const Eigen::VectorXd lambda = es.eigenvalues().reverse();
      for (int i = 0; i < k; ++i) {
        const Eigen::VectorXd v = m.components.col(i);
        CHECK((C * v - m.variances[i] * v).norm() < 1e-8);
        CHECK(m.variances[i] == doctest::Approx(lambda[i]).epsilon(1e-10));
        Eigen::Index arg;
        v.cwiseAbs().maxCoeff(&arg);
        CHECK(v[arg] > 0);
      }
      CHECK((m.components.transpose() * m.components - MatrixXd::Identity(k, k)).norm() < 1e-10);
      CHECK(m.total_variance == doctest::Approx(C.trace()));
      CHECK(m.explained_total() == doctest::Approx(m.variances.sum() / C.trace()));
    }
  }

  TEST_CASE("a full-rank basis reconstructs every sample") {
    const auto xs = fixtures(20, Dims{4, 4, 4}, 4);
    const PCAModel m = fit_pca(xs, 19);
    for (const auto& x : xs) CHECK((m.reconstruct(m.project(x)).voxels() - x.voxels()).abs().maxCoeff() < 1e-8);
    CHECK(m.explained_total() == doctest::Approx(1.0));
  }

  TEST_CASE("rank-deficient inputs are completed to an orthonormal basis") {
    std::vector<Volume3D> xs(8, Volume3D(Dims{3, 3, 3}, 1.0));
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i][0] = double(i);
    const PCAModel m = fit_pca(xs, 6);
    CHECK((m.components.transpose() * m.components - MatrixXd::Identity(6, 6)).norm() < 1e-10);
    CHECK(m.variances.tail(5).cwiseAbs().maxCoeff() < 1e-10);
    CHECK_THROWS_AS(fit_pca(std::vector<Volume3D>(1, Volume3D(Dims{2, 2, 2})), 1), Error);
  }

  TEST_CASE("total maps are normalized weighted averages of component volumes") {
    const auto xs = fixtures(12, Dims{4, 4, 4}, 5);
    const PCAModel m = fit_pca(xs, 6);
    const GlobalExplanation t = total_from_pca(m, GlobalSource::total_shap);
    const WeightTensor w = component_weight_tensor();
    Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(64);
    for (int i = 0; i < 6; ++i) {
      const Eigen::ArrayXd c = m.components.col(i).array();
      acc += w[std::size_t(i)] * (c - c.minCoeff()) / (c.maxCoeff() - c.minCoeff());
    }
    acc = (acc - acc.minCoeff()) / (acc.maxCoeff() - acc.minCoeff());
    CHECK((t.map.voxels() - acc).abs().maxCoeff() < 1e-12);
    CHECK(t.source == GlobalSource::total_shap);
    CHECK(t.explained_variance == doctest::Approx(m.explained_total()));
    CHECK_THROWS_AS(total_from_pca(fit_pca(xs, 3), GlobalSource::total_shap), Error);
  }

  TEST_CASE("fusion codes name the weights in shape, SHAP, GradCAM order") {
    const FusionWeights w = FusionWeights::from_code(158);
    CHECK(w.shape == 0.1);
    CHECK(w.shap == 0.5);
    CHECK(w.gradcam == 0.85);
    for (int code : kAblationCodes) CHECK(FusionWeights::from_code(code).code() == code);
    for (int bad : {855, 852, 0, 1851, 85}) CHECK_THROWS_AS(FusionWeights::from_code(bad), Error);
  }

  TEST_CASE("the framework map follows the weighted-average formula") {
    const Dims d{2, 2, 1};
    GlobalExplanation a, b, c;
    a.map = Volume3D(d, Eigen::Array4d(0, 1, 0, 0));
    b.map = Volume3D(d, Eigen::Array4d(0, 0, 1, 0));
    c.map = Volume3D(d, Eigen::Array4d(0, 0, 0, 1));
    b.source = GlobalSource::total_shap;
    c.source = GlobalSource::total_gradcam;
    const GlobalExplanation f = fuse_framework(a, b, c);
    // 0.85, 0.5, 0.1 normalized to [0, 1]
    CHECK(f.map[0] == 0.0);
    CHECK(f.map[1] == 1.0);
    CHECK(f.map[2] == doctest::Approx(0.5 / 0.85));
    CHECK(f.map[3] == doctest::Approx(0.1 / 0.85));
    CHECK(f.source == GlobalSource::framework);

    GlobalExplanation small = constant_map(Dims{1, 2, 1}, 1.0, GlobalSource::total_gradcam);
    CHECK_THROWS_AS(fuse_framework(a, b, small), Error);
    Alignment align;
    align[2] = AffineTransform3D::identity();
    CHECK_NOTHROW(fuse_framework(a, b, small, {}, align));
  }
}
