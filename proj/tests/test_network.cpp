#include <doctest.h>

#include <filesystem>

#include "xai3d/network.hpp"
#include "xai3d/random.hpp"

using namespace xai3d;
using Eigen::MatrixXd;

namespace {

NetworkSpec tiny_spec(HeadKind head) {
  NetworkSpec s;
  s.input = Dims{4, 4, 4};
  s.levels = {ConvLevel{3, 3, 2, true}};
  s.head = head;
  s.mlp_hidden = {5, 4};
  s.dropout = {0.0, 0.0};
  s.key_dim = 2;
  return s;
}

Volume3D random_input(Dims d, std::uint64_t seed) {
  Rng rng(seed);
  Volume3D v(d);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = uniform(rng, -1, 1);
  return v;
}

Model randomized(const NetworkSpec& spec, std::uint64_t seed) {
  Model m = Model::initialized(spec, seed);
  Rng rng(seed + 1);
  for (auto& n : m.norm) {
    for (Eigen::Index i = 0; i < n.gamma.size(); ++i) {
      n.gamma(i) = uniform(rng, 0.5, 1.5);
      n.beta(i) = uniform(rng, -0.2, 0.2);
      n.running_mean(i) = uniform(rng, -0.1, 0.3);
      n.running_var(i) = uniform(rng, 0.5, 2.0);
    }
  }
  return m;
}

// Straight loops over the same arithmetic the network performs.
Eigen::Vector2d scalar_forward(const Model& m, const Volume3D& x) {
  const Dims d = x.dims();
  const auto& conv = m.conv[0];
  const int F = int(conv.weight.rows());
  std::vector<double> act(std::size_t(F * d.size()));
  for (int f = 0; f < F; ++f)
    for (int z = 0; z < d.d; ++z)
      for (int y = 0; y < d.h; ++y)
        for (int xx = 0; xx < d.w; ++xx) {
          double s = conv.bias(f, 0);
          for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int sx = xx + kx - 1, sy = y + ky - 1, sz = z + kz - 1;
                if (!x.contains(sx, sy, sz)) continue;
                s += conv.weight(f, (kz * 3 + ky) * 3 + kx) * x(sx, sy, sz);
              }
          act[std::size_t(f * d.size() + linear_index(d, xx, y, z))] = std::max(0.0, s);
        }
  const Dims p{d.w / 2, d.h / 2, d.d / 2};
  std::vector<double> features(std::size_t(F * p.size()));
  const auto& bn = m.norm[0];
  for (int f = 0; f < F; ++f)
    for (int z = 0; z < p.d; ++z)
      for (int y = 0; y < p.h; ++y)
        for (int xx = 0; xx < p.w; ++xx) {
          double best = -1e300;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                best = std::max(best, act[std::size_t(f * d.size() + linear_index(d, 2 * xx + dx, 2 * y + dy, 2 * z + dz))]);
          const double normed = (best - bn.running_mean(f)) / std::sqrt(bn.running_var(f) + kBatchNormEpsilon);
          features[std::size_t(f + F * linear_index(p, xx, y, z))] = normed * bn.gamma(f) + bn.beta(f);
        }
  std::vector<double> cur = features;
  for (int l = 0; l < 3; ++l) {
    const auto& W = m.dense[std::size_t(l)];
    std::vector<double> next(std::size_t(W.weight.rows()));
    for (Eigen::Index o = 0; o < W.weight.rows(); ++o) {
      double s = W.bias(o, 0);
      for (Eigen::Index i = 0; i < W.weight.cols(); ++i) s += W.weight(o, i) * cur[std::size_t(i)];
      next[std::size_t(o)] = l < 2 ? std::max(0.0, s) : s;
    }
    cur = next;
  }
  return {cur[0], cur[1]};
}

// Loss = <u, scores> summed over a training-mode batch; central differences on one parameter.
double batch_loss(const Model& m, const std::vector<Volume3D>& xs, const MatrixXd& u) {
  std::vector<const Volume3D*> in;
  for (const auto& x : xs) in.push_back(&x);
  return (forward_batch(m, in, PassOptions{true, nullptr}, nullptr).array() * u.array()).sum();
}

void check_parameter_gradients(HeadKind head) {
  const NetworkSpec spec = tiny_spec(head);
  Model m = randomized(spec, head == HeadKind::mlp ? 31 : 32);
  const std::vector<Volume3D> xs{random_input(spec.input, 1), random_input(spec.input, 2), random_input(spec.input, 3)};
  MatrixXd u(2, 3);
  u << 0.3, -1.0, 0.7, -0.4, 0.2, 0.9;

  std::vector<const Volume3D*> in;
  for (const auto& x : xs) in.push_back(&x);
  ForwardCache cache;
  forward_batch(m, in, PassOptions{true, nullptr}, &cache);
  Model grads = m.zeros_like();
  backward_batch(m, cache, u, &grads, nullptr);

  auto params = m.parameters();
  auto g = grads.parameters();
  Rng rng(9);
  double worst = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (int k = 0; k < 3; ++k) {
      const Eigen::Index i = uniform_int(rng, 0, int(params[b]->size()) - 1);
      double& p = params[b]->data()[i];
      const double saved = p, h = 1e-6;
      p = saved + h;
      const double up = batch_loss(m, xs, u);
      p = saved - h;
      const double down = batch_loss(m, xs, u);
      p = saved;
      const double fd = (up - down) / (2 * h);
      const double an = g[b]->data()[i];
      // conv biases feed batch norm, so their exact gradient is 0 and fd is rounding noise
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-5, std::max(std::abs(fd), std::abs(an))));
    }
  }
  CHECK(worst < 1e-4);
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("forward pass agrees with a scalar-loop oracle") {
    const NetworkSpec spec = tiny_spec(HeadKind::mlp);
    const Model m = randomized(spec, 17);
    for (std::uint64_t s = 0; s < 3; ++s) {
      const Volume3D x = random_input(spec.input, 100 + s);
      const Eigen::Vector2d a = class_scores(m, x);
      const Eigen::Vector2d b = scalar_forward(m, x);
      CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  TEST_CASE("parameter gradients match central differences (perceptron head)") {
    check_parameter_gradients(HeadKind::mlp);
  }

  TEST_CASE("parameter gradients match central differences (attention head)") {
    check_parameter_gradients(HeadKind::mhl);
  }

  TEST_CASE("activation gradients match central differences through the head") {
    for (HeadKind head : {HeadKind::mlp, HeadKind::mhl}) {
      const NetworkSpec spec = tiny_spec(head);
      const Model m = randomized(spec, 41);
      const Volume3D x = random_input(spec.input, 5);
      const MatrixXd A = forward(m, x).last_activation;
      const MatrixXd G = grad_wrt_activation(m, x, 1);
      CHECK((scores_from_last_activation(m, A) - class_scores(m, x)).cwiseAbs().maxCoeff() < 1e-12);
      double worst = 0;
      for (Eigen::Index i = 0; i < A.size(); ++i) {
        if (G.data()[i] == 0.0) continue;
        MatrixXd p = A, q = A;
        p.data()[i] += 1e-6;
        q.data()[i] -= 1e-6;
        const double fd = (scores_from_last_activation(m, p)[1] - scores_from_last_activation(m, q)[1]) / 2e-6;
        worst = std::max(worst, std::abs(fd - G.data()[i]) / std::max(std::abs(fd), std::abs(G.data()[i])));
      }
      CHECK(worst < 1e-4);
    }
  }

  TEST_CASE("attention rows are convex combinations") {
    MatrixXd logits(2, 3);
    logits << 1, 2, 3, -1, 0, 1000;
    const MatrixXd p = row_softmax(logits);
    CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(p(1, 2) == doctest::Approx(1.0));
    const MatrixXd v = MatrixXd::Random(4, 2);
    const MatrixXd q = MatrixXd::Random(4, 2), k = MatrixXd::Random(4, 2);
    const MatrixXd out = attention_head(q, k, v, 2);
    for (Eigen::Index r = 0; r < out.rows(); ++r)
      for (Eigen::Index c = 0; c < out.cols(); ++c) {
        CHECK(out(r, c) <= v.col(c).maxCoeff() + 1e-12);
        CHECK(out(r, c) >= v.col(c).minCoeff() - 1e-12);
      }
  }

  TEST_CASE("presets follow the scaled filter progression") {
    const NetworkSpec cnn = NetworkSpec::simple_cnn(Dims{32, 32, 32}, 0.125, 5);
    REQUIRE(cnn.levels.size() == 5);
    CHECK(cnn.levels[0].filters == 8);
    CHECK(cnn.levels[1].filters == 16);
    CHECK(cnn.levels[4].filters == 32);
    const NetworkSpec two = NetworkSpec::two_level_mhl(Dims{16, 16, 16});
    CHECK(two.levels.size() == 2);
    CHECK(two.head == HeadKind::mhl);
    NetworkSpec bad = cnn;
    bad.levels.clear();
    CHECK_THROWS_AS(bad.validate(), Error);
  }

  TEST_CASE("checkpoints round-trip exactly") {
    const NetworkSpec spec = tiny_spec(HeadKind::mhl);
    const Model m = randomized(spec, 5);
    const auto path = std::filesystem::temp_directory_path() / "xai3d-tests" / "model.xnet";
    save_model(path, m);
    const Model back = load_model(path);
    const auto a = m.tensors();
    const auto b = back.tensors();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
    const Volume3D x = random_input(spec.input, 8);
    CHECK(class_scores(m, x) == class_scores(back, x));
  }
}
