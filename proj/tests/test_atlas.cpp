#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>

#include "xai3d/atlas.hpp"
#include "xai3d/cohort.hpp"
#include "xai3d/random.hpp"

using namespace xai3d;

namespace {

std::map<std::string, Eigen::Index> brute_force(const Volume3D& g, const ProbabilisticAtlas& atlas, Eigen::Index n) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(g.size()));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return g[a] > g[b]; });
  std::map<std::string, Eigen::Index> counts;
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index v = order[std::size_t(k)];
    std::string name = kUndefinedRegion;
    double best = 0;
    for (int r = 0; r < atlas.regions(); ++r)
      if (atlas.probability(r)[v] > best) best = atlas.probability(r)[v], name = atlas.name(r);
    ++counts[name];
  }
  return counts;
}

}  // namespace

TEST_SUITE("atlas") {
  TEST_CASE("selection sizes are the ceiling of fraction times volume") {
    CHECK(selection_size(0.05, 4096) == 205);
    CHECK(selection_size(0.10, 4096) == 410);
    CHECK(selection_size(0.20, 4096) == 820);
    CHECK(selection_size(0.10, 100) == 10);  // 0.1 * 100 is not exactly 10 in binary
    CHECK(selection_size(0.05, 1) == 1);
    CHECK_THROWS_AS(selection_size(0.0, 10), Error);
    CHECK_THROWS_AS(selection_size(1.0, 10), Error);
  }

  TEST_CASE("top voxels break ties by ascending index") {
    Volume3D v(Dims{5, 1, 1});
    v[0] = 1, v[1] = 2, v[2] = 2, v[3] = 0, v[4] = 2;
    CHECK(top_voxels(v, 2) == std::vector<Eigen::Index>{1, 2});
    CHECK(top_voxels(v, 4) == std::vector<Eigen::Index>{1, 2, 4, 0});
  }

  TEST_CASE("histograms agree with a brute-force oracle and grow with the threshold") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      Rng rng(s);
      const Dims d{uniform_int(rng, 4, 10), uniform_int(rng, 4, 10), uniform_int(rng, 2, 6)};
      const ProbabilisticAtlas atlas = make_synthetic_atlas(d, uniform_int(rng, 1, 6), s);
      Volume3D g(d);
      for (Eigen::Index i = 0; i < g.size(); ++i) g[i] = double(uniform_int(rng, 0, 9));
      std::map<std::string, Eigen::Index> previous;
      for (double f : kHistogramFractions) {
        const RegionHistogram h = threshold_histogram(g, atlas, f);
        const Eigen::Index n = selection_size(f, g.size());
        CHECK(h.selected == n);
        auto oracle = brute_force(g, atlas, n);
        Eigen::Index total = 0;
        REQUIRE(h.counts.size() == std::size_t(atlas.regions()) + 1);
        CHECK(h.counts.back().first == kUndefinedRegion);
        for (const auto& [name, c] : h.counts) {
          CHECK(c == oracle[name]);
          CHECK(c >= previous[name]);
          previous[name] = c;
          total += c;
        }
        CHECK(total == n);
      }
    }
  }

  TEST_CASE("voxels with zero probability everywhere are undefined") {
    const Dims d{2, 1, 1};
    Volume3D r(d);
    r[0] = 0.4;
    const ProbabilisticAtlas atlas({"a"}, {r});
    CHECK(atlas.argmax(0) == 0);
    CHECK(atlas.argmax(1) == -1);
    Volume3D g(d);
    g[1] = 1.0;
    const RegionHistogram h = threshold_histogram(g, atlas, 0.2);
    CHECK(h.count("NA") == 1);
    CHECK(h.count("a") == 0);
  }

  TEST_CASE("invalid atlases are rejected") {
    const Dims d{2, 2, 2};
    CHECK_THROWS_AS(ProbabilisticAtlas({"a"}, {Volume3D(d, 1.2)}), Error);
    CHECK_THROWS_AS(ProbabilisticAtlas({"a", "b"}, {Volume3D(d, 0.6), Volume3D(d, 0.6)}), Error);
    CHECK_THROWS_AS(ProbabilisticAtlas({"NA"}, {Volume3D(d, 0.5)}), Error);
    CHECK_THROWS_AS(ProbabilisticAtlas({"a", "b"}, {Volume3D(d, 0.1), Volume3D(Dims{1, 2, 2}, 0.1)}), Error);
    const ProbabilisticAtlas ok({"a"}, {Volume3D(d, 0.5)});
    CHECK_THROWS_AS(threshold_histogram(Volume3D(Dims{3, 3, 3}), ok, 0.1), Error);
  }

  TEST_CASE("atlases round-trip through disk and histograms format to CSV") {
    const auto dir = std::filesystem::temp_directory_path() / "xai3d-tests" / "atlas";
    std::filesystem::remove_all(dir);
    const ProbabilisticAtlas atlas = make_synthetic_atlas(Dims{6, 5, 4}, 3, 8);
    write_atlas(dir, atlas);
    const ProbabilisticAtlas back = read_atlas(dir);
    CHECK(back.names() == atlas.names());
    for (int r = 0; r < atlas.regions(); ++r)
      CHECK((back.probability(r).voxels() - atlas.probability(r).voxels()).abs().maxCoeff() < 1e-7);

    RegionHistogram h;
    h.fraction = 0.05;
    h.counts = {{"region_01", 3}, {"NA", 1}};
    CHECK(histogram_csv({h}) == "region,threshold,count\nregion_01,0.050000,3\nNA,0.050000,1\n");
  }

  TEST_CASE("registration resamples into the atlas grid") {
    const ProbabilisticAtlas atlas({"a"}, {Volume3D(Dims{4, 4, 4}, 0.5)});
    GlobalExplanation g;
    g.map = Volume3D(Dims{4, 4, 4});
    g.map(1, 1, 1) = 1.0;
    const Volume3D moved = register_to_atlas(g, atlas, AffineTransform3D::translate({1, 0, 0}));
    CHECK(moved(2, 1, 1) == 1.0);
    CHECK(moved(1, 1, 1) == 0.0);
  }
}
