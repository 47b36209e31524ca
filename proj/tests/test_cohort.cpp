#include <doctest.h>

#include <filesystem>

#include "xai3d/cohort.hpp"

using namespace xai3d;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "xai3d-tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

CohortParams small_params() {
  CohortParams p;
  p.n_subjects = 40;
  p.dims = Dims{8, 8, 8};
  p.seed = 21;
  return p;
}

}  // namespace

TEST_SUITE("cohort") {
  TEST_CASE("without noise the class-mean difference lives exactly on the planted mask") {
    CohortParams p = small_params();
    p.noise = 0.0;
    p.folds.amplitude_min = p.folds.amplitude_max = 0.8;
    const Cohort c = generate_cohort(p);
    Eigen::ArrayXd mean[2] = {Eigen::ArrayXd::Zero(p.dims.size()), Eigen::ArrayXd::Zero(p.dims.size())};
    int count[2] = {0, 0};
    for (std::size_t i = 0; i < c.volumes.size(); ++i) {
      mean[c.labels[i]] += c.volumes[i].voxels();
      ++count[c.labels[i]];
    }
    REQUIRE(count[0] > 0);
    REQUIRE(count[1] > 0);
    const Eigen::ArrayXd diff = mean[1] / count[1] - mean[0] / count[0];
    const auto& mask = c.planted_mask.voxels();
    CHECK(mask.sum() > 0);
    for (Eigen::Index v = 0; v < diff.size(); ++v) {
      if (mask[v] > 0) {
        CHECK(std::abs(diff[v]) > 1e-9);
      } else {
        CHECK(std::abs(diff[v]) < 1e-12);
      }
    }
  }

  TEST_CASE("class-0 masks are empty and class-1 masks are inside the union") {
    const Cohort c = generate_cohort(small_params());
    for (std::size_t i = 0; i < c.volumes.size(); ++i) {
      const auto& m = c.masks[i].voxels();
      if (c.labels[i] == 0) {
        CHECK(m.sum() == 0.0);
      } else {
        CHECK(m.sum() > 0.0);
        CHECK(((m > 0) <= (c.planted_mask.voxels() > 0)).all());
      }
    }
  }

  TEST_CASE("generation is deterministic per seed") {
    const Cohort a = generate_cohort(small_params());
    const Cohort b = generate_cohort(small_params());
    CohortParams other = small_params();
    other.seed = 22;
    const Cohort c = generate_cohort(other);
    REQUIRE(a.volumes.size() == b.volumes.size());
    for (std::size_t i = 0; i < a.volumes.size(); ++i) CHECK((a.volumes[i].voxels() == b.volumes[i].voxels()).all());
    CHECK(a.labels == b.labels);
    CHECK((a.volumes[0].voxels() != c.volumes[0].voxels()).any());
  }

  TEST_CASE("split is stratified and covers every subject once") {
    const Cohort c = generate_cohort(small_params());
    const CohortManifest m = split(c.manifest, {}, 5);
    int per_split[3][2] = {};
    for (const auto& e : m.entries) {
      REQUIRE(e.split != Split::unassigned);
      per_split[int(e.split)][e.label]++;
    }
    for (auto& s : per_split) {
      CHECK(s[0] > 0);
      CHECK(s[1] > 0);
    }
    CHECK(per_split[0][0] + per_split[0][1] > per_split[1][0] + per_split[1][1]);
    const CohortManifest again = split(c.manifest, {}, 5);
    for (std::size_t i = 0; i < m.entries.size(); ++i) CHECK(m.entries[i].split == again.entries[i].split);
    CHECK_THROWS_AS(split(c.manifest, {0.5, 0.2, 0.2}, 5), Error);
  }

  TEST_CASE("volume files round-trip through f32 with metadata") {
    const fs::path dir = scratch("volume-io");
    Volume3D v(Dims{3, 2, 4});
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 0.25 * double(i) - 1.0;
    VolumeMeta meta;
    meta.subject_id = "s1";
    meta.label = 1;
    meta.extra = {{"method", "shap"}};
    write_volume(dir / "v.xv3d", v, meta);
    const VolumeFile f = read_volume(dir / "v.xv3d");
    CHECK(f.volume.dims() == v.dims());
    CHECK((f.volume.voxels() == v.voxels()).all());
    CHECK(f.meta.subject_id == "s1");
    CHECK(f.meta.label == 1);
    CHECK(f.meta.extra.at("method") == "shap");

    auto bytes = encode_volume(v);
    bytes[0] = 'Q';
    CHECK_THROWS_AS(decode_volume(bytes), Error);
    bytes = encode_volume(v);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_volume(bytes), Error);
    CHECK_THROWS_AS(read_volume(dir / "missing.xv3d"), Error);
  }

  TEST_CASE("cohorts round-trip through a manifest directory") {
    const fs::path dir = scratch("cohort-io");
    Cohort c = generate_cohort(small_params());
    c.manifest = split(c.manifest, {}, 3);
    write_cohort(dir, c);
    const Cohort back = load_cohort(dir / "manifest.json");
    REQUIRE(back.volumes.size() == c.volumes.size());
    CHECK(back.labels == c.labels);
    CHECK(back.subject_ids == c.subject_ids);
    for (std::size_t i = 0; i < c.volumes.size(); ++i) {
      CHECK((back.volumes[i].voxels() - c.volumes[i].voxels()).abs().maxCoeff() < 1e-6);
      CHECK((back.masks[i].voxels() == c.masks[i].voxels()).all());
      CHECK(back.manifest.entries[i].split == c.manifest.entries[i].split);
    }
  }
}
