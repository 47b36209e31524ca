#include "xai3d/cohort.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "xai3d/random.hpp"

namespace xai3d {

namespace fs = std::filesystem;

namespace {

static_assert(std::endian::native == std::endian::little, "volume format assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorKind::io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), ErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  require(bool(out), ErrorKind::io, "short write to " + path.string());
}

}  // namespace

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(bool(out), ErrorKind::io, "cannot write " + path.string());
  out << text;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  require(bool(in), ErrorKind::io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, path.string() + ": " + e.what());
  }
}


json VolumeMeta::to_json(const Dims& dims) const {
  json j;
  j["subject_id"] = subject_id;
  j["label"] = label;
  j["modality"] = modality;
  j["hemisphere"] = hemisphere;
  j["dims"] = {dims.w, dims.h, dims.d};
  j["encoding"] = "f32le";
  j["layout"] = "x-fastest";
  j["provenance"] = provenance;
  j["extra"] = extra;
  return j;
}

VolumeMeta VolumeMeta::from_json(const json& j) {
  VolumeMeta m;
  m.subject_id = j.value("subject_id", "");
  m.label = j.value("label", -1);
  m.modality = j.value("modality", "skeleton");
  m.hemisphere = j.value("hemisphere", "L");
  m.provenance = j.value("provenance", json::object());
  m.extra = j.value("extra", json::object());
  return m;
}

fs::path sidecar_path(const fs::path& payload) {
  fs::path p = payload;
  p.replace_extension(".json");
  return p;
}

std::vector<std::uint8_t> encode_volume(const Volume3D& volume) {
  const Dims dims = volume.dims();
  std::vector<std::uint8_t> out;
  out.reserve(kVolumeHeaderBytes + 4 * std::size_t(dims.size()));
  out.insert(out.end(), std::begin(kVolumeMagic), std::end(kVolumeMagic));
  put_u32(out, kVolumeVersion);
  put_u32(out, std::uint32_t(dims.w));
  put_u32(out, std::uint32_t(dims.h));
  put_u32(out, std::uint32_t(dims.d));
  for (Eigen::Index i = 0; i < volume.size(); ++i) {
    put_u32(out, std::bit_cast<std::uint32_t>(float(volume[i])));
  }
  return out;
}

Volume3D decode_volume(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  require(bytes.size() >= kVolumeHeaderBytes, ErrorKind::io,
          origin + ": truncated header (" + std::to_string(bytes.size()) + " bytes)");
  require(std::memcmp(bytes.data(), kVolumeMagic, 4) == 0, ErrorKind::io, origin + ": bad magic, expected XV3D");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  require(version == kVolumeVersion, ErrorKind::io, origin + ": unsupported version " + std::to_string(version));
  const Dims dims{int(get_u32(bytes.data() + 8)), int(get_u32(bytes.data() + 12)), int(get_u32(bytes.data() + 16))};
  require(dims.valid(), ErrorKind::io, origin + ": invalid dims " + to_string(dims));
  const std::size_t expected = kVolumeHeaderBytes + 4 * std::size_t(dims.size());
  require(bytes.size() == expected, ErrorKind::io,
          origin + ": payload size mismatch, expected " + std::to_string(expected) + " bytes, found " +
              std::to_string(bytes.size()));
  Eigen::ArrayXd voxels(dims.size());
  const std::uint8_t* p = bytes.data() + kVolumeHeaderBytes;
  for (Eigen::Index i = 0; i < voxels.size(); ++i, p += 4) {
    voxels[i] = double(std::bit_cast<float>(get_u32(p)));
  }
  require(voxels.allFinite(), ErrorKind::io, origin + ": non-finite voxel values");
  return Volume3D(dims, std::move(voxels));
}

void write_volume(const fs::path& path, const Volume3D& volume, const VolumeMeta& meta) {
  write_bytes(path, encode_volume(volume));
  write_text_file(sidecar_path(path), meta.to_json(volume.dims()).dump(2) + "\n");
}

VolumeFile read_volume(const fs::path& path) {
  VolumeFile file{decode_volume(read_bytes(path), path.string()), {}};
  const fs::path sidecar = sidecar_path(path);
  if (fs::exists(sidecar)) {
    const json j = read_json_file(sidecar);
    if (j.contains("dims")) {
      const Dims dims{j["dims"][0].get<int>(), j["dims"][1].get<int>(), j["dims"][2].get<int>()};
      require(dims == file.volume.dims(), ErrorKind::io,
              path.string() + ": header dims " + to_string(file.volume.dims()) + " disagree with sidecar " +
                  to_string(dims));
    }
    file.meta = VolumeMeta::from_json(j);
  }
  return file;
}

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
    case Split::unassigned: return "unassigned";
  }
  return "unassigned";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  return Split::unassigned;
}

json CohortManifest::to_json() const {
  json j;
  j["seed"] = seed;
  j["dims"] = {dims.w, dims.h, dims.d};
  j["entries"] = json::array();
  for (const auto& e : entries) {
    j["entries"].push_back({{"subject_id", e.subject_id},
                            {"path", e.path},
                            {"mask_path", e.mask_path},
                            {"label", e.label},
                            {"modality", e.modality},
                            {"hemisphere", e.hemisphere},
                            {"split", to_string(e.split)}});
  }
  return j;
}

CohortManifest CohortManifest::from_json(const json& j) {
  CohortManifest m;
  try {
    m.seed = j.value("seed", std::uint64_t(0));
    m.dims = Dims{j.at("dims")[0].get<int>(), j.at("dims")[1].get<int>(), j.at("dims")[2].get<int>()};
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.subject_id = e.at("subject_id").get<std::string>();
      entry.path = e.at("path").get<std::string>();
      entry.mask_path = e.value("mask_path", "");
      entry.label = e.at("label").get<int>();
      entry.modality = e.value("modality", "skeleton");
      entry.hemisphere = e.value("hemisphere", "L");
      entry.split = split_from_string(e.value("split", "unassigned"));
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, std::string("malformed cohort manifest: ") + e.what());
  }
  return m;
}

void write_manifest(const fs::path& path, const CohortManifest& manifest) {
  write_text_file(path, manifest.to_json().dump(2) + "\n");
}

CohortManifest read_manifest(const fs::path& path) { return CohortManifest::from_json(read_json_file(path)); }

CohortManifest split(const CohortManifest& manifest, const SplitFractions& fractions, std::uint64_t seed) {
  const double total = fractions.train + fractions.validation + fractions.test;
  require(std::abs(total - 1.0) <= 1e-9, ErrorKind::invalid_argument, "split fractions must sum to 1");
  require(fractions.train >= 0 && fractions.validation >= 0 && fractions.test >= 0, ErrorKind::invalid_argument,
          "split fractions must be nonnegative");

  CohortManifest out = manifest;
  out.seed = seed;
  Rng rng(derive_seed(seed, "split"));
  for (int label : {0, 1}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < out.entries.size(); ++i) {
      if (out.entries[i].label == label) members.push_back(i);
    }
    shuffle(members.begin(), members.end(), rng);
    const auto n = double(members.size());
    const auto n_train = std::size_t(std::llround(fractions.train * n));
    const auto n_val = std::min(members.size() - n_train, std::size_t(std::llround(fractions.validation * n)));
    for (std::size_t k = 0; k < members.size(); ++k) {
      Split s = k < n_train ? Split::train : (k < n_train + n_val ? Split::validation : Split::test);
      out.entries[members[k]].split = s;
    }
    for (Split s : {Split::train, Split::validation, Split::test}) {
      const bool present = std::any_of(members.begin(), members.end(),
                                       [&](std::size_t i) { return out.entries[i].split == s; });
      require(present, ErrorKind::invalid_argument,
              std::string("degenerate split: class ") + std::to_string(label) + " has no subjects in " + to_string(s));
    }
  }
  return out;
}

std::vector<std::size_t> indices_in(const CohortManifest& manifest, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    if (manifest.entries[i].split == split) out.push_back(i);
  }
  return out;
}

namespace {

using Curve = std::vector<Eigen::Vector3d>;

// Distance-based tube profile around a sampled curve: 1 on the curve, 0 beyond `radius`.
Volume3D tube_profile(const Dims& dims, const Curve& curve, double radius) {
  Volume3D profile(dims);
  for (int z = 0; z < dims.d; ++z) {
    for (int y = 0; y < dims.h; ++y) {
      for (int x = 0; x < dims.w; ++x) {
        const Eigen::Vector3d p(x, y, z);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& c : curve) best = std::min(best, (p - c).squaredNorm());
        const double dist = std::sqrt(best);
        profile(x, y, z) = dist < radius ? 1.0 - dist / radius : 0.0;
      }
    }
  }
  return profile;
}

constexpr int kCurveSamples = 256;

// Per-subject variation of the planted arc: offset in the xy plane and trimmed ends.
struct ArcJitter {
  double dx = 0.0, dy = 0.0;
  double trim_start = 0.0, trim_end = 0.0;  // fractions of the arc
};

// The planted arc: climbs in z while sweeping the upper half of the xy plane.
Curve planted_arc(const Dims& dims, const ArcJitter& j = {}) {
  const double w = dims.w, h = dims.h, d = dims.d;
  const double cx = 0.5 * w - 0.5 + j.dx, cy = 0.4 * h - 0.5 + j.dy, arc_radius = 0.3 * w;
  const double theta0 = 0.15 * std::numbers::pi, theta1 = 0.85 * std::numbers::pi;
  Curve curve;
  for (int s = 0; s < kCurveSamples; ++s) {
    const double t = j.trim_start + (1.0 - j.trim_start - j.trim_end) * double(s) / (kCurveSamples - 1);
    const double theta = theta0 + t * (theta1 - theta0);
    curve.emplace_back(cx + arc_radius * std::cos(theta), cy + arc_radius * std::sin(theta), 0.3 * d + t * 0.4 * d);
  }
  return curve;
}

// Straight folds shared by both classes, placed away from the planted arc.
std::vector<Curve> common_folds(const Dims& dims, int count) {
  const double w = dims.w, h = dims.h, d = dims.d;
  const Eigen::Vector3d ends[][2] = {
      {{0.15 * w, 0.12 * h, 0.15 * d}, {0.85 * w, 0.2 * h, 0.35 * d}},
      {{0.12 * w, 0.85 * h, 0.1 * d}, {0.2 * w, 0.8 * h, 0.9 * d}},
      {{0.88 * w, 0.3 * h, 0.6 * d}, {0.85 * w, 0.9 * h, 0.85 * d}},
      {{0.3 * w, 0.15 * h, 0.85 * d}, {0.75 * w, 0.3 * h, 0.9 * d}},
  };
  std::vector<Curve> folds;
  for (int f = 0; f < count; ++f) {
    Curve curve;
    for (int s = 0; s < kCurveSamples; ++s) {
      const double t = double(s) / (kCurveSamples - 1);
      curve.push_back((1 - t) * ends[f][0] + t * ends[f][1]);
    }
    folds.push_back(std::move(curve));
  }
  return folds;
}

Volume3D smooth_template(const Dims& dims, Rng& rng) {
  Volume3D t(dims);
  const double sigma = 0.25 * dims.w;
  for (int blob = 0; blob < 3; ++blob) {
    const Eigen::Vector3d c(uniform(rng, 0, dims.w), uniform(rng, 0, dims.h), uniform(rng, 0, dims.d));
    const double amp = uniform(rng, 0.1, 0.3);
    for (int z = 0; z < dims.d; ++z)
      for (int y = 0; y < dims.h; ++y)
        for (int x = 0; x < dims.w; ++x) {
          const double r2 = (Eigen::Vector3d(x, y, z) - c).squaredNorm();
          t(x, y, z) += amp * std::exp(-r2 / (2 * sigma * sigma));
        }
  }
  return t;
}

// Low-frequency cosine field with unit RMS.
Volume3D smooth_basis(const Dims& dims, Rng& rng) {
  Volume3D b(dims);
  const double kx = uniform(rng, 0.5, 1.5), ky = uniform(rng, 0.5, 1.5), kz = uniform(rng, 0.5, 1.5);
  const double px = uniform(rng, 0, 2 * std::numbers::pi), py = uniform(rng, 0, 2 * std::numbers::pi),
               pz = uniform(rng, 0, 2 * std::numbers::pi);
  for (int z = 0; z < dims.d; ++z)
    for (int y = 0; y < dims.h; ++y)
      for (int x = 0; x < dims.w; ++x) {
        b(x, y, z) = std::cos(std::numbers::pi * kx * (x + 0.5) / dims.w + px) *
                     std::cos(std::numbers::pi * ky * (y + 0.5) / dims.h + py) *
                     std::cos(std::numbers::pi * kz * (z + 0.5) / dims.d + pz);
      }
  const double rms = std::sqrt(b.voxels().square().mean());
  if (rms > 0) b.voxels() /= rms;
  return b;
}

constexpr int kBackgroundModes = 2;
constexpr double kModeFraction = 0.5;

}  // namespace

Cohort generate_cohort(const CohortParams& params) {
  require(params.n_subjects >= 20, ErrorKind::invalid_argument, "generate_cohort: need at least 20 subjects");
  require(params.dims.valid(), ErrorKind::invalid_argument, "generate_cohort: invalid dims");
  require(params.noise >= 0.0, ErrorKind::invalid_argument, "generate_cohort: noise must be nonnegative");
  require(params.ridge.amplitude_min > 0 && params.ridge.amplitude_max >= params.ridge.amplitude_min,
          ErrorKind::invalid_argument, "generate_cohort: invalid ridge amplitude range");
  require(params.folds.count >= 0 && params.folds.count <= kMaxFolds, ErrorKind::invalid_argument,
          "generate_cohort: fold count must be in [0, " + std::to_string(kMaxFolds) + "]");
  require(params.folds.amplitude_min >= 0 && params.folds.amplitude_max >= params.folds.amplitude_min,
          ErrorKind::invalid_argument, "generate_cohort: invalid fold amplitude range");

  const Dims dims = params.dims;
  Rng shared(derive_seed(params.seed, "cohort-shared"));
  const Volume3D templ = smooth_template(dims, shared);
  std::vector<Volume3D> modes;
  for (int k = 0; k < kBackgroundModes; ++k) modes.push_back(smooth_basis(dims, shared));

  const double radius = params.ridge.tube_radius * dims.w / 16.0;
  const double shift = params.ridge.jitter * dims.w / 16.0;
  std::vector<Volume3D> folds;
  for (const auto& curve : common_folds(dims, params.folds.count)) folds.push_back(tube_profile(dims, curve, radius));

  std::vector<int> labels(static_cast<std::size_t>(params.n_subjects), 0);
  for (int i = 0; i < params.n_subjects / 2; ++i) labels[std::size_t(i)] = 1;
  Rng label_rng(derive_seed(params.seed, "cohort-labels"));
  shuffle(labels.begin(), labels.end(), label_rng);

  Cohort cohort;
  cohort.planted_mask = Volume3D(dims);
  cohort.manifest.seed = params.seed;
  cohort.manifest.dims = dims;
  for (int i = 0; i < params.n_subjects; ++i) {
    Rng rng(derive_seed(derive_seed(params.seed, "cohort-subject"), std::uint64_t(i)));
    Eigen::ArrayXd v = templ.voxels();
    for (const auto& fold : folds) v += uniform(rng, params.folds.amplitude_min, params.folds.amplitude_max) * fold.voxels();
    for (const auto& mode : modes) v += params.noise * kModeFraction * normal01(rng) * mode.voxels();
    for (Eigen::Index k = 0; k < v.size(); ++k) v[k] += params.noise * normal01(rng);
    const int label = labels[std::size_t(i)];
    Volume3D mask(dims);
    if (label == 1) {
      const double amp = uniform(rng, params.ridge.amplitude_min, params.ridge.amplitude_max);
      ArcJitter jitter{uniform(rng, -shift, shift), uniform(rng, -shift, shift),
                       uniform(rng, 0.0, params.ridge.trim), uniform(rng, 0.0, params.ridge.trim)};
      const Volume3D profile = tube_profile(dims, planted_arc(dims, jitter), radius);
      v += amp * profile.voxels();
      mask.voxels() = (profile.voxels() > 0.0).cast<double>();
      cohort.planted_mask.voxels() = cohort.planted_mask.voxels().max(mask.voxels());
    }
    char id[32];
    std::snprintf(id, sizeof id, "sub-%04d", i);
    cohort.subject_ids.emplace_back(id);
    cohort.volumes.emplace_back(dims, std::move(v));
    cohort.masks.push_back(std::move(mask));
    cohort.labels.push_back(label);
    cohort.manifest.entries.push_back(
        ManifestEntry{id, "", "", label, params.modality, params.hemisphere, Split::unassigned});
  }
  return cohort;
}

CohortManifest write_cohort(const fs::path& dir, const Cohort& cohort) {
  CohortManifest manifest = cohort.manifest;
  for (std::size_t i = 0; i < cohort.volumes.size(); ++i) {
    auto& e = manifest.entries[i];
    e.path = "volumes/" + e.subject_id + ".xv3d";
    e.mask_path = "masks/" + e.subject_id + "_mask.xv3d";
    VolumeMeta meta;
    meta.subject_id = e.subject_id;
    meta.label = e.label;
    meta.modality = e.modality;
    meta.hemisphere = e.hemisphere;
    meta.provenance = {{"generator", "planted-ridge"}, {"seed", manifest.seed}};
    write_volume(dir / e.path, cohort.volumes[i], meta);
    VolumeMeta mask_meta = meta;
    mask_meta.extra = {{"kind", "planted_mask"}};
    write_volume(dir / e.mask_path, cohort.masks[i], mask_meta);
  }
  write_manifest(dir / "manifest.json", manifest);
  return manifest;
}

Cohort load_cohort(const fs::path& manifest_path) {
  Cohort cohort;
  cohort.manifest = read_manifest(manifest_path);
  const fs::path base = manifest_path.parent_path();
  for (const auto& e : cohort.manifest.entries) {
    VolumeFile f = read_volume(base / e.path);
    require(f.volume.dims() == cohort.manifest.dims, ErrorKind::dimension_mismatch,
            e.path + ": dims do not match manifest");
    cohort.volumes.push_back(std::move(f.volume));
    cohort.masks.push_back(e.mask_path.empty() ? Volume3D(cohort.manifest.dims)
                                               : read_volume(base / e.mask_path).volume);
    cohort.labels.push_back(e.label);
    cohort.subject_ids.push_back(e.subject_id);
  }
  if (!cohort.volumes.empty()) {
    Volume3D mask(cohort.manifest.dims);
    for (const auto& m : cohort.masks) mask.voxels() = mask.voxels().max(m.voxels());
    cohort.planted_mask = mask;
  }
  return cohort;
}

}  // namespace xai3d
