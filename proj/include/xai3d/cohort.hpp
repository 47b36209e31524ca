#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xai3d/volume.hpp"

namespace xai3d {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Volume file format
//
//   offset  size  field
//   0       4     magic "XV3D"
//   4       4     version (u32 LE, currently 1)
//   8       12    w, h, d (u32 LE each)
//   20      4*V   voxels, f32 LE, x fastest
//
// Metadata sits in a JSON sidecar next to the payload (<stem>.json).
// ---------------------------------------------------------------------------

inline constexpr char kVolumeMagic[4] = {'X', 'V', '3', 'D'};
inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 20;

struct VolumeMeta {
  std::string subject_id;
  int label = -1;                 // 1 = PCS, 0 = noPCS, -1 = not applicable
  std::string modality = "skeleton";
  std::string hemisphere = "L";
  json provenance = json::object();
  json extra = json::object();    // method/class metadata for attribution maps

  json to_json(const Dims& dims) const;
  static VolumeMeta from_json(const json& j);
};

struct VolumeFile {
  Volume3D volume;
  VolumeMeta meta;
};

/// Creates parent directories; throws io errors on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);
json read_json_file(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& payload);

/// Writes the payload (voxels rounded to f32) and the sidecar.
void write_volume(const std::filesystem::path& path, const Volume3D& volume, const VolumeMeta& meta = {});
/// Reads payload + sidecar; the sidecar is optional, but its dims must agree when present.
VolumeFile read_volume(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_volume(const Volume3D& volume);
Volume3D decode_volume(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

// ---------------------------------------------------------------------------
// Cohorts
// ---------------------------------------------------------------------------

enum class Split { train, validation, test, unassigned };

const char* to_string(Split split);
Split split_from_string(const std::string& s);

struct SplitFractions {
  double train = 0.70;
  double validation = 0.20;
  double test = 0.10;
};

struct ManifestEntry {
  std::string subject_id;
  std::string path;       // relative to the manifest directory
  std::string mask_path;  // planted ground-truth mask, may be empty
  int label = 0;
  std::string modality = "skeleton";
  std::string hemisphere = "L";
  Split split = Split::unassigned;
};

struct CohortManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  Dims dims;

  json to_json() const;
  static CohortManifest from_json(const json& j);
};

void write_manifest(const std::filesystem::path& path, const CohortManifest& manifest);
CohortManifest read_manifest(const std::filesystem::path& path);

/// Subject-level split, stratified by label. Deterministic per seed.
CohortManifest split(const CohortManifest& manifest, const SplitFractions& fractions, std::uint64_t seed);

/// The class-1 feature. Amplitude, position and extent vary per subject.
struct RidgeSpec {
  double amplitude_min = 0.2;
  double amplitude_max = 1.8;
  double tube_radius = 1.5;  // voxels, at 16^3; scaled with the volume width
  double jitter = 0.0;       // max xy offset in voxels, at 16^3
  double trim = 0.0;         // max fraction cut from each end of the arc
};

inline constexpr int kMaxFolds = 4;

/// Straight folds present in every subject, with per-subject amplitude.
struct FoldSpec {
  int count = 3;
  double amplitude_min = 0.3;
  double amplitude_max = 1.3;
};

struct CohortParams {
  int n_subjects = 200;
  Dims dims{16, 16, 16};
  RidgeSpec ridge;
  FoldSpec folds;
  double noise = 0.02;  // white-noise sd; smooth per-subject modes use half of it
  std::uint64_t seed = 1;
  std::string modality = "skeleton";
  std::string hemisphere = "L";
};

/// In-memory cohort with planted ground truth.
struct Cohort {
  std::vector<Volume3D> volumes;
  std::vector<Volume3D> masks;  // 1 on planted voxels, 0 elsewhere (all zero for class 0)
  std::vector<int> labels;
  std::vector<std::string> subject_ids;
  CohortManifest manifest;      // split assignments, paths filled by write_cohort
  Volume3D planted_mask;        // union of the class-1 masks
};

/// Class-1 volumes carry a curvilinear ridge at a fixed location. All volumes share a smooth
/// template and a few straight folds of varying amplitude, plus low-rank smooth variation and
/// white noise scaled by `noise`.
Cohort generate_cohort(const CohortParams& params);

/// Writes volumes, masks and manifest.json under `dir`; returns the manifest with relative paths.
CohortManifest write_cohort(const std::filesystem::path& dir, const Cohort& cohort);

/// Loads every volume referenced by a manifest (masks when present).
Cohort load_cohort(const std::filesystem::path& manifest_path);

/// Indices of entries in the given split.
std::vector<std::size_t> indices_in(const CohortManifest& manifest, Split split);

}  // namespace xai3d
