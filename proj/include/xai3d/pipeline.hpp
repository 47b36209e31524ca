#pragma once

// End-to-end orchestration: configuration, per-stage commands and report emission. Every
// command reads the artifacts of earlier stages from the output directory and writes its own
// next to them, together with a stage manifest (config hash, seed, versions).

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xai3d/atlas.hpp"
#include "xai3d/attribution.hpp"
#include "xai3d/cohort.hpp"
#include "xai3d/global.hpp"
#include "xai3d/metrics.hpp"
#include "xai3d/train.hpp"

namespace xai3d {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kEnvPrefix = "XAI3D_";

struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::filesystem::path out_dir = "xai3d-run";

  CohortParams cohort;
  std::filesystem::path cohort_manifest;  // use an existing cohort instead of generating one

  std::string network = "simple_cnn";  // simple_cnn | simple_mhl | two_level_mhl
  double scale = 0.125;
  int levels = 3;
  int key_dim = 8;
  std::optional<int> mlp_hidden;

  TrainConfig train = [] {
    TrainConfig t;
    t.max_epochs = 40;  // the 16^3 cohort converges well before the library default
    return t;
  }();

  std::vector<AttributionMethod> methods{AttributionMethod::gradcam, AttributionMethod::shap};
  std::vector<int> classes{1, 0};
  int shap_block = 4;
  int shap_permutations = 4;
  int max_subjects_per_class = 50;  // 0 = every subject of the class

  int pca_k = 6;
  std::vector<double> component_weights{0.85, 0.7, 0.5, 0.3, 0.1, 0.001};
  bool pooled_pca = false;
  int fusion_code = 851;
  Alignment alignment;

  int metric_grid = 4;
  int draws = kDefaultPerturbations;
  double baseline = 0.0;

  int atlas_regions = 8;
  std::filesystem::path atlas_dir;  // use an existing atlas instead of a synthetic one
  std::vector<double> atlas_fractions{kHistogramFractions.begin(), kHistogramFractions.end()};
  AffineTransform3D atlas_transform;
  std::vector<char> slice_axes{'z'};

  /// Unknown keys are rejected; missing keys keep their defaults.
  static RunConfig from_json(const json& j);
  json to_json() const;
  void validate() const;

  std::uint64_t stage_seed(const char* stage) const;
  NetworkSpec network_spec() const;
};

/// Overlays environment variables `XAI3D_<SECTION>__<KEY>=value` onto a config document.
/// Keys are lower-cased; values are parsed as JSON when possible, otherwise kept as strings.
json apply_env_overrides(json doc, const std::map<std::string, std::string>& env);
std::map<std::string, std::string> environment_with_prefix(const char* prefix = kEnvPrefix);

/// 64-bit FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// --- stage data -------------------------------------------------------------------------

/// Explanations are grouped by hemisphere, modality and class ("L_skeleton/class1").
struct GroupKey {
  std::string hemisphere;
  std::string modality;
  int class_index = 1;  // -1 for pooled groups

  std::string dir() const;
  std::string class_label() const;
  auto operator<=>(const GroupKey&) const = default;
};

struct GlobalSet {
  GroupKey key;
  GlobalExplanation shape, shap, gradcam, framework;
};

struct ScoreRow {
  std::string method;
  GroupKey key;
  ExplanationScore score;
};

std::vector<GlobalSet> aggregate_groups(const RunConfig& cfg, const std::filesystem::path& out);

// --- commands ---------------------------------------------------------------------------

void cmd_generate(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_explain(const RunConfig& cfg);
void cmd_aggregate(const RunConfig& cfg);
void cmd_evaluate(const RunConfig& cfg);
void cmd_ablate(const RunConfig& cfg);
void cmd_atlas_report(const RunConfig& cfg);
void cmd_run(const RunConfig& cfg);

std::string scores_csv(const std::vector<ScoreRow>& rows);
std::string ablation_csv(const std::vector<ScoreRow>& rows);

/// One binary PGM per slice along `axis` ('x', 'y' or 'z'), pixel = round(255 * clamp(v, 0, 1)).
/// Returns the written paths in slice order.
std::vector<std::filesystem::path> emit_slices(const Volume3D& v, char axis, const std::filesystem::path& out_dir);

/// Pixel rows of slice `index` along `axis` (rows run along the slower in-plane axis).
std::vector<std::uint8_t> slice_pixels(const Volume3D& v, char axis, int index, int* width, int* height);

/// Exit code for an error category: 2 for configuration and argument errors, 3 for missing or
/// unreadable prerequisites, 4 for numeric failures.
int exit_code_for(ErrorKind kind);

}  // namespace xai3d
