#include "xai3d/pipeline.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "xai3d/parallel.hpp"
#include "xai3d/random.hpp"

extern char** environ;

namespace xai3d {

namespace fs = std::filesystem;

namespace {

// Reads keys out of one JSON object and rejects the ones nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j.is_object(), ErrorKind::config, "config: " + label() + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& dst) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      dst = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::config, "config: " + label(key) + ": " + e.what());
    }
  }

  bool has(const char* key) {
    used_.insert(key);
    return j_.contains(key);
  }

  Section child(const char* key) {
    used_.insert(key);
    return Section(j_.contains(key) ? j_.at(key) : empty(), path_.empty() ? key : path_ + "." + key);
  }

  const json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::string label(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "document" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      require(used_.count(key) > 0, ErrorKind::config, "config: unknown key " + label(key));
    }
  }

 private:
  static const json& empty() {
    static const json e = json::object();
    return e;
  }
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

AffineTransform3D transform_from_json(const json& j, const std::string& where) {
  AffineTransform3D t;
  try {
    if (j.contains("linear")) {
      const auto v = j.at("linear").get<std::vector<double>>();
      require(v.size() == 9, ErrorKind::config, "config: " + where + ".linear needs 9 row-major values");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) t.linear(r, c) = v[std::size_t(3 * r + c)];
    }
    if (j.contains("translation")) {
      const auto v = j.at("translation").get<std::vector<double>>();
      require(v.size() == 3, ErrorKind::config, "config: " + where + ".translation needs 3 values");
      t.translation = Eigen::Vector3d(v[0], v[1], v[2]);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, "config: " + where + ": " + e.what());
  }
  require(t.invertible(), ErrorKind::config, "config: " + where + " is singular");
  return t;
}

json transform_to_json(const AffineTransform3D& t) {
  std::vector<double> linear;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) linear.push_back(t.linear(r, c));
  return {{"linear", linear}, {"translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

AttributionMethod method_from_string(const std::string& s) {
  if (s == "gradcam") return AttributionMethod::gradcam;
  if (s == "shap") return AttributionMethod::shap;
  throw Error(ErrorKind::config, "config: unknown explanation method '" + s + "' (gradcam, shap)");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string lower(std::string s) {
  for (char& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  if (root.has("seed")) {
    std::uint64_t seed = 0;
    root.get("seed", seed);
    c.seed = seed;
  }
  std::string out = c.out_dir.string();
  root.get("out_dir", out);
  c.out_dir = out;

  {
    Section s = root.child("cohort");
    s.get("n_subjects", c.cohort.n_subjects);
    if (s.has("dims")) {
      std::array<int, 3> d{};
      s.get("dims", d);
      c.cohort.dims = Dims{d[0], d[1], d[2]};
    }
    s.get("noise", c.cohort.noise);
    s.get("modality", c.cohort.modality);
    s.get("hemisphere", c.cohort.hemisphere);
    std::string manifest;
    s.get("manifest", manifest);
    c.cohort_manifest = manifest;
    Section r = s.child("ridge");
    r.get("amplitude_min", c.cohort.ridge.amplitude_min);
    r.get("amplitude_max", c.cohort.ridge.amplitude_max);
    r.get("tube_radius", c.cohort.ridge.tube_radius);
    r.get("jitter", c.cohort.ridge.jitter);
    r.get("trim", c.cohort.ridge.trim);
    r.finish();
    Section f = s.child("folds");
    f.get("count", c.cohort.folds.count);
    f.get("amplitude_min", c.cohort.folds.amplitude_min);
    f.get("amplitude_max", c.cohort.folds.amplitude_max);
    f.finish();
    s.finish();
  }
  {
    Section s = root.child("network");
    s.get("preset", c.network);
    s.get("scale", c.scale);
    s.get("levels", c.levels);
    s.get("key_dim", c.key_dim);
    if (s.has("mlp_hidden")) {
      int h = 0;
      s.get("mlp_hidden", h);
      c.mlp_hidden = h;
    }
    s.finish();
  }
  {
    Section s = root.child("train");
    s.get("learning_rate", c.train.learning_rate);
    s.get("decay_factor", c.train.decay_factor);
    s.get("decay_every", c.train.decay_every);
    s.get("max_epochs", c.train.max_epochs);
    s.get("patience", c.train.patience);
    s.get("batch_size", c.train.batch_size);
    Section fr = s.child("fractions");
    fr.get("train", c.train.fractions.train);
    fr.get("validation", c.train.fractions.validation);
    fr.get("test", c.train.fractions.test);
    fr.finish();
    Section a = s.child("augment");
    a.get("enabled", c.train.augment.enabled);
    a.get("max_rotation_deg", c.train.augment.max_rotation_deg);
    a.get("max_shift", c.train.augment.max_shift);
    a.get("zca", c.train.augment.zca);
    a.get("zca_epsilon", c.train.augment.zca_epsilon);
    a.finish();
    s.finish();
  }
  {
    Section s = root.child("explain");
    if (s.has("methods")) {
      std::vector<std::string> names;
      s.get("methods", names);
      c.methods.clear();
      for (const auto& n : names) c.methods.push_back(method_from_string(n));
    }
    s.get("classes", c.classes);
    s.get("shap_block", c.shap_block);
    s.get("shap_permutations", c.shap_permutations);
    s.get("max_subjects_per_class", c.max_subjects_per_class);
    s.finish();
  }
  {
    Section s = root.child("aggregate");
    s.get("k", c.pca_k);
    s.get("weights", c.component_weights);
    s.get("pooled", c.pooled_pca);
    s.get("fusion_code", c.fusion_code);
    Section al = s.child("alignment");
    const char* names[3] = {"shape", "shap", "gradcam"};
    for (int i = 0; i < 3; ++i) {
      if (al.has(names[i])) {
        c.alignment[std::size_t(i)] = transform_from_json(al.raw(names[i]), "aggregate.alignment." + std::string(names[i]));
      }
    }
    al.finish();
    s.finish();
  }
  {
    Section s = root.child("metrics");
    s.get("grid", c.metric_grid);
    s.get("draws", c.draws);
    s.get("baseline", c.baseline);
    s.finish();
  }
  {
    Section s = root.child("atlas");
    s.get("regions", c.atlas_regions);
    std::string dir;
    s.get("dir", dir);
    c.atlas_dir = dir;
    s.get("fractions", c.atlas_fractions);
    if (s.has("transform")) c.atlas_transform = transform_from_json(s.raw("transform"), "atlas.transform");
    std::string axes(c.slice_axes.begin(), c.slice_axes.end());
    s.get("slice_axes", axes);
    c.slice_axes.assign(axes.begin(), axes.end());
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  json j;
  if (seed) j["seed"] = *seed;
  j["out_dir"] = out_dir.string();
  j["cohort"] = {{"n_subjects", cohort.n_subjects},
                 {"dims", {cohort.dims.w, cohort.dims.h, cohort.dims.d}},
                 {"noise", cohort.noise},
                 {"modality", cohort.modality},
                 {"hemisphere", cohort.hemisphere},
                 {"manifest", cohort_manifest.string()},
                 {"ridge",
                  {{"amplitude_min", cohort.ridge.amplitude_min},
                   {"amplitude_max", cohort.ridge.amplitude_max},
                   {"tube_radius", cohort.ridge.tube_radius},
                   {"jitter", cohort.ridge.jitter},
                   {"trim", cohort.ridge.trim}}},
                 {"folds",
                  {{"count", cohort.folds.count},
                   {"amplitude_min", cohort.folds.amplitude_min},
                   {"amplitude_max", cohort.folds.amplitude_max}}}};
  j["network"] = {{"preset", network}, {"scale", scale}, {"levels", levels}, {"key_dim", key_dim}};
  if (mlp_hidden) j["network"]["mlp_hidden"] = *mlp_hidden;
  j["train"] = {{"learning_rate", train.learning_rate},
                {"decay_factor", train.decay_factor},
                {"decay_every", train.decay_every},
                {"max_epochs", train.max_epochs},
                {"patience", train.patience},
                {"batch_size", train.batch_size},
                {"fractions",
                 {{"train", train.fractions.train},
                  {"validation", train.fractions.validation},
                  {"test", train.fractions.test}}},
                {"augment",
                 {{"enabled", train.augment.enabled},
                  {"max_rotation_deg", train.augment.max_rotation_deg},
                  {"max_shift", train.augment.max_shift},
                  {"zca", train.augment.zca},
                  {"zca_epsilon", train.augment.zca_epsilon}}}};
  std::vector<std::string> method_names;
  for (auto m : methods) method_names.emplace_back(to_string(m));
  j["explain"] = {{"methods", method_names},
                  {"classes", classes},
                  {"shap_block", shap_block},
                  {"shap_permutations", shap_permutations},
                  {"max_subjects_per_class", max_subjects_per_class}};
  json al = json::object();
  const char* names[3] = {"shape", "shap", "gradcam"};
  for (int i = 0; i < 3; ++i)
    if (alignment[std::size_t(i)]) al[names[i]] = transform_to_json(*alignment[std::size_t(i)]);
  j["aggregate"] = {{"k", pca_k},
                    {"weights", component_weights},
                    {"pooled", pooled_pca},
                    {"fusion_code", fusion_code},
                    {"alignment", al}};
  j["metrics"] = {{"grid", metric_grid}, {"draws", draws}, {"baseline", baseline}};
  j["atlas"] = {{"regions", atlas_regions},
                {"dir", atlas_dir.string()},
                {"fractions", atlas_fractions},
                {"transform", transform_to_json(atlas_transform)},
                {"slice_axes", std::string(slice_axes.begin(), slice_axes.end())}};
  return j;
}

void RunConfig::validate() const {
  require(!out_dir.empty(), ErrorKind::config, "config: out_dir must not be empty");
  require(cohort.n_subjects >= 20, ErrorKind::config, "config: cohort.n_subjects must be at least 20");
  require(cohort.dims.valid(), ErrorKind::config, "config: cohort.dims must be positive");
  require(network == "simple_cnn" || network == "simple_mhl" || network == "two_level_mhl", ErrorKind::config,
          "config: network.preset must be simple_cnn, simple_mhl or two_level_mhl");
  require(scale > 0.0, ErrorKind::config, "config: network.scale must be positive");
  require(levels >= 1 && levels <= 5, ErrorKind::config, "config: network.levels must be in [1, 5]");
  try {
    train.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::config, std::string("config: ") + e.what());
  }
  require(!methods.empty(), ErrorKind::config, "config: explain.methods must not be empty");
  require(!classes.empty(), ErrorKind::config, "config: explain.classes must not be empty");
  for (int c : classes) require(c == 0 || c == 1, ErrorKind::config, "config: explain.classes entries must be 0 or 1");
  require(shap_block >= 1 && shap_permutations >= 1, ErrorKind::config,
          "config: explain.shap_block and explain.shap_permutations must be at least 1");
  require(max_subjects_per_class >= 0, ErrorKind::config, "config: explain.max_subjects_per_class must be >= 0");
  require(pca_k >= 1 && int(component_weights.size()) == pca_k, ErrorKind::config,
          "config: aggregate.weights must have aggregate.k entries");
  for (double w : component_weights) require(w > 0.0, ErrorKind::config, "config: aggregate.weights must be positive");
  try {
    FusionWeights::from_code(fusion_code);
  } catch (const Error& e) {
    throw Error(ErrorKind::config, std::string("config: aggregate.fusion_code: ") + e.what());
  }
  require(metric_grid >= 1 && draws >= 2, ErrorKind::config, "config: metrics.grid >= 1 and metrics.draws >= 2");
  require(std::isfinite(baseline), ErrorKind::config, "config: metrics.baseline must be finite");
  require(atlas_regions >= 1, ErrorKind::config, "config: atlas.regions must be at least 1");
  for (double f : atlas_fractions)
    require(f > 0.0 && f < 1.0, ErrorKind::config, "config: atlas.fractions must lie in (0, 1)");
  for (char a : slice_axes)
    require(a == 'x' || a == 'y' || a == 'z', ErrorKind::config, "config: atlas.slice_axes may contain x, y, z");
}

std::uint64_t RunConfig::stage_seed(const char* stage) const {
  require(seed.has_value(), ErrorKind::config, "config: a seed is required (config key 'seed' or --seed)");
  return derive_seed(*seed, stage);
}

NetworkSpec RunConfig::network_spec() const {
  NetworkSpec spec;
  if (network == "simple_mhl") {
    spec = NetworkSpec::simple_mhl(cohort.dims, scale, levels, key_dim);
  } else if (network == "two_level_mhl") {
    spec = NetworkSpec::two_level_mhl(cohort.dims, scale, key_dim);
  } else {
    spec = NetworkSpec::simple_cnn(cohort.dims, scale, levels);
  }
  if (mlp_hidden) spec.mlp_hidden = {*mlp_hidden, *mlp_hidden};
  return spec;
}

json apply_env_overrides(json doc, const std::map<std::string, std::string>& env) {
  const std::string prefix = kEnvPrefix;
  for (const auto& [name, value] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string rest = lower(name.substr(prefix.size()));
    require(!rest.empty(), ErrorKind::config, "environment override " + name + " names no key");
    json* node = &doc;
    std::size_t pos = 0;
    while (true) {
      const std::size_t sep = rest.find("__", pos);
      const std::string key = rest.substr(pos, sep == std::string::npos ? std::string::npos : sep - pos);
      require(!key.empty(), ErrorKind::config, "environment override " + name + " has an empty key segment");
      if (sep == std::string::npos) {
        json parsed = json::parse(value, nullptr, false);
        (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
        break;
      }
      if (!node->contains(key)) (*node)[key] = json::object();
      node = &(*node)[key];
      require(node->is_object(), ErrorKind::config, "environment override " + name + " descends into a non-object");
      pos = sep + 2;
    }
  }
  return doc;
}

std::map<std::string, std::string> environment_with_prefix(const char* prefix) {
  std::map<std::string, std::string> out;
  const std::string p = prefix;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry = *e;
    const auto eq = entry.find('=');
    if (eq == std::string::npos || entry.rfind(p, 0) != 0) continue;
    out[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  const std::string text = cfg.to_json().dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= std::uint8_t(c);
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

// ---------------------------------------------------------------------------------------
// Artifact layout and shared helpers

std::string GroupKey::dir() const { return hemisphere + "_" + modality + "/" + (class_index < 0 ? "pooled" : "class" + std::to_string(class_index)); }

std::string GroupKey::class_label() const { return class_index < 0 ? "all" : std::to_string(class_index); }

namespace {

struct Layout {
  fs::path root;
  fs::path cohort_manifest() const { return root / "cohort" / "manifest.json"; }
  fs::path model() const { return root / "model" / "model.xnet"; }
  fs::path explain(const GroupKey& k) const { return root / "explain" / k.dir(); }
  fs::path explain_index() const { return root / "explain" / "index.json"; }
  fs::path global(const GroupKey& k) const { return root / "global" / k.dir(); }
  fs::path global_index() const { return root / "global" / "index.json"; }
  fs::path atlas() const { return root / "atlas"; }
  fs::path manifest(const std::string& stage) const { return root / "manifests" / (stage + ".json"); }
};

void require_artifact(const fs::path& path, const char* producer) {
  require(fs::exists(path), ErrorKind::missing_prerequisite,
          path.string() + " not found; run '" + std::string(producer) + "' first");
}

void write_stage_manifest(const RunConfig& cfg, const Layout& layout, const std::string& stage) {
  json j;
  j["stage"] = stage;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = *cfg.seed;
  j["versions"] = {{"xai3d", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  j["config"] = cfg.to_json();
  write_text_file(layout.manifest(stage), j.dump(2) + "\n");
}

void begin(const RunConfig& cfg) {
  cfg.validate();
  require(cfg.seed.has_value(), ErrorKind::config, "config: a seed is required (config key 'seed' or --seed)");
  fs::create_directories(cfg.out_dir);
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

json key_to_json(const GroupKey& k) {
  return {{"hemisphere", k.hemisphere}, {"modality", k.modality}, {"class", k.class_index}};
}

GroupKey key_from_json(const json& j) {
  return GroupKey{j.at("hemisphere").get<std::string>(), j.at("modality").get<std::string>(), j.at("class").get<int>()};
}

const char* map_file(GlobalSource s) {
  switch (s) {
    case GlobalSource::total_shape: return "total_shape.xv3d";
    case GlobalSource::total_shap: return "total_shap.xv3d";
    case GlobalSource::total_gradcam: return "total_gradcam.xv3d";
    case GlobalSource::framework: return "framework.xv3d";
  }
  return "map.xv3d";
}

void write_global(const fs::path& dir, const GlobalExplanation& g) {
  VolumeMeta meta;
  meta.modality = g.modality;
  meta.hemisphere = g.hemisphere;
  meta.extra = {{"source", to_string(g.source)}, {"class", g.class_index}, {"weights", g.weights}};
  write_volume(dir / map_file(g.source), g.map, meta);
}

GlobalExplanation read_global(const fs::path& dir, GlobalSource source, const GroupKey& key) {
  const fs::path path = dir / map_file(source);
  require_artifact(path, "aggregate");
  GlobalExplanation g;
  g.map = read_volume(path).volume;
  g.source = source;
  g.class_index = key.class_index;
  g.hemisphere = key.hemisphere;
  g.modality = key.modality;
  return g;
}

std::vector<GroupKey> read_global_index(const Layout& layout) {
  require_artifact(layout.global_index(), "aggregate");
  std::vector<GroupKey> keys;
  const json index = read_json_file(layout.global_index());
  for (const auto& k : index.at("groups")) keys.push_back(key_from_json(k));
  return keys;
}

PerturbationPolicy metric_policy(const RunConfig& cfg, Dims dims) {
  PerturbationPolicy p = PerturbationPolicy::standard(dims, cfg.metric_grid, cfg.stage_seed("metrics"));
  p.draws = cfg.draws;
  p.baseline = cfg.baseline;
  return p;
}

GlobalExplanation aligned(const GlobalExplanation& g, const std::optional<AffineTransform3D>& t, Dims target) {
  if (!t) return g;
  GlobalExplanation out = g;
  out.map = apply_affine(g.map, *t, target);
  return out;
}

std::string framework_name(int code) { return std::string(to_string(GlobalSource::framework)) + "-" + std::to_string(code); }

}  // namespace

// ---------------------------------------------------------------------------------------
// Commands

void cmd_generate(const RunConfig& cfg) {
  begin(cfg);
  const Layout layout{cfg.out_dir};
  Cohort cohort;
  if (!cfg.cohort_manifest.empty()) {
    require_artifact(cfg.cohort_manifest, "an external cohort export");
    cohort = load_cohort(cfg.cohort_manifest);
  } else {
    CohortParams params = cfg.cohort;
    params.seed = cfg.stage_seed("cohort");
    cohort = generate_cohort(params);
  }
  cohort.manifest = split(cohort.manifest, cfg.train.fractions, cfg.stage_seed("split"));
  write_cohort(cfg.out_dir / "cohort", cohort);
  write_stage_manifest(cfg, layout, "generate");
}

void cmd_train(const RunConfig& cfg) {
  begin(cfg);
  const Layout layout{cfg.out_dir};
  require_artifact(layout.cohort_manifest(), "generate");
  const Cohort cohort = load_cohort(layout.cohort_manifest());
  NetworkSpec spec = cfg.network_spec();
  spec.input = cohort.manifest.dims;
  TrainConfig tc = cfg.train;
  tc.seed = cfg.stage_seed("train");
  const TrainResult result = train(LabeledCohort::from(cohort), spec, tc);
  save_model(layout.model(), result.model);
  write_text_file(cfg.out_dir / "model" / "training.csv", report_csv(result.report));
  const auto& r = result.report;
  json report = {{"best_epoch", r.best_epoch},
                 {"stopped_epoch", r.stopped_epoch},
                 {"early_stopped", r.early_stopped},
                 {"train_accuracy", r.train_accuracy},
                 {"validation_accuracy", r.val_accuracy},
                 {"test_accuracy", r.test_accuracy},
                 {"test_loss", r.test_loss}};
  write_text_file(cfg.out_dir / "model" / "train_report.json", report.dump(2) + "\n");
  write_stage_manifest(cfg, layout, "train");
}

void cmd_explain(const RunConfig& cfg) {
  begin(cfg);
  const Layout layout{cfg.out_dir};
  require_artifact(layout.cohort_manifest(), "generate");
  require_artifact(layout.model(), "train");
  const Cohort cohort = load_cohort(layout.cohort_manifest());
  const Model model = load_model(layout.model());
  const Dims dims = cohort.manifest.dims;
  const SupervoxelPartition partition = make_partition(dims, cfg.shap_block);
  const Volume3D baseline(dims, cfg.baseline);
  const std::uint64_t seed = cfg.stage_seed("explain");

  std::map<GroupKey, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < cohort.manifest.entries.size(); ++i) {
    const auto& e = cohort.manifest.entries[i];
    if (std::find(cfg.classes.begin(), cfg.classes.end(), e.label) == cfg.classes.end()) continue;
    auto& members = groups[GroupKey{e.hemisphere, e.modality, e.label}];
    if (cfg.max_subjects_per_class == 0 || int(members.size()) < cfg.max_subjects_per_class) members.push_back(i);
  }

  json index;
  index["methods"] = json::array();
  for (auto m : cfg.methods) index["methods"].push_back(to_string(m));
  index["groups"] = json::array();
  for (const auto& [key, members] : groups) {
    const Scorer f = class_scorer(model, key.class_index);
    std::vector<std::vector<Volume3D>> maps(cfg.methods.size(), std::vector<Volume3D>(members.size()));
    parallel_for(members.size(), [&](std::size_t k) {
      const std::size_t i = members[k];
      for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
        maps[m][k] = cfg.methods[m] == AttributionMethod::gradcam
                         ? gradcam3d(model, cohort.volumes[i], key.class_index).map
                         : shapley_sampled(f, cohort.volumes[i], partition, baseline, cfg.shap_permutations,
                                           derive_seed(seed, std::uint64_t(i)))
                               .map;
      }
    });
    json subjects = json::array();
    for (std::size_t k = 0; k < members.size(); ++k) {
      const auto& e = cohort.manifest.entries[members[k]];
      subjects.push_back(e.subject_id);
      for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
        VolumeMeta meta;
        meta.subject_id = e.subject_id;
        meta.label = e.label;
        meta.modality = e.modality;
        meta.hemisphere = e.hemisphere;
        meta.extra = {{"method", to_string(cfg.methods[m])}, {"class", key.class_index}};
        write_volume(layout.explain(key) / to_string(cfg.methods[m]) / (e.subject_id + ".xv3d"), maps[m][k], meta);
      }
    }
    json g = key_to_json(key);
    g["subjects"] = subjects;
    index["groups"].push_back(g);
  }
  write_text_file(layout.explain_index(), index.dump(2) + "\n");
  write_stage_manifest(cfg, layout, "explain");
}

std::vector<GlobalSet> aggregate_groups(const RunConfig& cfg, const fs::path& out) {
  const Layout layout{out};
  require_artifact(layout.cohort_manifest(), "generate");
  require_artifact(layout.explain_index(), "explain");
  const json index = read_json_file(layout.explain_index());
  const auto methods = index.at("methods").get<std::vector<std::string>>();
  for (const char* needed : {"gradcam", "shap"}) {
    require(std::find(methods.begin(), methods.end(), needed) != methods.end(), ErrorKind::missing_prerequisite,
            std::string("aggregate needs ") + needed + " explanations; rerun 'explain' with both methods");
  }
  const Cohort cohort = load_cohort(layout.cohort_manifest());
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < cohort.subject_ids.size(); ++i) by_id[cohort.subject_ids[i]] = i;

  struct Samples {
    std::vector<Volume3D> shape, shap, gradcam;
  };
  std::map<GroupKey, Samples> samples;
  for (const auto& g : index.at("groups")) {
    const GroupKey source = key_from_json(g);
    GroupKey key = source;
    if (cfg.pooled_pca) key.class_index = -1;
    Samples& s = samples[key];
    for (const auto& id : g.at("subjects")) {
      const std::string sid = id.get<std::string>();
      const auto it = by_id.find(sid);
      require(it != by_id.end(), ErrorKind::missing_prerequisite, "explained subject " + sid + " is not in the cohort");
      s.shape.push_back(cohort.volumes[it->second]);
      const fs::path dir = layout.explain(source);
      s.gradcam.push_back(read_volume(dir / "gradcam" / (sid + ".xv3d")).volume);
      s.shap.push_back(read_volume(dir / "shap" / (sid + ".xv3d")).volume);
    }
  }

  const WeightTensor weights(cfg.component_weights);
  const FusionWeights fusion = FusionWeights::from_code(cfg.fusion_code);
  std::vector<GlobalSet> sets;
  for (const auto& [key, s] : samples) {
    require(int(s.shape.size()) >= cfg.pca_k, ErrorKind::invalid_argument,
            "aggregate: group " + key.dir() + " has " + std::to_string(s.shape.size()) + " subjects, fewer than k = " +
                std::to_string(cfg.pca_k));
    GlobalSet set;
    set.key = key;
    auto tag = [&](GlobalExplanation g) {
      g.class_index = key.class_index;
      g.hemisphere = key.hemisphere;
      g.modality = key.modality;
      return g;
    };
    set.shape = tag(total_from_pca(fit_pca(s.shape, cfg.pca_k), GlobalSource::total_shape, weights));
    set.shap = tag(total_from_pca(fit_pca(s.shap, cfg.pca_k), GlobalSource::total_shap, weights));
    set.gradcam = tag(total_from_pca(fit_pca(s.gradcam, cfg.pca_k), GlobalSource::total_gradcam, weights));
    set.framework = fuse_framework(set.shape, set.shap, set.gradcam, fusion, cfg.alignment);
    sets.push_back(std::move(set));
  }
  return sets;
}

void cmd_aggregate(const RunConfig& cfg) {
  begin(cfg);
  const Layout layout{cfg.out_dir};
  const auto sets = aggregate_groups(cfg, cfg.out_dir);
  json index;
  index["groups"] = json::array();
  for (const auto& s : sets) {
    const fs::path dir = layout.global(s.key);
    for (const auto* g : {&s.shape, &s.shap, &s.gradcam, &s.framework}) write_global(dir, *g);
    json pca = {{"k", cfg.pca_k},
                {"weights", cfg.component_weights},
                {"fusion_code", cfg.fusion_code},
                {"explained_variance",
                 {{"total-Shape", s.shape.explained_variance},
                  {"total-SHAP", s.shap.explained_variance},
                  {"total-GradCam", s.gradcam.explained_variance}}}};
    write_text_file(dir / "pca.json", pca.dump(2) + "\n");
    index["groups"].push_back(key_to_json(s.key));
  }
  write_text_file(layout.global_index(), index.dump(2) + "\n");
  write_stage_manifest(cfg, layout, "aggregate");
}

std::string scores_csv(const std::vector<ScoreRow>& rows) {
  std::ostringstream out;
  out << "method,hemisphere,modality,class,faithfulness,complexity\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.key.hemisphere << ',' << r.key.modality << ',' << r.key.class_label() << ','
        << fixed6(r.score.faithfulness) << ',' << fixed6(r.score.complexity) << '\n';
  }
  return out.str();
}

std::string ablation_csv(const std::vector<ScoreRow>& rows) {
  std::ostringstream out;
  out << "code,hemisphere,modality,class,faithfulness,complexity\n";
  for (const auto& r : rows) {
    out << r.method << ',' << r.key.hemisphere << ',' << r.key.modality << ',' << r.key.class_label() << ','
        << fixed6(r.score.faithfulness) << ',' << fixed6(r.score.complexity) << '\n';
  }
  return out.str();
}

void cmd_evaluate(const RunConfig& cfg) {
  begin(cfg);
  const Layout layout{cfg.out_dir};
  require_artifact(layout.model(), "train");
  const Model model = load_model(layout.model());
  std::vector<ScoreRow> rows;
  for (const GroupKey& key : read_global_index(layout)) {
    const fs::path dir = layout.global(key);
    const auto shape = read_global(dir, GlobalSource::total_shape, key);
    const Dims dims = shape.map.dims();
    const auto shap = aligned(read_global(dir, GlobalSource::total_shap, key), cfg.alignment[1], dims);
    const auto gradcam = aligned(read_global(dir, GlobalSource::total_gradcam, key), cfg.alignment[2], dims);
    const auto framework = read_global(dir, GlobalSource::framework, key);
    const Scorer f = class_scorer(model, key.class_index < 0 ? 1 : key.class_index);
    const PerturbationPolicy policy = metric_policy(cfg, dims);
    rows.push_back({to_string(GlobalSource::total_shap), key, score_global(shape.map, shap.map, f, policy)});
    rows.push_back({to_string(GlobalSource::total_gradcam), key, score_global(shape.map, gradcam.map, f, policy)});
    rows.push_back({framework_name(cfg.fusion_code), key, score_global(shape.map, framework.map, f, policy)});
  }
  write_text_file(cfg.out_dir / "scores.csv", scores_csv(rows));
  write_stage_manifest(cfg, layout, "evaluate");
}

void cmd_ablate(const RunConfig& cfg) {
  begin(cfg);
  const Layout layout{cfg.out_dir};
  require_artifact(layout.model(), "train");
  const Model model = load_model(layout.model());
  std::vector<ScoreRow> rows;
  for (const GroupKey& key : read_global_index(layout)) {
    const fs::path dir = layout.global(key);
    const auto shape = read_global(dir, GlobalSource::total_shape, key);
    const auto shap = read_global(dir, GlobalSource::total_shap, key);
    const auto gradcam = read_global(dir, GlobalSource::total_gradcam, key);
    const Scorer f = class_scorer(model, key.class_index < 0 ? 1 : key.class_index);
    const PerturbationPolicy policy = metric_policy(cfg, shape.map.dims());
    for (auto& row : run_ablation(shape, shap, gradcam, f, policy, cfg.alignment)) {
      rows.push_back({std::to_string(row.code), key, row.score});
    }
  }
  write_text_file(cfg.out_dir / "ablation.csv", ablation_csv(rows));
  write_stage_manifest(cfg, layout, "ablate");
}

void cmd_atlas_report(const RunConfig& cfg) {
  begin(cfg);
  const Layout layout{cfg.out_dir};
  const auto keys = read_global_index(layout);
  ProbabilisticAtlas atlas;
  if (!cfg.atlas_dir.empty()) {
    require_artifact(cfg.atlas_dir / "atlas.json", "an atlas export");
    atlas = read_atlas(cfg.atlas_dir);
  }
  for (const GroupKey& key : keys) {
    const fs::path dir = layout.global(key);
    const auto framework = read_global(dir, GlobalSource::framework, key);
    if (atlas.regions() == 0) {
      atlas = make_synthetic_atlas(framework.map.dims(), cfg.atlas_regions, cfg.stage_seed("atlas"));
      write_atlas(layout.atlas(), atlas);
    }
    const Volume3D registered = register_to_atlas(framework, atlas, cfg.atlas_transform);
    std::vector<RegionHistogram> histograms;
    for (double fraction : cfg.atlas_fractions) histograms.push_back(threshold_histogram(registered, atlas, fraction));
    write_text_file(layout.atlas() / key.dir() / "histogram.csv", histogram_csv(histograms));
    for (char axis : cfg.slice_axes) emit_slices(registered, axis, layout.root / "slices" / key.dir() / std::string(1, axis));
  }
  write_stage_manifest(cfg, layout, "atlas_report");
}

void cmd_run(const RunConfig& cfg) {
  cmd_generate(cfg);
  cmd_train(cfg);
  cmd_explain(cfg);
  cmd_aggregate(cfg);
  cmd_evaluate(cfg);
  cmd_ablate(cfg);
  cmd_atlas_report(cfg);
}

// ---------------------------------------------------------------------------------------
// Slices and exit codes

std::vector<std::uint8_t> slice_pixels(const Volume3D& v, char axis, int index, int* width, int* height) {
  const Dims d = v.dims();
  int w = 0, h = 0, n = 0;
  switch (axis) {
    case 'x': w = d.h, h = d.d, n = d.w; break;
    case 'y': w = d.w, h = d.d, n = d.h; break;
    case 'z': w = d.w, h = d.h, n = d.d; break;
    default: throw Error(ErrorKind::invalid_argument, std::string("slice axis must be x, y or z, got ") + axis);
  }
  require(index >= 0 && index < n, ErrorKind::invalid_argument, "slice index out of range");
  std::vector<std::uint8_t> pixels(std::size_t(w) * std::size_t(h));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double value = 0.0;
      switch (axis) {
        case 'x': value = v(index, c, r); break;
        case 'y': value = v(c, index, r); break;
        default: value = v(c, r, index); break;
      }
      pixels[std::size_t(r) * std::size_t(w) + std::size_t(c)] = std::uint8_t(std::lround(255.0 * std::clamp(value, 0.0, 1.0)));
    }
  if (width) *width = w;
  if (height) *height = h;
  return pixels;
}

std::vector<fs::path> emit_slices(const Volume3D& v, char axis, const fs::path& out_dir) {
  const Dims d = v.dims();
  const int n = axis == 'x' ? d.w : axis == 'y' ? d.h : d.d;
  fs::create_directories(out_dir);
  std::vector<fs::path> paths;
  for (int i = 0; i < n; ++i) {
    int w = 0, h = 0;
    const auto pixels = slice_pixels(v, axis, i, &w, &h);
    char name[64];
    std::snprintf(name, sizeof name, "slice_%c_%03d.pgm", axis, i);
    const fs::path path = out_dir / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(bool(out), ErrorKind::io, "cannot write " + path.string());
    out << "P5\n" << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size()));
    require(bool(out), ErrorKind::io, "short write to " + path.string());
    paths.push_back(path);
  }
  return paths;
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::invalid_argument:
    case ErrorKind::dimension_mismatch: return 2;
    case ErrorKind::missing_prerequisite:
    case ErrorKind::io: return 3;
    case ErrorKind::numeric: return 4;
  }
  return 1;
}

}  // namespace xai3d
