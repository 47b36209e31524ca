#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "xai3d/pipeline.hpp"

using namespace xai3d;
namespace fs = std::filesystem;

namespace {

json small_config(const fs::path& out) {
  json j = json::parse(R"({
    "seed": 3,
    "cohort": {"n_subjects": 40, "dims": [8, 8, 8]},
    "network": {"levels": 2},
    "train": {"max_epochs": 3},
    "explain": {"shap_permutations": 1, "max_subjects_per_class": 8},
    "aggregate": {"k": 3, "weights": [0.85, 0.7, 0.5]},
    "atlas": {"regions": 3, "slice_axes": "xz"}
  })");
  j["out_dir"] = out.string();
  return j;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "xai3d-tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(XAI3D_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::io;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("configuration defaults, round trip and validation") {
    const RunConfig d = RunConfig::from_json(json::object());
    CHECK_FALSE(d.seed.has_value());
    CHECK(d.fusion_code == 851);
    CHECK(d.pca_k == 6);
    CHECK(d.draws == 70);
    CHECK(d.cohort.n_subjects == 200);
    CHECK(kind_of([&] { d.stage_seed("train"); }) == ErrorKind::config);

    const RunConfig c = RunConfig::from_json(small_config("out"));
    CHECK(*c.seed == 3);
    CHECK(c.cohort.dims == Dims{8, 8, 8});
    CHECK(c.slice_axes == std::vector<char>{'x', 'z'});
    const RunConfig again = RunConfig::from_json(c.to_json());
    CHECK(again.to_json() == c.to_json());
    CHECK(config_hash(again) == config_hash(c));
    CHECK(config_hash(c).size() == 16);
    CHECK(c.stage_seed("train") != c.stage_seed("explain"));

    CHECK(kind_of([] { RunConfig::from_json({{"sed", 1}}); }) == ErrorKind::config);
    CHECK(kind_of([] { RunConfig::from_json({{"train", {{"epochs", 3}}}}); }) == ErrorKind::config);
    CHECK(kind_of([] { RunConfig::from_json({{"aggregate", {{"fusion_code", 855}}}}); }) == ErrorKind::config);
    CHECK(kind_of([] { RunConfig::from_json({{"aggregate", {{"k", 2}}}}); }) == ErrorKind::config);
    CHECK(kind_of([] { RunConfig::from_json({{"explain", {{"methods", {"lime"}}}}}); }) == ErrorKind::config);
    CHECK(kind_of([] { RunConfig::from_json({{"metrics", {{"draws", "many"}}}}); }) == ErrorKind::config);
  }

  TEST_CASE("environment overrides descend into sections") {
    const json doc = apply_env_overrides(json{{"seed", 1}, {"train", {{"patience", 4}}}},
                                         {{"XAI3D_SEED", "9"},
                                          {"XAI3D_TRAIN__MAX_EPOCHS", "7"},
                                          {"XAI3D_OUT_DIR", "elsewhere"},
                                          {"OTHER", "x"}});
    CHECK(doc["seed"] == 9);
    CHECK(doc["train"]["max_epochs"] == 7);
    CHECK(doc["train"]["patience"] == 4);
    CHECK(doc["out_dir"] == "elsewhere");
    CHECK_FALSE(doc.contains("other"));
    CHECK(kind_of([] { apply_env_overrides(json{{"seed", 1}}, {{"XAI3D_SEED__X", "1"}}); }) == ErrorKind::config);
  }

  TEST_CASE("exit codes by error category") {
    CHECK(exit_code_for(ErrorKind::config) == 2);
    CHECK(exit_code_for(ErrorKind::invalid_argument) == 2);
    CHECK(exit_code_for(ErrorKind::missing_prerequisite) == 3);
    CHECK(exit_code_for(ErrorKind::io) == 3);
    CHECK(exit_code_for(ErrorKind::numeric) == 4);
  }

  TEST_CASE("slice pixels match a direct lookup") {
    Volume3D v(Dims{3, 4, 5});
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = double(i) / double(v.size() - 1);
    v[0] = -1.0;
    v[1] = 2.0;
    for (char axis : {'x', 'y', 'z'}) {
      int w = 0, h = 0;
      const auto px = slice_pixels(v, axis, 1, &w, &h);
      REQUIRE(px.size() == std::size_t(w * h));
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          const double value = axis == 'x' ? v(1, c, r) : axis == 'y' ? v(c, 1, r) : v(c, r, 1);
          const double clamped = std::clamp(value, 0.0, 1.0);
          CHECK(int(px[std::size_t(r * w + c)]) == int(std::lround(255 * clamped)));
        }
    }
    int w = 0, h = 0;
    CHECK(slice_pixels(v, 'z', 0, &w, &h)[1] == 255);
    CHECK(slice_pixels(v, 'z', 0, &w, &h)[0] == 0);
    CHECK_THROWS_AS(slice_pixels(v, 'q', 0, &w, &h), Error);
    CHECK_THROWS_AS(slice_pixels(v, 'z', 5, &w, &h), Error);

    const fs::path dir = scratch("slices");
    const auto files = emit_slices(v, 'y', dir);
    REQUIRE(files.size() == 4);
    const std::string pgm = slurp(files[2]);
    const std::string header = "P5\n3 5\n255\n";
    REQUIRE(pgm.size() == header.size() + 15);
    CHECK(pgm.substr(0, header.size()) == header);
    const auto px = slice_pixels(v, 'y', 2, &w, &h);
    CHECK(std::equal(px.begin(), px.end(), reinterpret_cast<const std::uint8_t*>(pgm.data() + header.size())));
  }

  TEST_CASE("stages refuse to run before their prerequisites") {
    const fs::path out = scratch("prereq");
    const RunConfig cfg = RunConfig::from_json(small_config(out));
    CHECK(kind_of([&] { cmd_train(cfg); }) == ErrorKind::missing_prerequisite);
    CHECK(kind_of([&] { cmd_explain(cfg); }) == ErrorKind::missing_prerequisite);
    CHECK(kind_of([&] { cmd_aggregate(cfg); }) == ErrorKind::missing_prerequisite);
    CHECK(kind_of([&] { cmd_evaluate(cfg); }) == ErrorKind::missing_prerequisite);
    CHECK(kind_of([&] { cmd_atlas_report(cfg); }) == ErrorKind::missing_prerequisite);
  }

  TEST_CASE("a small end-to-end run writes every artifact and repeats byte for byte") {
    const fs::path a = scratch("run-a"), b = scratch("run-b");
    cmd_run(RunConfig::from_json(small_config(a)));
    cmd_run(RunConfig::from_json(small_config(b)));
    for (const char* f : {"scores.csv", "ablation.csv", "model/training.csv", "atlas/L_skeleton/class1/histogram.csv",
                          "atlas/L_skeleton/class0/histogram.csv"}) {
      REQUIRE(fs::exists(a / f));
      CHECK(slurp(a / f) == slurp(b / f));
    }
    for (const char* stage : {"generate", "train", "explain", "aggregate", "evaluate", "ablate", "atlas_report"}) {
      const json m = read_json_file(a / "manifests" / (std::string(stage) + ".json"));
      CHECK(m.at("seed") == 3);
      CHECK(m.at("config_hash").get<std::string>().size() == 16);
      CHECK(m.at("versions").contains("eigen"));
    }
    CHECK(fs::exists(a / "global/L_skeleton/class1/framework.xv3d"));
    CHECK(fs::exists(a / "slices/L_skeleton/class1/x/slice_x_000.pgm"));
    CHECK(fs::exists(a / "slices/L_skeleton/class1/z/slice_z_007.pgm"));

    std::istringstream scores(slurp(a / "scores.csv"));
    std::string line;
    std::getline(scores, line);
    CHECK(line == "method,hemisphere,modality,class,faithfulness,complexity");
    int rows = 0;
    while (std::getline(scores, line)) ++rows;
    CHECK(rows == 6);
    std::istringstream ablation(slurp(a / "ablation.csv"));
    rows = -1;
    while (std::getline(ablation, line)) ++rows;
    CHECK(rows == 12);

    const fs::path c = scratch("run-pooled");
    json pooled = small_config(c);
    pooled["aggregate"]["pooled"] = true;
    cmd_run(RunConfig::from_json(pooled));
    CHECK(fs::exists(c / "global/L_skeleton/pooled/framework.xv3d"));
    CHECK(slurp(c / "scores.csv").find(",all,") != std::string::npos);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("exit codes and flag precedence") {
    const fs::path dir = scratch("cli");
    const fs::path config = dir / "config.json";
    json doc = small_config(dir / "from-config");
    doc.erase("seed");
    write_text_file(config, doc.dump());

    CHECK(run_cli("--version") == 0);
    CHECK(run_cli("") == 2);
    CHECK(run_cli("--config " + config.string() + " generate") == 2);  // no seed anywhere
    CHECK(run_cli("--config " + (dir / "missing.json").string() + " --seed 1 generate") == 2);
    write_text_file(dir / "bad.json", R"({"seed": 1, "bogus": true})");
    CHECK(run_cli("--config " + (dir / "bad.json").string() + " generate") == 2);
    CHECK(run_cli("--config " + config.string() + " --seed 1 evaluate") == 3);

    fs::remove_all(dir / "from-config");
    // env supplies the seed, the flag moves the output directory
    const fs::path flagged = dir / "from-flag";
    CHECK(run_cli("--config " + config.string() + " --out " + flagged.string() + " generate", "XAI3D_SEED=5") == 0);
    CHECK(fs::exists(flagged / "cohort" / "manifest.json"));
    CHECK_FALSE(fs::exists(dir / "from-config"));
    CHECK(read_json_file(flagged / "manifests" / "generate.json").at("seed") == 5);
    CHECK(run_cli("--config " + config.string() + " --out " + flagged.string() + " --seed 6 generate",
                  "XAI3D_SEED=5") == 0);
    CHECK(read_json_file(flagged / "manifests" / "generate.json").at("seed") == 6);
  }
}
