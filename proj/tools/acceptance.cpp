// Acceptance suite: one PASS/FAIL line per criterion.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "xai3d/parallel.hpp"
#include "xai3d/pipeline.hpp"
#include "xai3d/random.hpp"

using namespace xai3d;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void report(int id, const char* name, const Outcome& o) {
  std::printf("criterion %2d %-34s %s  %s\n", id, name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
  std::fflush(stdout);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(bool(in), ErrorKind::io, "cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// rows of a CSV with a header, keyed by column name
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  while (std::getline(in, line)) {
    if (header.empty()) {
      header = split(line);
      continue;
    }
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(row);
  }
  return rows;
}

// ------------------------------------------------------------------------------------------
// 1. Shapley axioms

Outcome shapley_axioms() {
  const auto t0 = Clock::now();
  const Dims dims{8, 1, 1};
  const SupervoxelPartition partition = make_partition(dims, 1);
  const Volume3D zero(dims);
  double worst_eff = 0, worst_sym = 0, worst_dummy = 0, worst_sampled = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(derive_seed(1234, std::uint64_t(trial)));
    // voxels 0 and 1 are interchangeable, voxel 7 is ignored
    Eigen::VectorXd a(8), d(8);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(8, 8);
    for (int i = 0; i < 8; ++i) a[i] = normal01(rng), d[i] = normal01(rng);
    for (int i = 0; i < 8; ++i)
      for (int j = i + 1; j < 8; ++j) b(i, j) = normal01(rng);
    a[1] = a[0], d[1] = d[0];
    for (int j = 2; j < 8; ++j) b(1, j) = b(0, j);
    a[7] = d[7] = 0;
    b.col(7).setZero();
    const double c = normal01(rng);
    const Scorer f = [=](const Volume3D& v) {
      const Eigen::VectorXd x = v.voxels().matrix();
      return a.dot(x) + x.dot(b * x) + c * std::sin(d.dot(x));
    };
    Volume3D x(dims);
    for (Eigen::Index i = 0; i < 8; ++i) x[i] = uniform(rng, 0.2, 1.5);
    x[1] = x[0];

    const auto phi = shapley_exact_values(f, x, partition, zero);
    std::vector<double> by_voxel(8);
    for (int s = 0; s < 8; ++s) by_voxel[std::size_t(partition.members(s).front())] = phi[std::size_t(s)];
    const double sum = std::accumulate(phi.begin(), phi.end(), 0.0);
    worst_eff = std::max(worst_eff, std::abs(sum - (f(x) - f(zero))));
    worst_sym = std::max(worst_sym, std::abs(by_voxel[0] - by_voxel[1]));
    worst_dummy = std::max(worst_dummy, std::abs(by_voxel[7]));

    const auto sampled = shapley_sampled_values(f, x, partition, zero, 20000, derive_seed(99, std::uint64_t(trial)));
    const auto [lo, hi] = std::minmax_element(phi.begin(), phi.end());
    const double range = *hi - *lo;
    for (std::size_t s = 0; s < phi.size(); ++s)
      worst_sampled = std::max(worst_sampled, std::abs(sampled[s] - phi[s]) / range);
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = worst_eff < 1e-9 && worst_sym < 1e-9 && worst_dummy < 1e-9 && worst_sampled < 0.02 && t < 120;
  o.detail = fmt("efficiency %.1e symmetry %.1e dummy %.1e sampled/range %.4f time %.1fs", worst_eff, worst_sym,
                 worst_dummy, worst_sampled, t);
  return o;
}

// ------------------------------------------------------------------------------------------
// 2. GradCAM gradient integrity

Outcome gradcam_gradients() {
  double worst = 0;
  int checked = 0;
  for (int m = 0; m < 5; ++m) {
    const Dims dims{8, 8, 8};
    const NetworkSpec spec =
        m % 2 == 0 ? NetworkSpec::simple_cnn(dims, 0.125, 2) : NetworkSpec::simple_mhl(dims, 0.125, 2, 4);
    const Model model = Model::initialized(spec, derive_seed(77, std::uint64_t(m)));
    Rng rng(derive_seed(78, std::uint64_t(m)));
    Volume3D x(dims);
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = uniform(rng, 0, 1);
    const int cls = m % 2;
    const Eigen::MatrixXd A = forward(model, x).last_activation;
    const Eigen::MatrixXd G = grad_wrt_activation(model, x, cls);
    // Central differences are only meaningful where the scorer is differentiable: skip
    // activations clipped to 0 by ReLU and those tied with a neighbour in their pooling window.
    const std::size_t last = spec.levels.size() - 1;
    const Dims ad = spec.level_input_dims(last);
    const int pool = spec.levels[last].pool;
    const auto smooth = [&](Eigen::Index r, Eigen::Index c) {
      if (A(r, c) < 1e-3) return false;
      const int vx = int(c % ad.w), vy = int((c / ad.w) % ad.h), vz = int(c / (Eigen::Index(ad.w) * ad.h));
      const int bx = vx / pool * pool, by = vy / pool * pool, bz = vz / pool * pool;
      for (int z = bz; z < bz + pool; ++z)
        for (int y = by; y < by + pool; ++y)
          for (int xx = bx; xx < bx + pool; ++xx) {
            const Eigen::Index o = linear_index(ad, xx, y, z);
            if (o != c && std::abs(A(r, o) - A(r, c)) < 1e-3) return false;
          }
      return true;
    };
    std::vector<std::pair<Eigen::Index, Eigen::Index>> live;
    for (Eigen::Index c = 0; c < G.cols(); ++c)
      for (Eigen::Index r = 0; r < G.rows(); ++r)
        if (G(r, c) != 0.0 && smooth(r, c)) live.emplace_back(r, c);
    require(live.size() >= 10, ErrorKind::numeric, "toy model has fewer than 10 live activations");
    shuffle(live.begin(), live.end(), rng);
    for (int k = 0; k < 10; ++k) {
      const auto [r, c] = live[std::size_t(k)];
      const double h = 1e-5 * std::max(1.0, std::abs(A(r, c)));
      Eigen::MatrixXd plus = A, minus = A;
      plus(r, c) += h;
      minus(r, c) -= h;
      const double fd =
          (scores_from_last_activation(model, plus)[cls] - scores_from_last_activation(model, minus)[cls]) / (2 * h);
      worst = std::max(worst, std::abs(fd - G(r, c)) / std::max(std::abs(fd), std::abs(G(r, c))));
      ++checked;
    }
  }
  return {worst < 1e-4, fmt("max relative error %.2e over %d activations in 5 models", worst, checked)};
}

// ------------------------------------------------------------------------------------------
// 3. Metric correctness

Outcome metric_correctness() {
  const Dims dims{8, 8, 8};
  double worst_r = 0, worst_uniform = 0, worst_onehot = 0;
  const PerturbationPolicy policy = PerturbationPolicy::standard(dims, 4, 5);
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(derive_seed(555, std::uint64_t(trial)));
    Volume3D w(dims), x(dims);
    for (Eigen::Index i = 0; i < x.size(); ++i) w[i] = normal01(rng), x[i] = uniform(rng, 0, 1);
    const Scorer f = [w](const Volume3D& v) { return (w.voxels() * v.voxels()).sum(); };
    Volume3D marginal(dims);
    marginal.voxels() = w.voxels() * x.voxels();
    worst_r = std::max(worst_r, std::abs(faithfulness(f, marginal, x, policy) - 1.0));
  }
  const auto& partition = policy.partition;
  const double d = partition.segments();
  worst_uniform = std::abs(complexity(Volume3D(dims, 1.0), partition) - std::log(d));
  Volume3D onehot(dims);
  for (auto v : partition.members(3)) onehot[v] = 1.0;
  worst_onehot = std::abs(complexity(onehot, partition));
  Outcome o;
  o.pass = worst_r < 1e-9 && worst_uniform < 1e-9 && worst_onehot < 1e-9;
  o.detail = fmt("|r-1| %.1e  |C-ln d| %.1e  |C onehot| %.1e", worst_r, worst_uniform, worst_onehot);
  return o;
}

// ------------------------------------------------------------------------------------------
// 4. PCA validity

Outcome pca_validity(double explained_default) {
  const Dims dims{4, 4, 4};
  double worst_residual = 0, worst_reconstruction = 0;
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(derive_seed(444, std::uint64_t(trial)));
    std::vector<Volume3D> samples;
    Eigen::MatrixXd X(20, 64);
    for (int n = 0; n < 20; ++n) {
      Volume3D v(dims);
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal01(rng) * (1.0 + double(i % 5));
      X.row(n) = v.voxels().matrix().transpose();
      samples.push_back(std::move(v));
    }
    const Eigen::MatrixXd centered = X.rowwise() - X.colwise().mean();
    const Eigen::MatrixXd C = centered.transpose() * centered / 19.0;
    const PCAModel model = fit_pca(samples, 19);
    for (int k = 0; k < model.k(); ++k) {
      const Eigen::VectorXd v = model.components.col(k);
      worst_residual = std::max(worst_residual, (C * v - model.variances[k] * v).norm());
    }
    for (const auto& s : samples) {
      const Volume3D r = model.reconstruct(model.project(s));
      worst_reconstruction = std::max(worst_reconstruction, (r.voxels() - s.voxels()).abs().maxCoeff());
    }
  }
  Outcome o;
  o.pass = worst_residual < 1e-8 && worst_reconstruction < 1e-8 && explained_default >= 0.80;
  o.detail = fmt("residual %.1e reconstruction %.1e explained(6, default cohort) %.4f", worst_residual,
                 worst_reconstruction, explained_default);
  return o;
}

// ------------------------------------------------------------------------------------------
// 9. Atlas thresholds, against a brute-force oracle

Outcome atlas_thresholds() {
  int mismatches = 0, monotone_violations = 0, count_errors = 0, cases = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(derive_seed(909, std::uint64_t(trial)));
    const Dims dims{uniform_int(rng, 5, 13), uniform_int(rng, 5, 13), uniform_int(rng, 3, 9)};
    const ProbabilisticAtlas atlas = make_synthetic_atlas(dims, uniform_int(rng, 1, 7), derive_seed(910, std::uint64_t(trial)));
    Volume3D map(dims);
    // coarse values force ties
    for (Eigen::Index i = 0; i < map.size(); ++i) map[i] = double(uniform_int(rng, 0, 20)) / 20.0;
    const Eigen::Index V = map.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(V));
    std::iota(order.begin(), order.end(), Eigen::Index(0));
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return map[a] > map[b]; });
    std::map<std::string, Eigen::Index> previous;
    for (int percent : {5, 10, 20}) {
      ++cases;
      const Eigen::Index expected = (percent * V + 99) / 100;
      const RegionHistogram h = threshold_histogram(map, atlas, percent / 100.0);
      if (h.selected != expected) ++count_errors;
      std::map<std::string, Eigen::Index> oracle;
      for (Eigen::Index k = 0; k < expected; ++k) {
        const Eigen::Index v = order[std::size_t(k)];
        int best = -1;
        double best_p = 0;
        for (int r = 0; r < atlas.regions(); ++r)
          if (atlas.probability(r)[v] > best_p) best = r, best_p = atlas.probability(r)[v];
        ++oracle[best < 0 ? std::string(kUndefinedRegion) : atlas.name(best)];
      }
      Eigen::Index total = 0;
      for (const auto& [name, n] : h.counts) {
        total += n;
        if (n != oracle[name]) ++mismatches;
        if (n < previous[name]) ++monotone_violations;
        previous[name] = n;
      }
      if (total != expected) ++count_errors;
    }
  }
  Outcome o;
  o.pass = mismatches == 0 && monotone_violations == 0 && count_errors == 0;
  o.detail = fmt("%d threshold cases: size errors %d, oracle mismatches %d, monotonicity violations %d", cases,
                 count_errors, mismatches, monotone_violations);
  return o;
}

// ------------------------------------------------------------------------------------------
// Pipeline-backed criteria

struct SeedRun {
  std::uint64_t seed = 0;
  fs::path out;
  double seconds = 0;
  std::map<std::string, double> scores;    // method -> faithfulness (class 1 group)
  std::map<std::string, double> ablation;  // code -> faithfulness (class 1 group)
  double test_accuracy = 0;
  double explained_shape = 0;
  double gradcam_ratio = 0;
};

RunConfig acceptance_config(std::uint64_t seed, const fs::path& out) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.out_dir = out;
  cfg.classes = {1};
  return cfg;
}

const GroupKey kPositive{"L", "skeleton", 1};

double gradcam_localization(const fs::path& out) {
  const Cohort cohort = load_cohort(out / "cohort" / "manifest.json");
  double inside = 0, outside = 0;
  int n = 0;
  for (std::size_t i = 0; i < cohort.volumes.size(); ++i) {
    const fs::path p = out / "explain" / kPositive.dir() / "gradcam" / (cohort.subject_ids[i] + ".xv3d");
    if (cohort.labels[i] != 1 || !fs::exists(p)) continue;
    const Volume3D g = read_volume(p).volume;
    const auto& mask = cohort.masks[i].voxels();
    inside += (g.voxels() * mask).sum() / mask.sum();
    outside += (g.voxels() * (1 - mask)).sum() / (1 - mask).sum();
    ++n;
  }
  return n == 0 || outside <= 0 ? 0.0 : inside / outside;
}

SeedRun run_seed(std::uint64_t seed, const fs::path& out) {
  SeedRun r;
  r.seed = seed;
  r.out = out;
  fs::remove_all(out);
  const auto t0 = Clock::now();
  cmd_run(acceptance_config(seed, out));
  r.seconds = seconds_since(t0);
  for (const auto& row : read_csv(out / "scores.csv"))
    if (row.at("class") == "1") r.scores[row.at("method")] = std::stod(row.at("faithfulness"));
  for (const auto& row : read_csv(out / "ablation.csv"))
    if (row.at("class") == "1") r.ablation[row.at("code")] = std::stod(row.at("faithfulness"));
  r.test_accuracy = read_json_file(out / "model" / "train_report.json").at("test_accuracy").get<double>();
  r.explained_shape =
      read_json_file(out / "global" / kPositive.dir() / "pca.json").at("explained_variance").at("total-Shape").get<double>();
  r.gradcam_ratio = gradcam_localization(out);
  return r;
}

Outcome framework_ordering(const std::vector<SeedRun>& runs, double seconds) {
  int wins = 0;
  std::string detail;
  for (const auto& r : runs) {
    const double fw = r.scores.at("3D-Framework-851");
    const double shap = r.scores.at("total-SHAP");
    const double gc = r.scores.at("total-GradCam");
    const bool win = fw > shap && fw > gc;
    wins += win;
    detail += fmt("[s%llu %.3f/%.3f/%.3f%s] ", static_cast<unsigned long long>(r.seed), fw, shap, gc, win ? "" : " x");
  }
  return {wins >= 4 && seconds < 900, fmt("%d/5 seeds, %.0fs; framework/SHAP/GradCam ", wins, seconds) + detail};
}

Outcome ablation_pattern(const std::vector<SeedRun>& runs) {
  int hits = 0;
  std::string detail;
  for (const auto& r : runs) {
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& [code, v] : r.ablation) ranked.emplace_back(v, code);
    std::sort(ranked.rbegin(), ranked.rend());
    const bool hit = ranked.size() >= 2 && ((ranked[0].second == "851" && ranked[1].second == "815") ||
                                            (ranked[0].second == "815" && ranked[1].second == "851"));
    hits += hit;
    detail += fmt("[s%llu top %s,%s] ", static_cast<unsigned long long>(r.seed), ranked[0].second.c_str(),
                  ranked[1].second.c_str());
  }
  return {hits >= 4, fmt("%d/5 seeds; ", hits) + detail};
}

Outcome classifier_sanity(const SeedRun& planted, std::uint64_t seed) {
  RunConfig cfg = acceptance_config(seed, {});
  CohortParams params = cfg.cohort;
  params.seed = cfg.stage_seed("cohort");
  Cohort cohort = generate_cohort(params);
  cohort.manifest = split(cohort.manifest, cfg.train.fractions, cfg.stage_seed("split"));
  // permute labels within the split so class balance per split survives
  Rng rng(derive_seed(seed, "shuffled-labels"));
  for (Split s : {Split::train, Split::validation, Split::test}) {
    const auto idx = indices_in(cohort.manifest, s);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(cohort.labels[i]);
    shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) cohort.labels[idx[k]] = labels[k];
  }
  TrainConfig tc = cfg.train;
  tc.seed = cfg.stage_seed("train");
  NetworkSpec spec = cfg.network_spec();
  const TrainReport shuffled = train(LabeledCohort::from(cohort), spec, tc).report;

  // stopping rule: stop exactly `patience` epochs after the last improvement, or run out of budget
  auto stop_ok = [&](const TrainReport& r) {
    double best = std::numeric_limits<double>::infinity();
    int best_epoch = 0;
    for (const auto& e : r.epochs)
      if (e.val_loss < best) best = e.val_loss, best_epoch = e.epoch;
    if (best_epoch != r.best_epoch) return false;
    if (r.early_stopped) return r.stopped_epoch - r.best_epoch == tc.patience;
    return r.stopped_epoch == tc.max_epochs && r.stopped_epoch - r.best_epoch < tc.patience;
  };
  // a strictly rising loss after epoch 3 must stop at 3 + patience
  EarlyStopping es(tc.patience);
  int fired = 0;
  for (int e = 1; e <= 100 && !fired; ++e)
    if (es.update(e, e <= 3 ? 1.0 / e : 1.0 + e)) fired = e;
  const bool synthetic_ok = fired == 3 + tc.patience;
  const TrainReport planted_report = [&] {
    TrainReport r;
    const json j = read_json_file(planted.out / "model" / "train_report.json");
    r.best_epoch = j.at("best_epoch");
    r.stopped_epoch = j.at("stopped_epoch");
    r.early_stopped = j.at("early_stopped");
    for (const auto& row : read_csv(planted.out / "model" / "training.csv")) {
      EpochRecord e;
      e.epoch = std::stoi(row.at("epoch"));
      e.val_loss = std::stod(row.at("val_loss"));
      r.epochs.push_back(e);
    }
    return r;
  }();
  const bool stops_ok = synthetic_ok && stop_ok(shuffled) && stop_ok(planted_report);
  Outcome o;
  o.pass = planted.test_accuracy >= 0.90 && shuffled.test_accuracy >= 0.35 && shuffled.test_accuracy <= 0.65 && stops_ok;
  o.detail = fmt("planted acc %.3f, shuffled acc %.3f, stopping %s (shuffled stopped %d best %d%s)",
                 planted.test_accuracy, shuffled.test_accuracy, stops_ok ? "ok" : "wrong", shuffled.stopped_epoch,
                 shuffled.best_epoch, shuffled.early_stopped ? " early" : "");
  return o;
}

// Judged on the seed-1 model only; the other seeds are listed for context.
Outcome localization(const std::vector<SeedRun>& runs) {
  const SeedRun& r = runs[0];
  Outcome o;
  o.pass = r.test_accuracy >= 0.90 && r.gradcam_ratio >= 2.0;
  o.detail = fmt("seed %llu: accuracy %.3f, GradCAM inside/outside %.3f; other seeds", static_cast<unsigned long long>(r.seed),
                 r.test_accuracy, r.gradcam_ratio);
  for (std::size_t i = 1; i < runs.size(); ++i)
    o.detail += fmt(" [s%llu %.3f/%.3f]", static_cast<unsigned long long>(runs[i].seed), runs[i].test_accuracy,
                    runs[i].gradcam_ratio);
  return o;
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  int files = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".csv") continue;
    const fs::path other = b / fs::relative(entry.path(), a);
    ++files;
    if (!fs::exists(other) || slurp(entry.path()) != slurp(other)) ++differing;
  }
  for (const auto& entry : fs::recursive_directory_iterator(b))
    if (entry.is_regular_file() && entry.path().extension() == ".csv" && !fs::exists(a / fs::relative(entry.path(), b)))
      ++differing;
  return {files > 0 && differing == 0, fmt("%d CSV files compared, %d differ", files, differing)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xai3d acceptance suite"};
  std::string work = "acceptance-work";
  int threads = 1;
  app.add_option("--work", work, "scratch directory for pipeline runs");
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  set_thread_count(threads);

  int failures = 0;
  auto record = [&](int id, const char* name, auto&& fn) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    report(id, name, o);
  };

  record(1, "Shapley axioms", shapley_axioms);
  record(2, "GradCAM gradient integrity", gradcam_gradients);
  record(3, "metric correctness", metric_correctness);

  std::vector<SeedRun> runs;
  double pipeline_seconds = 0;
  std::string pipeline_error;
  try {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      runs.push_back(run_seed(seed, fs::path(work) / ("seed" + std::to_string(seed))));
      pipeline_seconds += runs.back().seconds;
    }
  } catch (const std::exception& e) {
    pipeline_error = e.what();
  }
  auto need_runs = [&](auto&& fn) {
    return [&, fn]() -> Outcome {
      if (runs.size() < 5) return {false, "pipeline failed: " + pipeline_error};
      return fn();
    };
  };

  record(4, "PCA validity", need_runs([&] { return pca_validity(runs[0].explained_shape); }));
  record(5, "framework ordering", need_runs([&] { return framework_ordering(runs, pipeline_seconds); }));
  record(6, "ablation pattern", need_runs([&] { return ablation_pattern(runs); }));
  record(7, "classifier sanity", need_runs([&] { return classifier_sanity(runs[0], 1); }));
  record(8, "attribution localization", need_runs([&] { return localization(runs); }));
  record(9, "atlas thresholds", atlas_thresholds);
  record(10, "determinism", need_runs([&] {
           const fs::path again = fs::path(work) / "seed1-repeat";
           fs::remove_all(again);
           cmd_run(acceptance_config(1, again));
           return determinism(runs[0].out, again);
         }));

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
