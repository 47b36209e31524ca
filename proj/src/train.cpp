#include "xai3d/train.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace xai3d {

using Eigen::MatrixXd;

void TrainConfig::validate() const {
  const double total = fractions.train + fractions.validation + fractions.test;
  require(std::abs(total - 1.0) <= 1e-9, ErrorKind::config, "train: split fractions must sum to 1");
  require(patience >= 1, ErrorKind::config, "train: patience must be at least 1");
  require(max_epochs >= 1, ErrorKind::config, "train: max_epochs must be at least 1");
  require(batch_size >= 1, ErrorKind::config, "train: batch_size must be at least 1");
  require(learning_rate > 0.0, ErrorKind::config, "train: learning rate must be positive");
  require(decay_factor > 0.0 && decay_factor <= 1.0, ErrorKind::config, "train: decay_factor in (0, 1]");
  require(decay_every >= 1, ErrorKind::config, "train: decay_every must be at least 1");
  require(augment.max_rotation_deg >= 0.0 && augment.max_shift >= 0, ErrorKind::config,
          "train: augmentation ranges must be nonnegative");
}

double learning_rate_at(const TrainConfig& cfg, int epoch) {
  const int half = cfg.max_epochs / 2;
  if (epoch >= half) return cfg.learning_rate;
  return cfg.learning_rate * std::pow(cfg.decay_factor, -double(half - epoch) / cfg.decay_every);
}

EarlyStopping::EarlyStopping(int patience)
    : patience_(patience), best_loss_(std::numeric_limits<double>::infinity()) {
  require(patience >= 1, ErrorKind::invalid_argument, "early stopping: patience must be at least 1");
}

bool EarlyStopping::update(int epoch, double loss) {
  improved_last_ = loss < best_loss_;
  if (improved_last_) {
    best_loss_ = loss;
    best_epoch_ = epoch;
    since_best_ = 0;
    return false;
  }
  return ++since_best_ >= patience_;
}

AugmentParams draw_augment(const AugmentConfig& cfg, Rng& rng) {
  AugmentParams p;
  if (!cfg.enabled) return p;
  const double max_rad = cfg.max_rotation_deg * std::numbers::pi / 180.0;
  p.rotation_rad = uniform(rng, -max_rad, max_rad);
  p.shift_x = uniform_int(rng, -cfg.max_shift, cfg.max_shift);
  p.shift_y = uniform_int(rng, -cfg.max_shift, cfg.max_shift);
  return p;
}

Volume3D augment_with(const Volume3D& x, const AugmentParams& params) {
  if (params.rotation_rad == 0.0 && params.shift_x == 0 && params.shift_y == 0) return x;
  const Dims d = x.dims();
  const Eigen::Vector3d center(0.5 * (d.w - 1), 0.5 * (d.h - 1), 0.5 * (d.d - 1));
  const auto rotation = AffineTransform3D::rotation_about(center, 2, params.rotation_rad);
  const auto shift = AffineTransform3D::translate(Eigen::Vector3d(params.shift_x, params.shift_y, 0.0));
  return apply_affine(x, shift.after(rotation));
}

Volume3D augment(const Volume3D& x, const AugmentConfig& cfg, Rng& rng) {
  return augment_with(x, draw_augment(cfg, rng));
}

LabeledCohort LabeledCohort::from(const Cohort& cohort) {
  LabeledCohort data;
  data.volumes = cohort.volumes;
  data.labels = cohort.labels;
  for (const auto& e : cohort.manifest.entries) data.splits.push_back(e.split);
  return data;
}

namespace {

std::vector<std::size_t> members(const LabeledCohort& data, Split split) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.splits.size(); ++i) {
    if (data.splits[i] == split) out.push_back(i);
  }
  return out;
}

void require_both_classes(const LabeledCohort& data, const std::vector<std::size_t>& idx, Split split) {
  int counts[2] = {0, 0};
  for (std::size_t i : idx) counts[data.labels[i] == 1 ? 1 : 0]++;
  require(counts[0] >= 2 && counts[1] >= 2, ErrorKind::invalid_argument,
          std::string("train: degenerate split, ") + to_string(split) + " needs at least 2 subjects per class (have " +
              std::to_string(counts[0]) + "/" + std::to_string(counts[1]) + ")");
}

struct AdamState {
  std::vector<MatrixXd> m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(const Model& model) {
    for (const MatrixXd* p : model.parameters()) {
      m.push_back(MatrixXd::Zero(p->rows(), p->cols()));
      v.push_back(MatrixXd::Zero(p->rows(), p->cols()));
    }
  }

  void apply(Model& model, const Model& grads, double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(beta1, double(step));
    const double c2 = 1.0 - std::pow(beta2, double(step));
    auto params = model.parameters();
    auto g = grads.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * *g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i]->cwiseAbs2();
      *params[i] -= (lr * (m[i] / c1).array() / ((v[i] / c2).array().sqrt() + eps)).matrix();
    }
  }
};

double cross_entropy(const Eigen::Vector2d& scores, int label) {
  const double m = scores.maxCoeff();
  const double lse = m + std::log((scores.array() - m).exp().sum());
  return lse - scores[label];
}

}  // namespace

std::pair<double, double> evaluate(const Model& model, const LabeledCohort& data, const std::vector<std::size_t>& idx) {
  if (idx.empty()) return {0.0, 0.0};
  double loss = 0.0;
  int correct = 0;
  for (std::size_t i : idx) {
    const Eigen::Vector2d s = class_scores(model, data.volumes[i]);
    loss += cross_entropy(s, data.labels[i]);
    const int predicted = s[1] > s[0] ? 1 : 0;
    correct += predicted == data.labels[i];
  }
  return {loss / double(idx.size()), double(correct) / double(idx.size())};
}

TrainResult train(const LabeledCohort& data, const NetworkSpec& spec, const TrainConfig& cfg) {
  cfg.validate();
  spec.validate();
  require(data.volumes.size() == data.labels.size() && data.labels.size() == data.splits.size(),
          ErrorKind::invalid_argument, "train: volumes, labels and splits differ in length");
  const auto train_idx = members(data, Split::train);
  const auto val_idx = members(data, Split::validation);
  const auto test_idx = members(data, Split::test);
  require_both_classes(data, train_idx, Split::train);
  require_both_classes(data, val_idx, Split::validation);
  require_both_classes(data, test_idx, Split::test);

  Model model = Model::initialized(spec, derive_seed(cfg.seed, "model"));
  if (cfg.augment.zca) {
    std::vector<Volume3D> train_volumes;
    for (std::size_t i : train_idx) train_volumes.push_back(data.volumes[i]);
    model.whitener = ZcaWhitener::fit(train_volumes, cfg.augment.zca_epsilon);
  }

  Rng order_rng(derive_seed(cfg.seed, "order"));
  Rng augment_rng(derive_seed(cfg.seed, "augment"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  AdamState adam(model);
  Model grads = model.zeros_like();
  EarlyStopping stopper(cfg.patience);
  Model best = model;

  TrainResult result;
  std::vector<std::size_t> order = train_idx;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = learning_rate_at(cfg, epoch);
    shuffle(order.begin(), order.end(), order_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + std::size_t(cfg.batch_size));
      std::vector<Volume3D> batch_volumes;
      batch_volumes.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) {
        batch_volumes.push_back(augment(data.volumes[order[k]], cfg.augment, augment_rng));
      }
      std::vector<const Volume3D*> inputs;
      for (const auto& v : batch_volumes) inputs.push_back(&v);

      ForwardCache cache;
      const MatrixXd scores = forward_batch(model, inputs, PassOptions{true, &dropout_rng}, &cache);
      const auto n = Eigen::Index(inputs.size());
      MatrixXd upstream(kClassCount, n);
      for (Eigen::Index b = 0; b < n; ++b) {
        const int label = data.labels[order[start + std::size_t(b)]];
        epoch_loss += cross_entropy(scores.col(b), label);
        Eigen::Vector2d p = softmax(scores.col(b));
        p[label] -= 1.0;
        upstream.col(b) = p / double(n);
      }
      grads.set_zero();
      backward_batch(model, cache, upstream, &grads, nullptr);
      update_running_stats(model, cache);
      adam.apply(model, grads, lr);
    }
    EpochRecord record;
    record.epoch = epoch;
    record.learning_rate = lr;
    record.train_loss = epoch_loss / double(order.size());
    std::tie(record.val_loss, record.val_accuracy) = evaluate(model, data, val_idx);
    result.report.epochs.push_back(record);
    const bool stop = stopper.update(epoch, record.val_loss);
    if (stopper.improved_last()) best = model;
    result.report.stopped_epoch = epoch;
    if (stop) {
      result.report.early_stopped = true;
      break;
    }
  }

  result.model = std::move(best);
  result.report.best_epoch = stopper.best_epoch();
  result.report.train_accuracy = evaluate(result.model, data, train_idx).second;
  result.report.val_accuracy = evaluate(result.model, data, val_idx).second;
  std::tie(result.report.test_loss, result.report.test_accuracy) = evaluate(result.model, data, test_idx);
  return result;
}

std::string report_csv(const TrainReport& report) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,val_acc\n";
  out.setf(std::ios::fixed);
  out.precision(6);
  for (const auto& e : report.epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_accuracy << '\n';
  }
  return out.str();
}

}  // namespace xai3d
