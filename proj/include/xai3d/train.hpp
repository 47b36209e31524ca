#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "xai3d/cohort.hpp"
#include "xai3d/network.hpp"

namespace xai3d {

struct AugmentConfig {
  bool enabled = true;
  double max_rotation_deg = 15.0;  // rotation about the volume center, in the x-y plane
  int max_shift = 2;               // voxels along width and height
  bool zca = false;                // ZCA whitening fit on the training split
  double zca_epsilon = 1e-2;
};

struct TrainConfig {
  SplitFractions fractions;
  double learning_rate = 1e-4;  // rate held after the decay phase
  double decay_factor = 0.5;    // per `decay_every` epochs during the first half of the budget
  int decay_every = 10;
  int max_epochs = 100;
  int patience = 10;
  int batch_size = 16;
  AugmentConfig augment;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Exponential decay over the first half of the epoch budget that lands on the base rate,
/// then constant. Epochs are 1-based.
double learning_rate_at(const TrainConfig& cfg, int epoch);

/// Stops after `patience` consecutive epochs without validation-loss improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);

  /// Records one epoch; returns true when training should stop.
  bool update(int epoch, double loss);

  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  bool improved_last() const { return improved_last_; }

 private:
  int patience_;
  int best_epoch_ = 0;
  double best_loss_;
  int since_best_ = 0;
  bool improved_last_ = false;
};

struct AugmentParams {
  double rotation_rad = 0.0;
  int shift_x = 0;
  int shift_y = 0;
};

/// Draws rotation/shift parameters from the configured ranges.
AugmentParams draw_augment(const AugmentConfig& cfg, Rng& rng);
/// Applies a drawn augmentation; identity parameters return the input unchanged.
Volume3D augment_with(const Volume3D& x, const AugmentParams& params);
Volume3D augment(const Volume3D& x, const AugmentConfig& cfg, Rng& rng);

struct EpochRecord {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  int stopped_epoch = 0;
  bool early_stopped = false;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  double test_loss = 0.0;
};

/// Volumes with labels and a split assignment.
struct LabeledCohort {
  std::vector<Volume3D> volumes;
  std::vector<int> labels;
  std::vector<Split> splits;

  static LabeledCohort from(const Cohort& cohort);
};

struct TrainResult {
  Model model;
  TrainReport report;
};

/// Adam on mean sparse categorical cross-entropy; keeps the best-validation-loss weights.
/// Deterministic for a fixed seed.
TrainResult train(const LabeledCohort& data, const NetworkSpec& spec, const TrainConfig& cfg);

/// Mean cross-entropy and accuracy over the given subset.
std::pair<double, double> evaluate(const Model& model, const LabeledCohort& data, const std::vector<std::size_t>& idx);

/// CSV with columns epoch,train_loss,val_loss,val_acc.
std::string report_csv(const TrainReport& report);

}  // namespace xai3d
