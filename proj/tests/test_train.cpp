#include <doctest.h>

#include "xai3d/train.hpp"

using namespace xai3d;

namespace {

struct TinySetup {
  Cohort cohort;
  NetworkSpec spec;
  TrainConfig cfg;
};

TinySetup tiny_setup() {
  TinySetup t;
  CohortParams p;
  p.n_subjects = 40;
  p.dims = Dims{8, 8, 8};
  p.seed = 4;
  t.cohort = generate_cohort(p);
  t.cohort.manifest = split(t.cohort.manifest, {}, 4);
  t.spec = NetworkSpec::simple_cnn(p.dims, 0.125, 2);
  t.cfg.max_epochs = 4;
  t.cfg.seed = 12;
  return t;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("learning rate decays over the first half and then holds") {
    TrainConfig c;
    c.max_epochs = 40;
    c.decay_every = 10;
    c.decay_factor = 0.5;
    c.learning_rate = 1e-4;
    CHECK(learning_rate_at(c, 1) > learning_rate_at(c, 2));
    CHECK(learning_rate_at(c, 10) == doctest::Approx(2e-4));
    CHECK(learning_rate_at(c, 20) == doctest::Approx(1e-4));
    CHECK(learning_rate_at(c, 40) == doctest::Approx(1e-4));
  }

  TEST_CASE("early stopping fires after patience epochs without improvement") {
    EarlyStopping es(3);
    CHECK_FALSE(es.update(1, 1.0));
    CHECK_FALSE(es.update(2, 0.5));
    CHECK_FALSE(es.update(3, 0.6));
    CHECK_FALSE(es.update(4, 0.5));  // equal is not an improvement
    CHECK(es.update(5, 0.7));
    CHECK(es.best_epoch() == 2);
    CHECK_THROWS_AS(EarlyStopping(0), Error);
  }

  TEST_CASE("disabled augmentation is the identity; enabled draws are reproducible") {
    const Volume3D x(Dims{6, 6, 6}, 0.5);
    AugmentConfig off;
    off.enabled = false;
    Rng rng(1);
    CHECK((augment(x, off, rng).voxels() == x.voxels()).all());
    AugmentConfig on;
    on.enabled = true;
    on.max_rotation_deg = 10;
    on.max_shift = 2;
    Rng a(3), b(3);
    const AugmentParams pa = draw_augment(on, a), pb = draw_augment(on, b);
    CHECK(pa.rotation_rad == pb.rotation_rad);
    CHECK(std::abs(pa.shift_x) <= 2);
    CHECK(std::abs(pa.rotation_rad) <= 10 * std::acos(-1.0) / 180 + 1e-12);
  }

  TEST_CASE("invalid configurations are rejected") {
    TrainConfig c;
    c.fractions = {0.5, 0.2, 0.2};
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.patience = 0;
    CHECK_THROWS_AS(c.validate(), Error);
  }

  TEST_CASE("a degenerate split is refused") {
    TinySetup t = tiny_setup();
    LabeledCohort data = LabeledCohort::from(t.cohort);
    for (std::size_t i = 0; i < data.labels.size(); ++i)
      if (data.splits[i] == Split::test) data.labels[i] = 0;
    CHECK_THROWS_AS(train(data, t.spec, t.cfg), Error);
  }

  TEST_CASE("training is deterministic and reports every epoch") {
    TinySetup t = tiny_setup();
    const LabeledCohort data = LabeledCohort::from(t.cohort);
    const TrainResult a = train(data, t.spec, t.cfg);
    const TrainResult b = train(data, t.spec, t.cfg);
    CHECK(a.report.epochs.size() == std::size_t(a.report.stopped_epoch));
    CHECK(report_csv(a.report) == report_csv(b.report));
    const auto pa = a.model.tensors();
    const auto pb = b.model.tensors();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
    CHECK(a.report.test_accuracy >= 0.0);
    CHECK(a.report.test_accuracy <= 1.0);
    CHECK(report_csv(a.report).rfind("epoch,train_loss,val_loss,val_acc\n", 0) == 0);
  }
}
