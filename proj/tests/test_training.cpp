#include <doctest.h>

#include <cmath>
#include <numeric>

#include "rinv/errors.hpp"
#include "rinv/losses.hpp"
#include "rinv/ops.hpp"
#include "rinv/training.hpp"

using namespace rinv;

namespace {

Dataset tiny_data(std::uint64_t seed = 11, std::size_t per_class = 24) {
  SynthSpec s;
  s.classes = 4;
  s.per_class = per_class;
  s.height = s.width = 8;
  return synth_dataset(s, RngStream(seed, "tiny"));
}

EncoderConfig tiny_encoder() {
  EncoderConfig c;
  c.height = c.width = 8;
  c.widths = {4, 6, 8};
  c.embed_dim = 8;
  return c;
}

TrainConfig tiny_teacher_config() {
  TrainConfig c = TrainConfig::teacher_defaults();
  c.epochs = 3;
  c.batch_size = 16;
  c.lr_max = 1e-2;
  c.augment_pad = 1;
  c.seed = 5;
  return c;
}

template <typename T>
std::vector<std::vector<T>> snapshot(const std::vector<Tensor<T>>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

template <typename T>
EncoderModel<T> tiny_teacher() {
  auto cfg = tiny_teacher_config();
  cfg.epochs = 8;
  return teacher_from_supervised(train_teacher<T>(tiny_data(), tiny_encoder(), cfg).model);
}

}  // namespace

TEST_CASE("train config validation and defaults") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.epochs == 25);
  CHECK(c.batch_size == 256);
  CHECK(c.lr_max == doctest::Approx(3e-4));
  CHECK(c.weight_decay == doctest::Approx(1e-4));
  CHECK(c.loss.tau == doctest::Approx(0.1));
  CHECK(TrainConfig::baseline_defaults().batch_size == 64);
  CHECK(TrainConfig::probe_defaults().weight_decay == 0.0);

  auto one = c;
  one.batch_size = 1;
  CHECK_THROWS_AS(one.validate(), ConfigError);
  one.loss.family = LossFamily::MSEOnly;
  CHECK_NOTHROW(one.validate());
  auto frac = c;
  frac.label_fraction = 0.0;
  CHECK_THROWS_AS(frac.validate(), ConfigError);
  frac.label_fraction = 1.5;
  CHECK_THROWS_AS(frac.validate(), ConfigError);
  auto tau = c;
  tau.loss.tau = -1;
  CHECK_THROWS_AS(tau.validate(), ConfigError);
  auto op = c;
  op.op = ForwardOperator::mask(Severity::fixed(0.5));
  op.op.mask_fraction = Severity::fixed(1.5);
  CHECK_THROWS_AS(op.validate(), ConfigError);

  CHECK(precision_from_string("f64") == Precision::F64);
  CHECK(to_string(Precision::F32) == "f32");
  CHECK_THROWS_AS(precision_from_string("f16"), ConfigError);
}

TEST_CASE("teacher training decreases loss and is deterministic in f64") {
  const auto data = tiny_data();
  const auto run = train_teacher<double>(data, tiny_encoder(), tiny_teacher_config());
  REQUIRE(run.record.epoch_losses.size() == 3);
  CHECK(run.record.epoch_losses[1] < run.record.epoch_losses[0]);
  CHECK(run.record.epoch_losses[2] < run.record.epoch_losses[1]);
  CHECK(run.record.pipeline == "teacher");
  CHECK(run.record.steps == 3 * 6);

  const auto again = train_teacher<double>(data, tiny_encoder(), tiny_teacher_config());
  CHECK(snapshot(run.model.encoder.parameters()) == snapshot(again.model.encoder.parameters()));
  CHECK(snapshot(run.model.head.parameters()) == snapshot(again.model.head.parameters()));

  auto other_seed = tiny_teacher_config();
  other_seed.seed = 6;
  const auto third = train_teacher<double>(data, tiny_encoder(), other_seed);
  CHECK(snapshot(run.model.encoder.parameters()) != snapshot(third.model.encoder.parameters()));

  SynthSpec one_class;
  one_class.classes = 2;
  one_class.per_class = 4;
  one_class.height = one_class.width = 8;
  auto single = synth_dataset(one_class, RngStream(1, "x"));
  single.class_count = 1;
  for (auto& y : *single.labels) y = 0;
  CHECK_THROWS_AS(train_teacher<double>(single, tiny_encoder(), tiny_teacher_config()), DataError);
}

TEST_CASE("cosine schedule recorded per step") {
  const auto run = train_teacher<float>(tiny_data(), tiny_encoder(), tiny_teacher_config());
  const auto& lrs = run.record.step_lrs;
  REQUIRE(lrs.size() == run.record.steps);
  CHECK(lrs.front() == doctest::Approx(1e-2));
  CHECK(lrs.back() < 1e-3 * 1e-2);
  for (std::size_t i = 1; i < lrs.size(); ++i) CHECK(lrs[i] <= lrs[i - 1]);
}

TEST_CASE("student from teacher under identity starts at perfect alignment") {
  const auto teacher = tiny_teacher<double>();
  const auto data = tiny_data(12);
  TrainConfig c = TrainConfig::student_defaults();
  c.epochs = 1;
  c.batch_size = data.count;
  c.loss.family = LossFamily::MSEOnly;
  c.op = ForwardOperator::identity();
  const auto run = train_student_contrastive(teacher, data, c);
  REQUIRE(run.record.epoch_losses.size() == 1);
  CHECK(run.record.epoch_losses[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(run.record.teacher_clean_batches == 1);
  CHECK(run.record.student_corrupted_batches == 1);
  CHECK_FALSE(run.student.frozen());
  CHECK(teacher.frozen());
}

TEST_CASE("student pipeline contracts") {
  auto unfrozen = tiny_teacher<double>().clone();
  unfrozen.set_frozen(false);
  TrainConfig c = TrainConfig::student_defaults();
  c.epochs = 1;
  c.batch_size = 16;
  CHECK_THROWS_AS(train_student_contrastive(unfrozen, tiny_data(), c), ContractError);

  const auto teacher = tiny_teacher<float>();
  const auto before = snapshot(teacher.parameters());
  c.epochs = 2;
  c.op = ForwardOperator::mask(Severity::fixed(0.5));
  const auto run = train_student_contrastive(teacher, tiny_data(), c);
  // 96 images, batch 16, drop_last: 6 batches per epoch.
  CHECK(run.record.steps == 12);
  CHECK(run.record.teacher_clean_batches == 12);
  CHECK(run.record.student_corrupted_batches == 12);
  CHECK(snapshot(teacher.parameters()) == before);
  CHECK(snapshot(run.student.parameters()) != before);
}

TEST_CASE("MSE-only and contrastive runs share every random draw") {
  const auto teacher = tiny_teacher<double>();
  const auto data = tiny_data(13);
  TrainConfig c = TrainConfig::student_defaults();
  c.epochs = 1;
  c.batch_size = data.count;
  c.augment_pad = 2;
  c.seed = 77;
  c.op = ForwardOperator::mask(Severity::range(0.3, 0.7));
  TrainConfig mse = c;
  mse.loss.family = LossFamily::MSEOnly;

  // Rebuild the single batch from the documented stream layout.
  const RngStream root(c.seed, "student");
  const auto order = root.child("shuffle").child(0).permutation(data.count);
  const RngStream batch_rng = root.child("batch").child(0).child(0);
  const auto raw = augment_crop_flip(gather_batch<double>(data.without_labels(), order), c.augment_pad,
                                     batch_rng.child("augment"));
  const auto clean = normalize(raw, c.norm_mean, c.norm_std);
  const auto distorted = corrupt_and_normalize(raw, c.op, batch_rng.child("corrupt"), c.norm_mean, c.norm_std);
  double expect_contr = 0, expect_mse = 0;
  {
    NoGradGuard no_grad;
    const auto target = teacher.embed(clean);
    const auto student = teacher.embed(distorted);
    expect_contr = compute_loss(student, target, c.loss).item();
    expect_mse = compute_loss(student, target, mse.loss).item();
  }

  CHECK(train_student_contrastive(teacher, data, c).record.epoch_losses[0] ==
        doctest::Approx(expect_contr).epsilon(1e-12));
  CHECK(train_student_contrastive(teacher, data, mse).record.epoch_losses[0] ==
        doctest::Approx(expect_mse).epsilon(1e-12));
}

TEST_CASE("probe keeps the encoder fixed and fits separable embeddings") {
  const auto teacher = tiny_teacher<double>();
  const auto before = snapshot(teacher.parameters());
  const auto data = tiny_data();
  TrainConfig c = TrainConfig::probe_defaults();
  c.epochs = 30;
  c.batch_size = 16;
  c.lr_max = 5e-2;
  const auto probe = train_probe(teacher, data, c);
  CHECK(snapshot(teacher.parameters()) == before);

  std::vector<std::size_t> all(data.count);
  std::iota(all.begin(), all.end(), 0);
  NoGradGuard no_grad;
  const auto emb = teacher.embed(normalize(gather_batch<double>(data, all), c.norm_mean, c.norm_std));
  const auto logits = head_logits(probe.head, emb);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.count; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 4; ++k)
      if (logits[i * 4 + k] > logits[i * 4 + best]) best = k;
    correct += static_cast<int>(best) == (*data.labels)[i];
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(data.count) >= 0.99);

  auto unfrozen = teacher.clone();
  unfrozen.set_frozen(false);
  CHECK_THROWS_AS(train_probe(unfrozen, data, c), ContractError);

  auto small = c;
  small.label_fraction = 0.1;  // 2-3 per class, 10 total < 16
  CHECK_THROWS_AS(train_probe(teacher, data, small), DataError);
  small.batch_size = 8;
  CHECK_NOTHROW(train_probe(teacher, data, small));
  CHECK_THROWS_AS(train_probe(teacher, data.without_labels(), c), DataError);
}

TEST_CASE("end-to-end baseline trains every parameter") {
  const auto data = tiny_data();
  auto tc = tiny_teacher_config();
  tc.epochs = 2;
  const auto init = train_teacher<float>(data, tiny_encoder(), tc).model;
  const auto enc_before = snapshot(init.encoder.parameters());
  TrainConfig c = TrainConfig::baseline_defaults();
  c.epochs = 3;
  c.batch_size = 16;
  c.lr_max = 1e-2;
  c.augment_pad = 1;
  c.op = ForwardOperator::mask(Severity::fixed(0.3));
  const auto run = train_baseline_e2e(init, data, c);
  CHECK(run.record.epoch_losses[1] < run.record.epoch_losses[0]);
  CHECK(run.record.epoch_losses[2] < run.record.epoch_losses[1]);
  CHECK(snapshot(init.encoder.parameters()) == enc_before);
  CHECK(snapshot(run.model.encoder.parameters()) != enc_before);
  CHECK(snapshot(run.model.head.parameters()) != snapshot(init.head.parameters()));

  auto wrong = data;
  wrong.class_count = 5;
  CHECK_THROWS_AS(train_baseline_e2e(init, wrong, c), DimensionError);
}
