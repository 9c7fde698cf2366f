#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rinv/corruptions.hpp"
#include "rinv/dataset.hpp"
#include "rinv/encoders.hpp"
#include "rinv/losses.hpp"
#include "rinv/rng.hpp"

namespace rinv {

enum class Precision { F32, F64 };

std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 25;
  std::size_t batch_size = 256;
  double lr_max = 3e-4;
  double weight_decay = 1e-4;
  // The temperature lives in loss.tau.
  LossSpec loss;
  ForwardOperator op = ForwardOperator::identity();
  std::uint64_t seed = 0;
  double label_fraction = 1.0;
  Precision precision = Precision::F32;
  // Random-crop padding in pixels; 0 disables crop and flip.
  std::size_t augment_pad = 4;
  std::vector<double> norm_mean{0.5};
  std::vector<double> norm_std{0.5};

  // Throws ConfigError on out-of-domain values.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;

  static TrainConfig teacher_defaults();
  static TrainConfig student_defaults();
  static TrainConfig probe_defaults();
  static TrainConfig baseline_defaults();
};

struct RunRecord {
  std::string pipeline;
  TrainConfig config;
  std::vector<double> epoch_losses;
  std::vector<double> step_lrs;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
  std::uint64_t seed = 0;
  std::string stream_label;
  std::size_t steps = 0;
  // Batches seen by each side, by corruption flag.
  std::size_t teacher_clean_batches = 0;
  std::size_t student_corrupted_batches = 0;
};

template <typename T>
struct TeacherRun {
  SupervisedModel<T> model;
  RunRecord record;
};

template <typename T>
struct StudentRun {
  EncoderModel<T> student;
  RunRecord record;
};

template <typename T>
struct ProbeRun {
  LinearHead<T> head;
  RunRecord record;
};

template <typename T>
struct BaselineRun {
  SupervisedModel<T> model;
  RunRecord record;
};

/// Supervised cross-entropy on clean, augmented images.
template <typename T>
TeacherRun<T> train_teacher(const Dataset& data, const EncoderConfig& encoder, const TrainConfig& config);

/// Contrastive (or MSE-only) student training against a frozen teacher. The
/// student starts from `init`, or from a copy of the teacher when absent.
/// Labels are stripped before batching. Random streams depend only on the
/// seed, so runs that differ only in config.loss see identical augmentation
/// and corruption draws.
template <typename T>
StudentRun<T> train_student_contrastive(const EncoderModel<T>& teacher, const Dataset& data,
                                        const TrainConfig& config,
                                        const std::optional<EncoderModel<T>>& init = std::nullopt);

/// Linear probe on embeddings of corrupted-then-normalized images from a frozen
/// encoder, on a class-stratified label_fraction subsample.
template <typename T>
ProbeRun<T> train_probe(const EncoderModel<T>& encoder, const Dataset& data, const TrainConfig& config);

/// End-to-end cross-entropy fine-tuning on corrupted images.
template <typename T>
BaselineRun<T> train_baseline_e2e(const SupervisedModel<T>& init, const Dataset& data, const TrainConfig& config);

/// apply(op) then normalize; the order every pipeline uses.
template <typename T>
ImageBatch<T> corrupt_and_normalize(const ImageBatch<T>& raw, const ForwardOperator& op, const RngStream& rng,
                                    const std::vector<double>& mean, const std::vector<double>& std);

}  // namespace rinv
