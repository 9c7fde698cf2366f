#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rinv/corruptions.hpp"
#include "rinv/dataset.hpp"
#include "rinv/encoders.hpp"
#include "rinv/rng.hpp"
#include "rinv/training.hpp"

namespace rinv {

enum class Metric { Top1, Top5, AUC };

std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

struct EvalReport {
  std::string model_id;
  std::string operator_desc;
  std::optional<double> severity;
  std::string metric;
  std::vector<double> values;  // one per instantiation
  double mean = 0.0;
  // sample std / sqrt(n); absent for deterministic operators and single runs.
  std::optional<double> stderr_value;
  std::size_t n_instantiations = 0;
  std::uint64_t seed = 0;
};

struct EvalOptions {
  std::size_t n_instantiations = 10;
  std::size_t batch_size = 256;
  std::vector<double> norm_mean{0.5};
  std::vector<double> norm_std{0.5};
  std::string model_id = "model";
};

/// Fraction of rows whose label ranks within the top k. Equal logits rank the
/// lower class index first.
template <typename T>
double topk_accuracy(const Tensor<T>& logits, std::span<const int> labels, std::size_t k);

/// Area under the ROC curve by the rank-sum statistic, ties averaged.
double binary_auc(std::span<const double> scores, std::span<const int> labels);

/// Mean and sample-std / sqrt(n) of per-instantiation values.
EvalReport summarize(std::vector<double> values, bool deterministic);

/// Worker count for evaluation instantiations, from RINV_THREADS (default 1).
std::size_t evaluation_threads();

/// Runs the corrupted evaluation pass once per instantiation (once for
/// deterministic operators) and reports each metric. Instantiation k draws
/// from rng.child(k), batch j within it from rng.child(k).child(j).
template <typename T>
std::vector<EvalReport> evaluate_metrics(const EncoderModel<T>& encoder, const LinearHead<T>& head,
                                         const Dataset& data, const ForwardOperator& op,
                                         const std::vector<Metric>& metrics, const RngStream& rng,
                                         const EvalOptions& options = {});

template <typename T>
EvalReport evaluate(const EncoderModel<T>& encoder, const LinearHead<T>& head, const Dataset& data,
                    const ForwardOperator& op, const RngStream& rng, const EvalOptions& options = {},
                    Metric metric = Metric::Top1);

/// One report per fixed severity of `op` (mask p, noise sigma or blur std).
template <typename T>
std::vector<EvalReport> severity_sweep(const EncoderModel<T>& encoder, const LinearHead<T>& head,
                                       const Dataset& data, const ForwardOperator& op,
                                       const std::vector<double>& severities, const RngStream& rng,
                                       const EvalOptions& options = {});

/// Trains a probe per label fraction on `train` (stratified) and evaluates on
/// `test` under probe_config.op. Every probe gets the optimizer steps of the
/// full-data probe: epochs are scaled up and the batch is capped at the
/// subset size. The fraction is stored in report.severity.
template <typename T>
std::vector<EvalReport> label_efficiency_sweep(const EncoderModel<T>& encoder, const Dataset& train,
                                               const Dataset& test, const std::vector<double>& fractions,
                                               const TrainConfig& probe_config, const RngStream& rng,
                                               const EvalOptions& options = {});

/// (external class id, training class id) pairs.
struct LabelShiftMap {
  std::vector<std::pair<int, int>> pairs;
  // Throws DataError when a target id is outside [0, training_classes).
  void validate(std::size_t training_classes) const;
};

/// Relabels `external` through `map`, then evaluates with the training head.
template <typename T>
EvalReport label_shift_eval(const EncoderModel<T>& encoder, const LinearHead<T>& head, const Dataset& external,
                            const LabelShiftMap& map, const ForwardOperator& op, const RngStream& rng,
                            const EvalOptions& options = {});

/// Fresh probe on `train` under probe_config.op, evaluated on `test`. Binary
/// tasks also report AUC.
template <typename T>
std::vector<EvalReport> transfer_eval(const EncoderModel<T>& encoder, const Dataset& train, const Dataset& test,
                                      const TrainConfig& probe_config, const RngStream& rng,
                                      const EvalOptions& options = {});

/// Attaches a probe trained on clean teacher embeddings to `student` and
/// evaluates on corrupted `test` images without retraining.
template <typename T>
EvalReport clean_probe_transfer(const LinearHead<T>& clean_head, const EncoderModel<T>& student, const Dataset& test,
                                const ForwardOperator& op, const RngStream& rng, const EvalOptions& options = {});

}  // namespace rinv
