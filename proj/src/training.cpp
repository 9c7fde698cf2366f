#include "rinv/training.hpp"

#include <chrono>
#include <cmath>

#include "rinv/ops.hpp"
#include "rinv/optim.hpp"

namespace rinv {

std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

Precision precision_from_string(const std::string& s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("precision must be f32 or f64, got '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (loss.family == LossFamily::Contrastive && batch_size < 2) {
    throw ConfigError("contrastive training needs batch_size >= 2 for negatives");
  }
  if (!(lr_max > 0)) throw ConfigError("lr_max must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (!(label_fraction > 0 && label_fraction <= 1)) throw ConfigError("label_fraction must lie in (0, 1]");
  if (norm_mean.empty() || norm_mean.size() != norm_std.size()) {
    throw ConfigError("norm_mean and norm_std must be nonempty and of equal length");
  }
  for (double s : norm_std)
    if (!(s > 0)) throw ConfigError("norm_std entries must be > 0");
  try {
    loss.validate();
    op.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
}

TrainConfig TrainConfig::teacher_defaults() {
  TrainConfig c;
  c.batch_size = 128;
  c.lr_max = 1e-3;
  c.loss.family = LossFamily::MSEOnly;
  return c;
}

TrainConfig TrainConfig::student_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::probe_defaults() {
  TrainConfig c;
  c.lr_max = 1e-3;
  c.weight_decay = 0.0;
  c.augment_pad = 0;
  c.loss.family = LossFamily::MSEOnly;
  return c;
}

TrainConfig TrainConfig::baseline_defaults() {
  TrainConfig c;
  c.batch_size = 64;
  c.lr_max = 1e-3;
  c.weight_decay = 0.0;
  c.loss.family = LossFamily::MSEOnly;
  return c;
}

template <typename T>
ImageBatch<T> corrupt_and_normalize(const ImageBatch<T>& raw, const ForwardOperator& op, const RngStream& rng,
                                    const std::vector<double>& mean, const std::vector<double>& std) {
  return normalize(apply(op, raw, rng), mean, std);
}

namespace {

// Shared epoch loop: shuffles per epoch, runs `step` on each batch and takes
// an Adam step on `params` with the cosine schedule.
template <typename T, typename Step>
void run_epochs(RunRecord& record, const TrainConfig& config, std::size_t n_items, bool drop_last,
                std::vector<Tensor<T>> params, const RngStream& root, Step&& step) {
  const auto started = std::chrono::steady_clock::now();
  std::vector<std::size_t> identity(n_items);
  for (std::size_t i = 0; i < n_items; ++i) identity[i] = i;
  const std::size_t per_epoch = make_batches(identity, config.batch_size, drop_last).size();
  if (per_epoch == 0) {
    throw DataError("dataset of " + std::to_string(n_items) + " items is smaller than one batch of " +
                    std::to_string(config.batch_size));
  }
  const std::size_t total = per_epoch * config.epochs;
  AdamState<T> adam;
  adam.weight_decay = config.weight_decay;
  std::size_t global = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    RngStream shuffle = root.child("shuffle").child(e);
    const auto order = shuffle.permutation(n_items);
    const auto batches = make_batches(order, config.batch_size, drop_last);
    double epoch_total = 0;
    for (std::size_t b = 0; b < batches.size(); ++b, ++global) {
      const RngStream batch_rng = root.child("batch").child(e).child(b);
      for (auto& p : params) p.zero_grad();
      Tensor<T> loss = step(std::span<const std::size_t>(batches[b]), batch_rng);
      backward(loss);
      adam.lr = cosine_lr(global, total > 1 ? total - 1 : 1, config.lr_max);
      record.step_lrs.push_back(adam.lr);
      adam_step(std::span<Tensor<T>>(params), adam);
      epoch_total += static_cast<double>(loss.item());
    }
    record.epoch_losses.push_back(epoch_total / static_cast<double>(batches.size()));
  }
  record.steps = global;
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
}

RunRecord make_record(const std::string& pipeline, const TrainConfig& config) {
  RunRecord r;
  r.pipeline = pipeline;
  r.config = config;
  r.seed = config.seed;
  r.stream_label = pipeline;
  return r;
}

template <typename T>
ImageBatch<T> augmented(const Dataset& data, std::span<const std::size_t> idx, const TrainConfig& config,
                        const RngStream& rng) {
  ImageBatch<T> raw = gather_batch<T>(data, idx);
  if (config.augment_pad == 0) return raw;
  return augment_crop_flip(raw, config.augment_pad, rng.child("augment"));
}

template <typename T>
std::vector<Tensor<T>> concat_params(std::vector<Tensor<T>> a, const std::vector<Tensor<T>>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

template <typename T>
TeacherRun<T> train_teacher(const Dataset& data, const EncoderConfig& encoder, const TrainConfig& config) {
  config.validate();
  data.validate();
  const auto& labels = data.require_labels();
  if (data.class_count < 2) throw DataError("teacher training needs at least 2 classes");
  RunRecord record = make_record("teacher", config);
  const RngStream root(config.seed, record.stream_label);
  SupervisedModel<T> model{build_encoder<T>(encoder, root.child("init")),
                           build_head<T>(encoder.embed_dim, data.class_count, root.child("head"))};
  run_epochs<T>(record, config, data.count, false, concat_params(model.encoder.parameters(), model.head.parameters()),
                root, [&](std::span<const std::size_t> idx, const RngStream& rng) {
                  std::vector<int> y;
                  for (std::size_t i : idx) y.push_back(labels[i]);
                  const ImageBatch<T> clean =
                      normalize(augmented<T>(data, idx, config, rng), config.norm_mean, config.norm_std);
                  return cross_entropy(head_logits(model.head, model.encoder.embed(clean)), std::span<const int>(y));
                });
  return {std::move(model), std::move(record)};
}

template <typename T>
StudentRun<T> train_student_contrastive(const EncoderModel<T>& teacher, const Dataset& data,
                                        const TrainConfig& config, const std::optional<EncoderModel<T>>& init) {
  config.validate();
  if (!teacher.frozen()) throw ContractError("train_student_contrastive: teacher must be frozen");
  // The pipeline only ever sees an unlabeled view.
  const Dataset unlabeled = data.without_labels();
  unlabeled.validate();
  RunRecord record = make_record("student", config);
  const RngStream root(config.seed, record.stream_label);
  EncoderModel<T> student = init ? init->clone() : teacher.clone();
  student.set_frozen(false);
  const bool drop_last = unlabeled.count >= config.batch_size;
  run_epochs<T>(record, config, unlabeled.count, drop_last, student.parameters(), root,
                [&](std::span<const std::size_t> idx, const RngStream& rng) {
                  if (unlabeled.has_labels()) throw ContractError("student pipeline must not read labels");
                  const ImageBatch<T> raw = augmented<T>(unlabeled, idx, config, rng);
                  const ImageBatch<T> clean = normalize(raw, config.norm_mean, config.norm_std);
                  const ImageBatch<T> distorted =
                      corrupt_and_normalize(raw, config.op, rng.child("corrupt"), config.norm_mean, config.norm_std);
                  if (clean.corrupted) throw ContractError("teacher input must be clean");
                  if (!distorted.corrupted) throw ContractError("student input must be corrupted");
                  ++record.teacher_clean_batches;
                  ++record.student_corrupted_batches;
                  Tensor<T> target;
                  {
                    NoGradGuard no_grad;
                    target = teacher.embed(clean);
                  }
                  return compute_loss(student.embed(distorted), target, config.loss);
                });
  return {std::move(student), std::move(record)};
}

template <typename T>
ProbeRun<T> train_probe(const EncoderModel<T>& encoder, const Dataset& data, const TrainConfig& config) {
  config.validate();
  data.validate();
  if (!encoder.frozen()) throw ContractError("train_probe: encoder must be frozen");
  const auto& labels = data.require_labels();
  RunRecord record = make_record("probe", config);
  const RngStream root(config.seed, record.stream_label);
  const auto subset = stratified_subset(data, config.label_fraction, root.child("subset"));
  if (subset.size() < config.batch_size) {
    throw DataError("label fraction " + std::to_string(config.label_fraction) + " leaves " +
                    std::to_string(subset.size()) + " samples, fewer than one batch of " +
                    std::to_string(config.batch_size));
  }
  LinearHead<T> head = build_head<T>(encoder.config().embed_dim, data.class_count, root.child("head"));
  run_epochs<T>(record, config, subset.size(), false, head.parameters(), root,
                [&](std::span<const std::size_t> pos, const RngStream& rng) {
                  std::vector<std::size_t> idx;
                  std::vector<int> y;
                  for (std::size_t p : pos) {
                    idx.push_back(subset[p]);
                    y.push_back(labels[subset[p]]);
                  }
                  Tensor<T> emb;
                  {
                    NoGradGuard no_grad;
                    emb = encoder.embed(corrupt_and_normalize(augmented<T>(data, idx, config, rng), config.op,
                                                              rng.child("corrupt"), config.norm_mean,
                                                              config.norm_std));
                  }
                  return cross_entropy(head_logits(head, emb), std::span<const int>(y));
                });
  return {std::move(head), std::move(record)};
}

template <typename T>
BaselineRun<T> train_baseline_e2e(const SupervisedModel<T>& init, const Dataset& data, const TrainConfig& config) {
  config.validate();
  data.validate();
  const auto& labels = data.require_labels();
  if (init.head.num_classes() != data.class_count) {
    throw DimensionError("baseline head has " + std::to_string(init.head.num_classes()) + " classes, dataset has " +
                         std::to_string(data.class_count));
  }
  RunRecord record = make_record("baseline", config);
  const RngStream root(config.seed, record.stream_label);
  SupervisedModel<T> model{init.encoder.clone(), init.head.clone()};
  model.encoder.set_frozen(false);
  model.head.weight.set_requires_grad(true);
  model.head.bias.set_requires_grad(true);
  run_epochs<T>(record, config, data.count, false, concat_params(model.encoder.parameters(), model.head.parameters()),
                root, [&](std::span<const std::size_t> idx, const RngStream& rng) {
                  std::vector<int> y;
                  for (std::size_t i : idx) y.push_back(labels[i]);
                  const ImageBatch<T> x = corrupt_and_normalize(augmented<T>(data, idx, config, rng), config.op,
                                                                rng.child("corrupt"), config.norm_mean,
                                                                config.norm_std);
                  return cross_entropy(head_logits(model.head, model.encoder.embed(x)), std::span<const int>(y));
                });
  return {std::move(model), std::move(record)};
}

#define RINV_INSTANTIATE_TRAINING(T)                                                                        \
  template ImageBatch<T> corrupt_and_normalize(const ImageBatch<T>&, const ForwardOperator&,                \
                                               const RngStream&, const std::vector<double>&,                \
                                               const std::vector<double>&);                                 \
  template TeacherRun<T> train_teacher<T>(const Dataset&, const EncoderConfig&, const TrainConfig&);        \
  template StudentRun<T> train_student_contrastive(const EncoderModel<T>&, const Dataset&,                  \
                                                   const TrainConfig&, const std::optional<EncoderModel<T>>&); \
  template ProbeRun<T> train_probe(const EncoderModel<T>&, const Dataset&, const TrainConfig&);             \
  template BaselineRun<T> train_baseline_e2e(const SupervisedModel<T>&, const Dataset&, const TrainConfig&);

RINV_INSTANTIATE_TRAINING(float)
RINV_INSTANTIATE_TRAINING(double)

#undef RINV_INSTANTIATE_TRAINING

}  // namespace rinv
