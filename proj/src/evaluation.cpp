#include "rinv/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "rinv/ops.hpp"

namespace rinv {

std::string to_string(Metric m) {
  switch (m) {
    case Metric::Top1:
      return "top1";
    case Metric::Top5:
      return "top5";
    case Metric::AUC:
      return "auc";
  }
  return "unknown";
}

Metric metric_from_string(const std::string& s) {
  for (auto m : {Metric::Top1, Metric::Top5, Metric::AUC})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown metric '" + s + "'");
}

template <typename T>
double topk_accuracy(const Tensor<T>& logits, std::span<const int> labels, std::size_t k) {
  if (logits.rank() != 2) throw DimensionError("topk_accuracy: logits must be B x C");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw DimensionError("topk_accuracy: label count does not match logits");
  if (k < 1 || k > c) throw DomainError("topk_accuracy: k must lie in [1, C]");
  if (b == 0) throw DataError("topk_accuracy: empty batch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DataError("topk_accuracy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    const T ly = logits[i * c + static_cast<std::size_t>(y)];
    std::size_t rank = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T lj = logits[i * c + j];
      if (lj > ly || (lj == ly && j < static_cast<std::size_t>(y))) ++rank;
    }
    hits += rank < k;
  }
  return static_cast<double>(hits) / static_cast<double>(b);
}

double binary_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("binary_auc: score and label counts differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) {
      const int y = labels[order[t]];
      if (y != 0 && y != 1) throw DataError("binary_auc: labels must be 0 or 1");
      if (y == 1) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw DataError("binary_auc: both classes must be present");
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (pos_rank_sum - np * (np + 1) / 2) / (np * nn);
}

EvalReport summarize(std::vector<double> values, bool deterministic) {
  if (values.empty()) throw DataError("summarize: no values");
  EvalReport r;
  const double n = static_cast<double>(values.size());
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (!deterministic && values.size() > 1) {
    double sq = 0;
    for (double v : values) sq += (v - r.mean) * (v - r.mean);
    r.stderr_value = std::sqrt(sq / (n - 1)) / std::sqrt(n);
  }
  r.n_instantiations = values.size();
  r.values = std::move(values);
  return r;
}

std::size_t evaluation_threads() {
  const char* env = std::getenv("RINV_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError(std::string("RINV_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<std::size_t>(v);
}

namespace {

template <typename T>
Tensor<T> dataset_logits(const EncoderModel<T>& encoder, const LinearHead<T>& head, const Dataset& data,
                         const ForwardOperator& op, const RngStream& rng, const EvalOptions& options) {
  NoGradGuard no_grad;
  std::vector<std::size_t> all(data.count);
  std::iota(all.begin(), all.end(), 0);
  std::vector<T> out;
  out.reserve(data.count * head.num_classes());
  const auto batches = make_batches(all, options.batch_size, false);
  for (std::size_t j = 0; j < batches.size(); ++j) {
    const ImageBatch<T> x =
        corrupt_and_normalize(gather_batch<T>(data, batches[j]), op, rng.child(j), options.norm_mean, options.norm_std);
    const Tensor<T> logits = head_logits(head, encoder.embed(x));
    out.insert(out.end(), logits.data().begin(), logits.data().end());
  }
  return Tensor<T>::from_data({data.count, head.num_classes()}, std::move(out));
}

template <typename T>
std::vector<double> metric_values(const Tensor<T>& logits, const std::vector<int>& labels,
                                  const std::vector<Metric>& metrics) {
  std::vector<double> v;
  const std::size_t c = logits.dim(1);
  for (Metric m : metrics) {
    switch (m) {
      case Metric::Top1:
        v.push_back(topk_accuracy(logits, labels, 1));
        break;
      case Metric::Top5:
        v.push_back(topk_accuracy(logits, labels, std::min<std::size_t>(5, c)));
        break;
      case Metric::AUC: {
        if (c != 2) throw DomainError("AUC needs a binary task");
        std::vector<double> scores(logits.dim(0));
        for (std::size_t i = 0; i < scores.size(); ++i)
          scores[i] = static_cast<double>(logits[i * 2 + 1]) - static_cast<double>(logits[i * 2]);
        v.push_back(binary_auc(scores, labels));
        break;
      }
    }
  }
  return v;
}

}  // namespace

template <typename T>
std::vector<EvalReport> evaluate_metrics(const EncoderModel<T>& encoder, const LinearHead<T>& head,
                                         const Dataset& data, const ForwardOperator& op,
                                         const std::vector<Metric>& metrics, const RngStream& rng,
                                         const EvalOptions& options) {
  op.validate();
  data.validate();
  if (options.n_instantiations < 1) throw ConfigError("n_instantiations must be >= 1");
  if (metrics.empty()) throw ConfigError("no metrics requested");
  if (data.count == 0) throw DataError("evaluation dataset is empty");
  const std::vector<int>& labels = data.require_labels();
  if (head.num_classes() < data.class_count) {
    throw DimensionError("head has " + std::to_string(head.num_classes()) + " classes, dataset has " +
                         std::to_string(data.class_count));
  }
  const bool deterministic = op.is_deterministic();
  const std::size_t runs = deterministic ? 1 : options.n_instantiations;
  std::vector<std::vector<double>> per_run(runs);
  auto work = [&](std::size_t k) {
    per_run[k] = metric_values(dataset_logits(encoder, head, data, op, rng.child(k), options), labels, metrics);
  };
  const std::size_t threads = std::min(evaluation_threads(), runs);
  if (threads <= 1) {
    for (std::size_t k = 0; k < runs; ++k) work(k);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t k = t; k < runs; k += threads) work(k);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<EvalReport> reports;
  for (std::size_t m = 0; m < metrics.size(); ++m) {
    std::vector<double> values;
    for (const auto& r : per_run) values.push_back(r[m]);
    EvalReport rep = summarize(std::move(values), deterministic);
    rep.model_id = options.model_id;
    rep.operator_desc = op.describe();
    rep.metric = to_string(metrics[m]);
    rep.seed = rng.seed();
    if (op.kind != OperatorKind::Identity && op.kind != OperatorKind::Compose && op.is_fixed()) {
      rep.severity = op.kind == OperatorKind::RandomMask      ? op.mask_fraction.value()
                     : op.kind == OperatorKind::GaussianNoise ? op.noise_std.value()
                                                              : op.blur_std.value();
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

template <typename T>
EvalReport evaluate(const EncoderModel<T>& encoder, const LinearHead<T>& head, const Dataset& data,
                    const ForwardOperator& op, const RngStream& rng, const EvalOptions& options, Metric metric) {
  return evaluate_metrics(encoder, head, data, op, {metric}, rng, options).front();
}

template <typename T>
std::vector<EvalReport> severity_sweep(const EncoderModel<T>& encoder, const LinearHead<T>& head,
                                       const Dataset& data, const ForwardOperator& op,
                                       const std::vector<double>& severities, const RngStream& rng,
                                       const EvalOptions& options) {
  std::vector<EvalReport> out;
  for (double s : severities) {
    const ForwardOperator fixed = op.with_severity(s);
    fixed.validate();
    // Every severity reuses the same streams, so a sweep over one value
    // reproduces evaluate exactly.
    out.push_back(evaluate(encoder, head, data, fixed, rng, options));
  }
  return out;
}

template <typename T>
std::vector<EvalReport> label_efficiency_sweep(const EncoderModel<T>& encoder, const Dataset& train,
                                               const Dataset& test, const std::vector<double>& fractions,
                                               const TrainConfig& probe_config, const RngStream& rng,
                                               const EvalOptions& options) {
  std::vector<EvalReport> out;
  for (double f : fractions) {
    if (!(f > 0 && f <= 1)) throw DomainError("label fractions must lie in (0, 1]");
    TrainConfig cfg = probe_config;
    cfg.label_fraction = f;
    // Same optimizer step budget at every fraction; batches never exceed the subset.
    // Probes keep the final partial batch.
    auto batches = [](std::size_t n, std::size_t b) { return (n + b - 1) / b; };
    const std::size_t full_steps = probe_config.epochs * batches(train.count, probe_config.batch_size);
    const std::size_t subset = stratified_subset(train, f, RngStream(0, "size")).size();
    cfg.batch_size = std::min(probe_config.batch_size, subset);
    const std::size_t per_epoch = batches(subset, cfg.batch_size);
    cfg.epochs = std::max(probe_config.epochs, (full_steps + per_epoch - 1) / per_epoch);
    const ProbeRun<T> probe = train_probe(encoder, train, cfg);
    EvalReport rep = evaluate(encoder, probe.head, test, cfg.op, rng, options);
    rep.severity = f;
    out.push_back(std::move(rep));
  }
  return out;
}

void LabelShiftMap::validate(std::size_t training_classes) const {
  for (const auto& [from, to] : pairs) {
    if (to < 0 || static_cast<std::size_t>(to) >= training_classes) {
      throw DataError("label shift target " + std::to_string(to) + " is not a training class");
    }
  }
}

template <typename T>
EvalReport label_shift_eval(const EncoderModel<T>& encoder, const LinearHead<T>& head, const Dataset& external,
                            const LabelShiftMap& map, const ForwardOperator& op, const RngStream& rng,
                            const EvalOptions& options) {
  if (external.count == 0) throw DataError("label_shift_eval: external dataset is empty");
  map.validate(head.num_classes());
  Dataset relabeled = external;
  std::vector<int> labels;
  for (int y : external.require_labels()) {
    auto it = std::find_if(map.pairs.begin(), map.pairs.end(), [y](const auto& p) { return p.first == y; });
    if (it == map.pairs.end()) throw DataError("label_shift_eval: class " + std::to_string(y) + " has no mapping");
    labels.push_back(it->second);
  }
  relabeled.labels = std::move(labels);
  relabeled.class_count = head.num_classes();
  return evaluate(encoder, head, relabeled, op, rng, options);
}

template <typename T>
std::vector<EvalReport> transfer_eval(const EncoderModel<T>& encoder, const Dataset& train, const Dataset& test,
                                      const TrainConfig& probe_config, const RngStream& rng,
                                      const EvalOptions& options) {
  if (!encoder.frozen()) throw ContractError("transfer_eval: encoder must be frozen");
  const ProbeRun<T> probe = train_probe(encoder, train, probe_config);
  std::vector<Metric> metrics{Metric::Top1};
  if (test.class_count == 2) metrics.push_back(Metric::AUC);
  return evaluate_metrics(encoder, probe.head, test, probe_config.op, metrics, rng, options);
}

template <typename T>
EvalReport clean_probe_transfer(const LinearHead<T>& clean_head, const EncoderModel<T>& student, const Dataset& test,
                                const ForwardOperator& op, const RngStream& rng, const EvalOptions& options) {
  if (clean_head.input_dim() != student.config().embed_dim) {
    throw DimensionError("clean probe expects " + std::to_string(clean_head.input_dim()) +
                         "-dim embeddings, student produces " + std::to_string(student.config().embed_dim));
  }
  return evaluate(student, clean_head, test, op, rng, options);
}

#define RINV_INSTANTIATE_EVAL(T)                                                                                  \
  template double topk_accuracy(const Tensor<T>&, std::span<const int>, std::size_t);                            \
  template std::vector<EvalReport> evaluate_metrics(const EncoderModel<T>&, const LinearHead<T>&, const Dataset&, \
                                                    const ForwardOperator&, const std::vector<Metric>&,         \
                                                    const RngStream&, const EvalOptions&);                        \
  template EvalReport evaluate(const EncoderModel<T>&, const LinearHead<T>&, const Dataset&,                      \
                               const ForwardOperator&, const RngStream&, const EvalOptions&, Metric);             \
  template std::vector<EvalReport> severity_sweep(const EncoderModel<T>&, const LinearHead<T>&, const Dataset&,   \
                                                  const ForwardOperator&, const std::vector<double>&,             \
                                                  const RngStream&, const EvalOptions&);                          \
  template std::vector<EvalReport> label_efficiency_sweep(const EncoderModel<T>&, const Dataset&, const Dataset&, \
                                                          const std::vector<double>&, const TrainConfig&,         \
                                                          const RngStream&, const EvalOptions&);                  \
  template EvalReport label_shift_eval(const EncoderModel<T>&, const LinearHead<T>&, const Dataset&,              \
                                       const LabelShiftMap&, const ForwardOperator&, const RngStream&,            \
                                       const EvalOptions&);                                                       \
  template std::vector<EvalReport> transfer_eval(const EncoderModel<T>&, const Dataset&, const Dataset&,          \
                                                 const TrainConfig&, const RngStream&, const EvalOptions&);       \
  template EvalReport clean_probe_transfer(const LinearHead<T>&, const EncoderModel<T>&, const Dataset&,          \
                                           const ForwardOperator&, const RngStream&, const EvalOptions&);

RINV_INSTANTIATE_EVAL(float)
RINV_INSTANTIATE_EVAL(double)

#undef RINV_INSTANTIATE_EVAL

}  // namespace rinv
