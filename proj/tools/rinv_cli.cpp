#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rinv/errors.hpp"
#include "rinv/gradcheck.hpp"
#include "rinv/io.hpp"
#include "rinv/runtime.hpp"
#include "rinv/theory.hpp"
#include "rinv/training.hpp"

namespace fs = std::filesystem;
using namespace rinv;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string precision;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Experiment config (JSON)");
  sub->add_option("--seed", c.seed, "Seed override for every pipeline");
  sub->add_option("--out", c.out, "Output directory");
  sub->add_option("--precision", c.precision, "f32 | f64")->check(CLI::IsMember({"f32", "f64"}));
}

struct Context {
  ExperimentConfig cfg;
  fs::path base;  // directory relative data paths resolve against
  fs::path out;
};

Context load_context(const Common& c) {
  Context ctx;
  if (!c.config.empty()) {
    ctx.cfg = load_experiment(c.config);
    ctx.base = fs::path(c.config).parent_path();
  }
  if (c.seed) ctx.cfg.set_seed(*c.seed);
  if (!c.precision.empty()) ctx.cfg.set_precision(precision_from_string(c.precision));
  ctx.out = c.out.empty() ? fs::path(ctx.cfg.output_dir) : fs::path(c.out);
  fs::create_directories(ctx.out);
  return ctx;
}

fs::path resolve(const Context& ctx, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : ctx.out / path;
}

void write_json(const fs::path& path, const Json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void write_record(const Context& ctx, RunRecord record, const fs::path& checkpoint) {
  record.checkpoint_path = checkpoint.string();
  write_json(ctx.out / (record.pipeline + ".run.json"), to_json(record));
  std::cout << record.pipeline << ": " << record.steps << " steps, final loss "
            << (record.epoch_losses.empty() ? 0.0 : record.epoch_losses.back()) << ", " << record.wall_seconds
            << " s -> " << checkpoint.string() << "\n";
}

template <typename F>
void dispatch(Precision p, F&& f) {
  if (p == Precision::F64)
    f(double{});
  else
    f(float{});
}

template <typename T>
EncoderModel<T> load_frozen(const fs::path& path) {
  auto ck = load_checkpoint<T>(path);
  ck.encoder.set_frozen(true);
  return std::move(ck.encoder);
}

void train_teacher_cmd(const Context& ctx) {
  const Dataset train = load_data(ctx.cfg.train_data, ctx.base);
  dispatch(ctx.cfg.teacher.precision, [&](auto tag) {
    using T = decltype(tag);
    auto run = train_teacher<T>(train, ctx.cfg.encoder, ctx.cfg.teacher);
    const fs::path path = resolve(ctx, ctx.cfg.teacher_checkpoint);
    save_checkpoint(path, teacher_from_supervised(run.model), &run.model.head);
    write_record(ctx, run.record, path);
  });
}

void train_student_cmd(const Context& ctx) {
  const Dataset train = load_data(ctx.cfg.train_data, ctx.base);
  dispatch(ctx.cfg.student.precision, [&](auto tag) {
    using T = decltype(tag);
    const auto teacher = load_frozen<T>(resolve(ctx, ctx.cfg.teacher_checkpoint));
    auto run = train_student_contrastive(teacher, train, ctx.cfg.student);
    run.student.set_frozen(true);
    const fs::path path = resolve(ctx, ctx.cfg.student_checkpoint);
    save_checkpoint(path, run.student);
    write_record(ctx, run.record, path);
  });
}

void train_probe_cmd(const Context& ctx, const std::string& encoder) {
  const Dataset train = load_data(ctx.cfg.train_data, ctx.base);
  const std::string source = encoder == "teacher" ? ctx.cfg.teacher_checkpoint : ctx.cfg.student_checkpoint;
  dispatch(ctx.cfg.probe.precision, [&](auto tag) {
    using T = decltype(tag);
    const auto enc = load_frozen<T>(resolve(ctx, source));
    auto run = train_probe(enc, train, ctx.cfg.probe);
    const fs::path path = resolve(ctx, ctx.cfg.probe_checkpoint);
    save_checkpoint(path, enc, &run.head);
    write_record(ctx, run.record, path);
  });
}

void train_baseline_cmd(const Context& ctx) {
  const Dataset train = load_data(ctx.cfg.train_data, ctx.base);
  dispatch(ctx.cfg.baseline.precision, [&](auto tag) {
    using T = decltype(tag);
    auto ck = load_checkpoint<T>(resolve(ctx, ctx.cfg.teacher_checkpoint));
    if (!ck.head) throw FormatError("train-baseline: teacher checkpoint carries no classifier head");
    ck.encoder.set_frozen(false);
    SupervisedModel<T> init{std::move(ck.encoder), std::move(*ck.head)};
    auto run = train_baseline_e2e(init, train, ctx.cfg.baseline);
    run.model.encoder.set_frozen(true);
    const fs::path path = ctx.out / "baseline.rinv";
    save_checkpoint(path, run.model.encoder, &run.model.head);
    write_record(ctx, run.record, path);
  });
}

template <typename T>
Checkpoint<T> load_classifier(const Context& ctx, const std::string& checkpoint) {
  auto ck = load_checkpoint<T>(resolve(ctx, checkpoint.empty() ? ctx.cfg.probe_checkpoint : checkpoint));
  if (!ck.head) throw FormatError("checkpoint carries no classifier head; train a probe first");
  ck.encoder.set_frozen(true);
  return ck;
}

std::string model_id(const Context& ctx, const std::string& checkpoint) {
  return fs::path(checkpoint.empty() ? ctx.cfg.probe_checkpoint : checkpoint).stem().string();
}

void evaluate_cmd(const Context& ctx, const std::string& checkpoint) {
  const Dataset test = load_data(ctx.cfg.test_data, ctx.base);
  std::vector<Metric> metrics;
  for (const auto& m : ctx.cfg.eval.metrics) metrics.push_back(metric_from_string(m));
  dispatch(ctx.cfg.probe.precision, [&](auto tag) {
    using T = decltype(tag);
    const auto ck = load_classifier<T>(ctx, checkpoint);
    const auto reports = evaluate_metrics(ck.encoder, *ck.head, test, ctx.cfg.eval_operator(), metrics,
                                          RngStream(ctx.cfg.seed, "evaluate"),
                                          ctx.cfg.eval_options(model_id(ctx, checkpoint)));
    write_reports(ctx.out, "evaluate", reports);
    std::cout << reports_csv(reports);
  });
}

std::vector<std::pair<double, double>> points(const std::vector<EvalReport>& reports) {
  std::vector<std::pair<double, double>> out;
  for (const auto& r : reports) out.emplace_back(r.severity.value_or(0.0), r.mean);
  return out;
}

void sweep_cmd(const Context& ctx, const std::string& checkpoint, const std::string& kind) {
  const Dataset test = load_data(ctx.cfg.test_data, ctx.base);
  const std::string id = model_id(ctx, checkpoint);
  dispatch(ctx.cfg.probe.precision, [&](auto tag) {
    using T = decltype(tag);
    const auto ck = load_classifier<T>(ctx, checkpoint);
    if (kind != "label") {
      if (ctx.cfg.eval.severities.empty()) throw ConfigError("sweep: eval.severities is empty");
      const auto reports = severity_sweep(ck.encoder, *ck.head, test, ctx.cfg.eval_operator(),
                                          ctx.cfg.eval.severities, RngStream(ctx.cfg.seed, "sweep/severity"),
                                          ctx.cfg.eval_options(id));
      write_reports(ctx.out, "severity_sweep", reports);
      if (ctx.cfg.eval.plot)
        write_file_atomic(ctx.out / "severity_sweep.svg",
                          svg_line_chart("Accuracy vs severity", "severity", "top-1", {{id, points(reports)}}));
      std::cout << reports_csv(reports);
    }
    if (kind != "severity") {
      const Dataset train = load_data(ctx.cfg.train_data, ctx.base);
      TrainConfig probe = ctx.cfg.probe;
      probe.op = ctx.cfg.eval_operator();
      const auto reports =
          label_efficiency_sweep(ck.encoder, train, test, ctx.cfg.eval.label_fractions, probe,
                                 RngStream(ctx.cfg.seed, "sweep/labels"), ctx.cfg.eval_options(id));
      write_reports(ctx.out, "label_sweep", reports);
      if (ctx.cfg.eval.plot)
        write_file_atomic(ctx.out / "label_sweep.svg", svg_line_chart("Accuracy vs label fraction", "label fraction",
                                                                      "top-1", {{id, points(reports)}}));
      std::cout << reports_csv(reports);
    }
  });
}

void corrupt_cmd(const Context& ctx, const std::string& images, const std::string& labels, const std::string& op_json) {
  Dataset data = images.empty() ? load_data(ctx.cfg.train_data, ctx.base)
                                : load_idx(images, labels.empty() ? std::nullopt : std::optional<fs::path>(labels));
  const ForwardOperator op = op_json.empty() ? ctx.cfg.op : operator_from_json(Json::parse(op_json));
  std::vector<std::size_t> all(data.count);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto batch = gather_batch<float>(data, all);
  const auto out = apply(op, batch, RngStream(ctx.cfg.seed, "corrupt"));
  const auto values = out.values.data();
  write_file_atomic(ctx.out / "corrupted-images.idx",
                    encode_idx_float_images(data.count, data.channels, data.height, data.width,
                                            std::vector<float>(values.begin(), values.end())));
  if (data.labels) write_file_atomic(ctx.out / "corrupted-labels.idx", encode_idx_labels(*data.labels));
  write_json(ctx.out / "corrupted.json", {{"operator", to_json(op)}, {"seed", ctx.cfg.seed}, {"count", data.count}});
  std::cout << "corrupted " << data.count << " images with " << op.describe() << "\n";
}

void synth_data_cmd(const Context& ctx) {
  for (const auto* src : {&ctx.cfg.train_data, &ctx.cfg.test_data}) {
    if (src->kind != "synth") throw ConfigError("synth-data: data sources must be of kind synth");
    const Dataset data = load_data(*src, ctx.base);
    save_idx(data, ctx.out / (data.split + "-images.idx"), ctx.out / (data.split + "-labels.idx"));
    std::cout << data.split << ": " << data.count << " images, " << data.class_count << " classes\n";
  }
}

Json to_json(const Prop1Report& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"index", row.index},
                    {"min_sampled_gap", row.min_sampled_gap},
                    {"best_restart_cosine", row.best_restart_cosine},
                    {"min_restart_cosine", row.min_restart_cosine},
                    {"restarts_converged", row.restarts_converged},
                    {"restarts_recovered", row.restarts_recovered},
                    {"rejection_pass", row.rejection_pass},
                    {"optimization_pass", row.optimization_pass}});
  return {{"n", r.n},           {"d", r.d},         {"tau", r.tau}, {"sum_norm", r.sum_norm},
          {"precondition_violated", r.precondition_violated}, {"rows", rows}, {"pass", r.pass()}};
}

struct RecoveryArgs {
  std::size_t n = 4;
  std::optional<std::size_t> d;
  double tau = 0.1;
  std::size_t samples = 100000;
  std::size_t restarts = 8;
};

int verify_recovery_cmd(const Common& c, const RecoveryArgs& a) {
  const std::size_t d = a.d.value_or(a.n - 1);
  const EmbeddingSet set = a.n == 2 ? antipodal_pair(d, a.tau) : regular_simplex(a.n, d, a.tau);
  const auto report = verify_prop1(set, RngStream(c.seed.value_or(0), "verify-recovery"), a.samples, a.restarts);
  const Json j = to_json(report);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_json(fs::path(c.out) / "verify_recovery.json", j);
  }
  std::cout << j.dump(2) << "\n";
  return report.pass() ? 0 : 1;
}

int gradcheck_cmd(const Common& c, std::size_t instances) {
  const auto suite = run_gradcheck_suite(c.seed.value_or(0), instances);
  Json j = suite.to_json();
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_json(fs::path(c.out) / "gradcheck.json", j);
  }
  // The per-case arrays go to the file; stdout gets the summary.
  j.erase("finite_difference");
  j.erase("decomposition");
  j["cases"] = suite.finite_difference.size() + suite.decomposition.size();
  std::cout << j.dump(2) << "\n";
  return suite.pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Representation inversion: train students that recover teacher embeddings from corrupted images"};
  app.require_subcommand(1);

  Common common;
  std::string encoder = "student", checkpoint, kind = "all", images, labels, op_json;
  RecoveryArgs rec;
  std::size_t instances = 20;

  auto* teacher = app.add_subcommand("train-teacher", "Supervised teacher on clean images");
  auto* student = app.add_subcommand("train-student", "Student against the frozen teacher on corrupted images");
  auto* probe = app.add_subcommand("train-probe", "Linear probe on a frozen encoder");
  probe->add_option("--encoder", encoder, "student | teacher")->check(CLI::IsMember({"student", "teacher"}));
  auto* baseline = app.add_subcommand("train-baseline", "End-to-end fine-tuning on corrupted images");
  auto* eval = app.add_subcommand("evaluate", "Corrupted-test evaluation of an encoder with a head");
  auto* sweep = app.add_subcommand("sweep", "Severity and label-fraction sweeps");
  for (auto* s : {eval, sweep}) s->add_option("--checkpoint", checkpoint, "Encoder+head checkpoint");
  sweep->add_option("--kind", kind, "severity | label | all")->check(CLI::IsMember({"severity", "label", "all"}));
  auto* corrupt = app.add_subcommand("corrupt", "Apply an operator to a dataset and write IDX output");
  corrupt->add_option("--images", images, "IDX images (default: config train data)");
  corrupt->add_option("--labels", labels, "IDX labels");
  corrupt->add_option("--operator", op_json, "Operator JSON (default: config operator)");
  auto* synth = app.add_subcommand("synth-data", "Write the configured synthetic datasets as IDX");
  for (auto* s : {teacher, student, probe, baseline, eval, sweep, corrupt, synth}) add_common(s, common);

  auto* verify = app.add_subcommand("verify-recovery", "Exact-recovery check on a balanced embedding set");
  verify->add_option("--n", rec.n, "Embeddings (2 = antipodal pair)")->check(CLI::Range(2, 1 << 20));
  verify->add_option("--d", rec.d, "Dimension (default n - 1)");
  verify->add_option("--tau", rec.tau, "Temperature");
  verify->add_option("--samples", rec.samples, "Rejection samples per row");
  verify->add_option("--restarts", rec.restarts, "Descent restarts per row");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference and decomposition checks of every loss");
  grad->add_option("--instances", instances, "Random problems per loss variant")->check(CLI::PositiveNumber);
  for (auto* s : {verify, grad}) {
    s->add_option("--seed", common.seed, "Seed");
    s->add_option("--out", common.out, "Output directory");
  }

  if (argc < 2) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (verify->parsed()) return verify_recovery_cmd(common, rec);
    if (grad->parsed()) return gradcheck_cmd(common, instances);
    const Context ctx = load_context(common);
    if (teacher->parsed()) train_teacher_cmd(ctx);
    if (student->parsed()) train_student_cmd(ctx);
    if (probe->parsed()) train_probe_cmd(ctx, encoder);
    if (baseline->parsed()) train_baseline_cmd(ctx);
    if (eval->parsed()) evaluate_cmd(ctx, checkpoint);
    if (sweep->parsed()) sweep_cmd(ctx, checkpoint, kind);
    if (corrupt->parsed()) corrupt_cmd(ctx, images, labels, op_json);
    if (synth->parsed()) synth_data_cmd(ctx);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
