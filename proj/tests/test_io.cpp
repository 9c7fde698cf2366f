#include <doctest.h>

#include <fstream>

#include "rinv/errors.hpp"
#include "rinv/io.hpp"
#include "rinv/ops.hpp"
#include "test_support.hpp"

using namespace rinv;
using rinv::testing::ScratchDir;

namespace {

void put_be(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v >> 24));
  s.push_back(static_cast<char>((v >> 16) & 0xFF));
  s.push_back(static_cast<char>((v >> 8) & 0xFF));
  s.push_back(static_cast<char>(v & 0xFF));
}

void write_raw(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Hand-built fixture: 4 images 28x28, image k filled with byte value
// 85 * k except pixel (0, 0) which is 255 - 85 * k.
std::string fixture_images() {
  std::string s;
  put_be(s, 0x00000803);
  put_be(s, 4);
  put_be(s, 28);
  put_be(s, 28);
  for (int k = 0; k < 4; ++k)
    for (int p = 0; p < 28 * 28; ++p) s.push_back(static_cast<char>(p == 0 ? 255 - 85 * k : 85 * k));
  return s;
}

std::string fixture_labels(std::uint32_t n) {
  std::string s;
  put_be(s, 0x00000801);
  put_be(s, n);
  for (std::uint32_t i = 0; i < n; ++i) s.push_back(static_cast<char>(i % 3));
  return s;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

EncoderConfig small_conv() {
  EncoderConfig c;
  c.height = c.width = 8;
  c.widths = {3, 4, 5};
  c.embed_dim = 6;
  return c;
}

}  // namespace

TEST_CASE("IDX loading from a hand-built fixture") {
  ScratchDir dir("idx");
  write_raw(dir / "img.idx", fixture_images());
  write_raw(dir / "lbl.idx", fixture_labels(4));
  const auto d = load_idx(dir / "img.idx", dir / "lbl.idx");
  CHECK(d.count == 4);
  CHECK(d.channels == 1);
  CHECK(d.height == 28);
  CHECK(d.width == 28);
  CHECK(d.class_count == 3);
  CHECK(*d.labels == std::vector<int>{0, 1, 2, 0});
  CHECK(d.image(0)[0] == 1.0f);
  CHECK(d.image(0)[1] == 0.0f);
  CHECK(d.image(3)[0] == 0.0f);
  CHECK(d.image(3)[5] == 1.0f);
  CHECK(d.image(1)[5] == doctest::Approx(85.0 / 255.0));

  write_raw(dir / "short.idx", fixture_labels(3));
  const auto mismatch = message_of([&] { load_idx(dir / "img.idx", dir / "short.idx"); });
  CHECK(mismatch.find("count") != std::string::npos);
  CHECK(mismatch.find("byte offset 4") != std::string::npos);

  std::string bad = fixture_images();
  bad[3] = 0x09;
  write_raw(dir / "bad.idx", bad);
  CHECK(message_of([&] { load_idx(dir / "bad.idx"); }).find("byte offset 0") != std::string::npos);

  std::string cut = fixture_images();
  cut.resize(16 + 100);
  write_raw(dir / "cut.idx", cut);
  CHECK(message_of([&] { load_idx(dir / "cut.idx"); }).find("byte offset 16") != std::string::npos);

  CHECK_THROWS_AS(load_idx(dir / "missing.idx"), DataError);
}

TEST_CASE("IDX round trips for colour bytes and float images") {
  ScratchDir dir("idx-rt");
  SynthSpec s;
  s.classes = 3;
  s.per_class = 2;
  s.height = 6;
  s.width = 4;
  const auto d = synth_dataset(s, RngStream(3, "idx"));
  save_idx(d, dir / "x.idx", dir / "y.idx");
  const auto back = load_idx(dir / "x.idx", dir / "y.idx");
  CHECK(back.channels == 3);
  CHECK(back.height == 6);
  CHECK(back.width == 4);
  CHECK(*back.labels == *d.labels);
  for (std::size_t i = 0; i < d.pixels->size(); ++i) CHECK(std::abs((*back.pixels)[i] - (*d.pixels)[i]) <= 0.5f / 255.0f + 1e-7f);
  // Already-quantized data survives exactly.
  save_idx(back, dir / "x2.idx");
  CHECK(*load_idx(dir / "x2.idx").pixels == *back.pixels);

  write_file_atomic(dir / "f.idx", encode_idx_float_images(d.count, 3, 6, 4, *d.pixels));
  CHECK(*load_idx(dir / "f.idx").pixels == *d.pixels);
  CHECK(read_file(dir / "f.idx").substr(0, 4) == std::string("\0\0\x0d\x04", 4));

  std::vector<float> out_of_range(d.pixels->begin(), d.pixels->end());
  out_of_range[7] = 1.5f;
  write_file_atomic(dir / "g.idx", encode_idx_float_images(d.count, 3, 6, 4, out_of_range));
  CHECK(message_of([&] { load_idx(dir / "g.idx"); }).find("byte offset " + std::to_string(20 + 7 * 4)) !=
        std::string::npos);
}

TEST_CASE("checkpoint round trip is bitwise and byte-identical") {
  ScratchDir dir("ckpt");
  auto enc = build_encoder<float>(small_conv(), RngStream(4, "ckpt"));
  enc.set_frozen(true);
  const auto head = build_head<float>(6, 3, RngStream(5, "head"));
  save_checkpoint(dir / "m.rinv", enc, &head);
  const auto loaded = load_checkpoint<float>(dir / "m.rinv");
  CHECK(loaded.encoder.frozen());
  CHECK(loaded.encoder.config() == enc.config());
  REQUIRE(loaded.encoder.named_parameters().size() == enc.named_parameters().size());
  for (std::size_t i = 0; i < enc.named_parameters().size(); ++i) {
    const auto& a = enc.named_parameters()[i];
    const auto& b = loaded.encoder.named_parameters()[i];
    CHECK(a.name == b.name);
    CHECK(a.tensor.shape() == b.tensor.shape());
    CHECK(std::equal(a.tensor.data().begin(), a.tensor.data().end(), b.tensor.data().begin()));
  }
  REQUIRE(loaded.head.has_value());
  CHECK(std::equal(head.weight.data().begin(), head.weight.data().end(), loaded.head->weight.data().begin()));

  RngStream rng(6, "x");
  auto x = rinv::testing::random_tensor<float>({3, 3, 8, 8}, rng);
  const ImageBatch<float> batch{x, true, false};
  const auto e1 = enc.embed(batch), e2 = loaded.encoder.embed(batch);
  CHECK(std::equal(e1.data().begin(), e1.data().end(), e2.data().begin()));

  save_checkpoint(dir / "again.rinv", loaded.encoder, &*loaded.head);
  CHECK(read_file(dir / "again.rinv") == read_file(dir / "m.rinv"));
  CHECK(read_file(dir / "again.rinv.json") == read_file(dir / "m.rinv.json"));
  CHECK_FALSE(std::filesystem::exists(dir / "m.rinv.tmp"));

  // f64 models use the 64-bit payload and round-trip exactly too.
  const auto wide = build_encoder<double>(small_conv(), RngStream(4, "ckpt"));
  save_checkpoint<double>(dir / "w.rinv", wide);
  const auto wide_back = load_checkpoint<double>(dir / "w.rinv");
  CHECK_FALSE(wide_back.head.has_value());
  for (std::size_t i = 0; i < wide.named_parameters().size(); ++i) {
    const auto& a = wide.named_parameters()[i].tensor;
    CHECK(std::equal(a.data().begin(), a.data().end(), wide_back.encoder.named_parameters()[i].tensor.data().begin()));
  }
}

TEST_CASE("checkpoint fault injection") {
  ScratchDir dir("ckpt-bad");
  const auto enc = build_encoder<float>(small_conv(), RngStream(4, "ckpt"));
  save_checkpoint<float>(dir / "m.rinv", enc);
  const std::string good = read_file(dir / "m.rinv");
  const std::string side = read_file(dir / "m.rinv.json");

  // Locate the conv2.weight payload and cut the file inside it.
  const auto at = good.find("conv2.weight");
  REQUIRE(at != std::string::npos);
  write_raw(dir / "t.rinv", good.substr(0, at + 40));
  write_raw(dir / "t.rinv.json", side);
  const auto msg = message_of([&] { load_checkpoint<float>(dir / "t.rinv"); });
  CHECK(msg.find("conv2.weight") != std::string::npos);
  CHECK(msg.find("truncated") != std::string::npos);

  write_raw(dir / "t.rinv", good.substr(0, at + 3));
  CHECK(message_of([&] { load_checkpoint<float>(dir / "t.rinv"); }).find("truncated") != std::string::npos);

  std::string version = good;
  version[4] = 9;
  write_raw(dir / "t.rinv", version);
  CHECK(message_of([&] { load_checkpoint<float>(dir / "t.rinv"); }).find("version 9") != std::string::npos);

  std::string magic = good;
  magic[0] = 'X';
  write_raw(dir / "t.rinv", magic);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "t.rinv"), FormatError);

  write_raw(dir / "t.rinv", good + "zz");
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "t.rinv"), FormatError);

  // Sidecar describing a different architecture.
  auto other = small_conv();
  other.embed_dim = 7;
  write_raw(dir / "t.rinv", good);
  write_raw(dir / "t.rinv.json", Json{{"encoder", to_json(other)}, {"frozen", false}}.dump());
  CHECK(message_of([&] { load_checkpoint<float>(dir / "t.rinv"); }).find("fc.weight") != std::string::npos);

  std::filesystem::remove(dir / "t.rinv.json");
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "t.rinv"), FormatError);
}

TEST_CASE("operator, loss and train config JSON") {
  const auto ranged = ForwardOperator::mask(Severity::range(0.5, 0.95));
  const Json j = to_json(ranged);
  CHECK(j == Json::parse(R"({"kind":"mask","p":{"range":[0.5,0.95]},"exact_count":false})"));
  CHECK(operator_from_json(j) == ranged);
  const auto compose = ForwardOperator::compose(
      {ForwardOperator::blur(5, Severity::fixed(1.5)), ForwardOperator::noise(Severity::range(0.1, 0.2))});
  CHECK(operator_from_json(to_json(compose)) == compose);
  CHECK(operator_from_json(Json::parse(R"({"kind":"mask","p":0.9})")) == ForwardOperator::mask(Severity::fixed(0.9)));
  CHECK_THROWS_AS(operator_from_json(Json::parse(R"({"kind":"warp"})")), ConfigError);
  CHECK_THROWS_AS(operator_from_json(Json::parse(R"({"kind":"mask","p":1.3})")), ConfigError);
  CHECK_THROWS_AS(operator_from_json(Json::parse(R"({"kind":"blur","kernel_size":4,"std":1})")), ConfigError);
  CHECK_THROWS_AS(operator_from_json(Json::parse(R"({"kind":"mask","p":"high"})")), ConfigError);

  const LossSpec l{LossFamily::Contrastive, UniformityVariant::NTXent, 0.05};
  CHECK(to_json(l) == Json::parse(R"({"family":"contrastive","variant":"nt_xent","tau":0.05})"));
  CHECK(loss_from_json(to_json(l)) == l);
  CHECK_THROWS_AS(loss_from_json(Json::parse(R"({"tau":0})")), ConfigError);

  TrainConfig c = TrainConfig::probe_defaults();
  c.op = compose;
  c.label_fraction = 0.1;
  c.batch_size = 8;
  c.precision = Precision::F64;
  c.norm_mean = {0.4, 0.5, 0.6};
  c.norm_std = {0.2, 0.25, 0.3};
  CHECK(train_config_from_json(to_json(c), TrainConfig{}) == c);
  CHECK_THROWS_AS(train_config_from_json(Json::parse(R"({"epochs":0})"), TrainConfig{}), ConfigError);
}

TEST_CASE("experiment config round trip and inheritance") {
  ExperimentConfig a;
  CHECK(experiment_from_json(to_json(a)) == a);

  ExperimentConfig b;
  b.name = "desk";
  b.train_data.kind = "idx";
  b.train_data.images = "train-images.idx";
  b.train_data.labels = "train-labels.idx";
  b.test_data.synth.per_class = 7;
  b.test_data.synth_seed = 99;
  b.encoder.architecture = Architecture::MLP;
  b.encoder.widths = {64, 32};
  b.op = ForwardOperator::noise(Severity::range(0.1, 0.3));
  b.loss.variant = UniformityVariant::StudentVsBoth;
  b.student.op = b.op;
  b.eval.op = ForwardOperator::blur(5, Severity::fixed(2.0));
  b.eval.severities = {0.96, 0.97};
  b.eval.metrics = {"top1", "top5"};
  b.set_seed(123);
  b.set_precision(Precision::F64);
  b.output_dir = "/tmp/out";
  CHECK(experiment_from_json(to_json(b)) == b);
  CHECK(experiment_from_json(Json::parse(to_json(b).dump())) == b);

  const auto c = experiment_from_json(Json::parse(R"({
    "seed": 7,
    "operator": {"kind": "mask", "p": {"range": [0.5, 0.95]}},
    "loss": {"family": "mse", "variant": "student_vs_teacher", "tau": 0.2},
    "student": {"epochs": 3},
    "probe": {"label_fraction": 0.5}
  })"));
  CHECK(c.student.epochs == 3);
  CHECK(c.student.op == ForwardOperator::mask(Severity::range(0.5, 0.95)));
  CHECK(c.student.loss.family == LossFamily::MSEOnly);
  CHECK(c.student.loss.tau == 0.2);
  CHECK(c.probe.op == c.student.op);
  CHECK(c.probe.label_fraction == 0.5);
  CHECK(c.baseline.op == c.student.op);
  CHECK(c.teacher.op == ForwardOperator::identity());
  CHECK(c.teacher.seed == 7);
  CHECK(c.eval_operator() == c.op);

  CHECK_THROWS_AS(experiment_from_json(Json::parse(R"({"eval": {"metrics": ["top3"]}})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(Json::parse(R"({"train_data": {"kind": "png"}})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(Json::parse("[1, 2]")), ConfigError);
  // Misspelled keys are rejected rather than silently defaulted.
  CHECK_THROWS_AS(experiment_from_json(Json::parse(R"({"sead": 3})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(Json::parse(R"({"train_data": {"kind": "synth", "synth": {}}})")),
                  ConfigError);
  CHECK_THROWS_AS(experiment_from_json(Json::parse(R"({"train_data": {"spec": {"clases": 3}}})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(Json::parse(R"({"student": {"epoch": 3}})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(Json::parse(R"({"encoder": {"width": [4]}})")), ConfigError);
  CHECK_THROWS_AS(experiment_from_json(Json::parse(R"({"eval": {"plots": false}})")), ConfigError);
  ScratchDir dir("cfg");
  write_raw(dir / "broken.json", "{\"seed\": ");
  CHECK_THROWS_AS(load_experiment(dir / "broken.json"), ConfigError);
}

TEST_CASE("run record and report serialization") {
  RunRecord r;
  r.pipeline = "student";
  r.config = TrainConfig::student_defaults();
  r.config.op = ForwardOperator::mask(Severity::fixed(0.9));
  r.epoch_losses = {5.5, 4.25, 0.1 + 0.2};
  r.step_lrs = {3e-4, 1.5e-4, 0.0};
  r.wall_seconds = 1.25;
  r.checkpoint_path = "out/student.rinv";
  r.seed = 3;
  r.stream_label = "student";
  r.steps = 3;
  r.teacher_clean_batches = r.student_corrupted_batches = 3;
  const auto back = run_record_from_json(Json::parse(to_json(r).dump()));
  CHECK(back.config == r.config);
  CHECK(back.epoch_losses == r.epoch_losses);
  CHECK(back.step_lrs == r.step_lrs);
  CHECK(back.checkpoint_path == r.checkpoint_path);
  CHECK(back.student_corrupted_batches == 3);

  EvalReport blur;
  blur.model_id = "student";
  blur.operator_desc = "blur(n=5,std=2)";
  blur.severity = 2.0;
  blur.metric = "top1";
  blur.values = {0.5};
  blur.mean = 0.5;
  blur.n_instantiations = 1;
  blur.seed = 9;
  EvalReport mask = blur;
  mask.operator_desc = "mask(p=0.9)";
  mask.severity.reset();
  mask.values = {0.25, 0.75};
  mask.mean = 0.5;
  mask.stderr_value = 0.25;
  mask.n_instantiations = 2;
  const std::string csv = reports_csv({blur, mask});
  CHECK(csv ==
        "model,operator,severity,metric,mean,stderr,n,seed\n"
        "student,\"blur(n=5,std=2)\",2,top1,0.5,,1,9\n"
        "student,mask(p=0.9),,top1,0.5,0.25,2,9\n");
  const Json js = reports_json({blur, mask});
  CHECK(js[0]["stderr"].is_null());
  CHECK(js[1]["severity"].is_null());
  const auto rb = eval_report_from_json(js[1]);
  CHECK(rb.values == mask.values);
  CHECK(rb.stderr_value == mask.stderr_value);
  CHECK_FALSE(eval_report_from_json(js[0]).stderr_value.has_value());

  ScratchDir dir("reports");
  write_reports(dir.path(), "eval", {blur, mask});
  CHECK(read_file(dir / "eval.csv") == csv);
  CHECK(Json::parse(read_file(dir / "eval.json")) == js);
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir.path())) {
    (void)entry;
    ++files;
  }
  CHECK(files == 2);

  const std::string svg =
      svg_line_chart("acc vs p", "p", "accuracy", {{"student", {{0.96, 0.8}, {0.97, 0.7}}}, {"mse <1>", {}}});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("mse &lt;1&gt;") != std::string::npos);
}
