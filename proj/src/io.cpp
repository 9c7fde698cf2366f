#include "rinv/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <unistd.h>

namespace rinv {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ignored;
      fs::remove(tmp, ignored);
      throw Error("write failed for " + tmp.string());
    }
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- IDX -----------------------------------------------------------------

namespace {

struct Reader {
  const std::string& bytes;
  std::string source;
  std::size_t pos = 0;

  void need(std::size_t n, const std::string& what) const {
    if (pos + n > bytes.size()) {
      throw FormatError(source + ": truncated while reading " + what + " at byte offset " + std::to_string(pos) +
                        " (need " + std::to_string(n) + " bytes, " + std::to_string(bytes.size() - pos) + " left)");
    }
  }
  std::uint32_t u32_be(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)]);
    pos += 4;
    return v;
  }
  std::uint32_t u32_le(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)]);
    pos += 4;
    return v;
  }
  std::uint64_t u64_le(const std::string& what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)]);
    pos += 8;
    return v;
  }
};

void put_u32_be(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xFF));
}

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<char>((v >> s) & 0xFF));
}

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int s = 0; s < 64; s += 8) out.push_back(static_cast<char>((v >> s) & 0xFF));
}

std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xFFFFFFFFu) throw FormatError(std::string(what) + " does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

Dataset load_idx(const fs::path& images, const std::optional<fs::path>& labels, const std::string& name,
                 const std::string& split) {
  const std::string bytes = read_file(images);
  Reader r{bytes, images.string()};
  const std::uint32_t magic = r.u32_be("magic");
  std::size_t n = 0, c = 1, h = 0, w = 0;
  if (magic == kIdxImages3) {
    n = r.u32_be("count");
    h = r.u32_be("rows");
    w = r.u32_be("columns");
  } else if (magic == kIdxImages4 || magic == kIdxFloat4) {
    n = r.u32_be("count");
    c = r.u32_be("channels");
    h = r.u32_be("rows");
    w = r.u32_be("columns");
  } else {
    throw FormatError(images.string() + ": bad image magic " + hex(magic) + " at byte offset 0");
  }
  if (n == 0 || c == 0 || h == 0 || w == 0) {
    throw FormatError(images.string() + ": zero dimension in header ending at byte offset " + std::to_string(r.pos));
  }
  const std::size_t total = n * c * h * w;
  auto px = std::make_shared<std::vector<float>>(total);
  if (magic == kIdxFloat4) {
    r.need(total * 4, "float pixels");
    for (std::size_t i = 0; i < total; ++i) {
      const std::size_t at = r.pos;
      const float v = std::bit_cast<float>(r.u32_be("pixel"));
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw FormatError(images.string() + ": pixel value " + std::to_string(v) + " outside [0, 1] at byte offset " +
                          std::to_string(at));
      }
      (*px)[i] = v;
    }
  } else {
    r.need(total, "pixels");
    for (std::size_t i = 0; i < total; ++i)
      (*px)[i] = static_cast<float>(static_cast<unsigned char>(bytes[r.pos + i])) / 255.0f;
    r.pos += total;
  }
  if (r.pos != bytes.size()) {
    throw FormatError(images.string() + ": " + std::to_string(bytes.size() - r.pos) +
                      " trailing bytes at byte offset " + std::to_string(r.pos));
  }

  Dataset d;
  d.name = name;
  d.split = split;
  d.count = n;
  d.channels = c;
  d.height = h;
  d.width = w;
  d.pixels = std::move(px);
  if (labels) {
    const std::string lb = read_file(*labels);
    Reader lr{lb, labels->string()};
    const std::uint32_t lm = lr.u32_be("magic");
    if (lm != kIdxLabels) throw FormatError(labels->string() + ": bad label magic " + hex(lm) + " at byte offset 0");
    const std::size_t ln = lr.u32_be("count");
    if (ln != n) {
      throw FormatError(labels->string() + ": label count " + std::to_string(ln) + " does not match image count " +
                        std::to_string(n) + " (header field at byte offset 4)");
    }
    lr.need(ln, "labels");
    std::vector<int> y(ln);
    int max_label = 0;
    for (std::size_t i = 0; i < ln; ++i) {
      y[i] = static_cast<unsigned char>(lb[lr.pos + i]);
      max_label = std::max(max_label, y[i]);
    }
    lr.pos += ln;
    if (lr.pos != lb.size()) {
      throw FormatError(labels->string() + ": trailing bytes at byte offset " + std::to_string(lr.pos));
    }
    d.labels = std::move(y);
    d.class_count = static_cast<std::size_t>(max_label) + 1;
  }
  d.validate();
  return d;
}

std::string encode_idx_images(const Dataset& data) {
  std::string out;
  if (data.channels == 1) {
    put_u32_be(out, kIdxImages3);
  } else {
    put_u32_be(out, kIdxImages4);
  }
  put_u32_be(out, checked_u32(data.count, "count"));
  if (data.channels != 1) put_u32_be(out, checked_u32(data.channels, "channels"));
  put_u32_be(out, checked_u32(data.height, "rows"));
  put_u32_be(out, checked_u32(data.width, "columns"));
  for (float v : *data.pixels) out.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return out;
}

std::string encode_idx_float_images(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                                    const std::vector<float>& values) {
  if (values.size() != n * c * h * w) throw DimensionError("encode_idx_float_images: size mismatch");
  std::string out;
  put_u32_be(out, kIdxFloat4);
  for (std::size_t v : {n, c, h, w}) put_u32_be(out, checked_u32(v, "dimension"));
  for (float v : values) put_u32_be(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

std::string encode_idx_labels(const std::vector<int>& labels) {
  std::string out;
  put_u32_be(out, kIdxLabels);
  put_u32_be(out, checked_u32(labels.size(), "count"));
  for (int y : labels) {
    if (y < 0 || y > 255) throw FormatError("IDX labels must fit in one byte, got " + std::to_string(y));
    out.push_back(static_cast<char>(y));
  }
  return out;
}

void save_idx(const Dataset& data, const fs::path& images, const std::optional<fs::path>& labels) {
  write_file_atomic(images, encode_idx_images(data));
  if (labels) write_file_atomic(*labels, encode_idx_labels(data.require_labels()));
}

// ---- JSON ----------------------------------------------------------------

namespace {

template <typename V>
V get_or(const Json& j, const char* key, V fallback) {
  return j.contains(key) ? j.at(key).get<V>() : fallback;
}

const Json& require_key(const Json& j, const char* key, const char* where) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(std::string(where) + ": missing key '" + key + "'");
  return j.at(key);
}

// Wraps nlohmann type errors as ConfigError.
template <typename F>
auto config_guard(const char* where, F&& f) {
  try {
    return f();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string(where) + ": " + e.what());
  }
}

}  // namespace

Json to_json(const Severity& s) {
  if (s.ranged) return Json{{"range", {s.lo, s.hi}}};
  return s.lo;
}

Severity severity_from_json(const Json& j) {
  if (j.is_number()) return Severity::fixed(j.get<double>());
  if (j.is_object() && j.contains("range") && j.at("range").is_array() && j.at("range").size() == 2) {
    return Severity::range(j.at("range")[0].get<double>(), j.at("range")[1].get<double>());
  }
  throw ConfigError("severity must be a number or {\"range\": [lo, hi]}");
}

Json to_json(const ForwardOperator& op) {
  switch (op.kind) {
    case OperatorKind::Identity:
      return {{"kind", "identity"}};
    case OperatorKind::RandomMask:
      return {{"kind", "mask"}, {"p", to_json(op.mask_fraction)}, {"exact_count", op.exact_count}};
    case OperatorKind::GaussianNoise:
      return {{"kind", "noise"}, {"sigma", to_json(op.noise_std)}};
    case OperatorKind::GaussianBlur:
      return {{"kind", "blur"}, {"kernel_size", op.blur_kernel_size}, {"std", to_json(op.blur_std)}};
    case OperatorKind::Compose: {
      Json parts = Json::array();
      for (const auto& p : op.parts) parts.push_back(to_json(p));
      return {{"kind", "compose"}, {"parts", parts}};
    }
  }
  return {};
}

ForwardOperator operator_from_json(const Json& j) {
  return config_guard("operator", [&] {
    const std::string kind = require_key(j, "kind", "operator").get<std::string>();
    try {
      if (kind == "identity") return ForwardOperator::identity();
      if (kind == "mask") {
        return ForwardOperator::mask(severity_from_json(require_key(j, "p", "mask")), get_or(j, "exact_count", false));
      }
      if (kind == "noise") return ForwardOperator::noise(severity_from_json(require_key(j, "sigma", "noise")));
      if (kind == "blur") {
        return ForwardOperator::blur(require_key(j, "kernel_size", "blur").get<int>(),
                                     severity_from_json(require_key(j, "std", "blur")));
      }
      if (kind == "compose") {
        std::vector<ForwardOperator> parts;
        for (const auto& p : require_key(j, "parts", "compose")) parts.push_back(operator_from_json(p));
        return ForwardOperator::compose(std::move(parts));
      }
    } catch (const DomainError& e) {
      throw ConfigError(std::string("operator: ") + e.what());
    }
    throw ConfigError("unknown operator kind '" + kind + "'");
  });
}

Json to_json(const LossSpec& spec) {
  return {{"family", to_string(spec.family)}, {"variant", to_string(spec.variant)}, {"tau", spec.tau}};
}

LossSpec loss_from_json(const Json& j) {
  return config_guard("loss", [&] {
    LossSpec s;
    s.family = loss_family_from_string(get_or<std::string>(j, "family", to_string(s.family)));
    s.variant = uniformity_variant_from_string(get_or<std::string>(j, "variant", to_string(s.variant)));
    s.tau = get_or(j, "tau", s.tau);
    try {
      s.validate();
    } catch (const DomainError& e) {
      throw ConfigError(std::string("loss: ") + e.what());
    }
    return s;
  });
}

std::string to_string(Architecture a) { return a == Architecture::SmallConv ? "small_conv" : "mlp"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "small_conv") return Architecture::SmallConv;
  if (s == "mlp") return Architecture::MLP;
  throw ConfigError("unknown architecture '" + s + "'");
}

Json to_json(const EncoderConfig& c) {
  return {{"architecture", to_string(c.architecture)},
          {"channels", c.channels},
          {"height", c.height},
          {"width", c.width},
          {"embed_dim", c.embed_dim},
          {"widths", c.widths},
          {"normalize_output", c.normalize_output},
          {"init", c.init == InitScheme::FanIn ? "fan_in" : "zero"}};
}

namespace {

void reject_unknown_keys(const Json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw ConfigError(where + ": unknown key '" + key + "'");
}

}  // namespace

EncoderConfig encoder_config_from_json(const Json& j) {
  return config_guard("encoder", [&] {
    reject_unknown_keys(
        j, {"architecture", "channels", "height", "width", "embed_dim", "widths", "normalize_output", "init"},
        "encoder");
    EncoderConfig c;
    c.architecture = architecture_from_string(get_or<std::string>(j, "architecture", to_string(c.architecture)));
    c.channels = get_or(j, "channels", c.channels);
    c.height = get_or(j, "height", c.height);
    c.width = get_or(j, "width", c.width);
    c.embed_dim = get_or(j, "embed_dim", c.embed_dim);
    c.widths = get_or(j, "widths", c.widths);
    c.normalize_output = get_or(j, "normalize_output", c.normalize_output);
    const std::string init = get_or<std::string>(j, "init", "fan_in");
    if (init != "fan_in" && init != "zero") throw ConfigError("unknown init scheme '" + init + "'");
    c.init = init == "zero" ? InitScheme::Zero : InitScheme::FanIn;
    c.validate();
    return c;
  });
}

Json to_json(const SynthSpec& s) {
  return {{"classes", s.classes},         {"per_class", s.per_class}, {"channels", s.channels},
          {"height", s.height},           {"width", s.width},         {"pixel_noise", s.pixel_noise},
          {"tint", s.tint},               {"class_offset", s.class_offset}, {"shift", s.shift},
          {"split", s.split}};
}

SynthSpec synth_spec_from_json(const Json& j) {
  return config_guard("synth", [&] {
    reject_unknown_keys(j,
                        {"classes", "per_class", "channels", "height", "width", "pixel_noise", "tint", "class_offset",
                         "shift", "split"},
                        "synth spec");
    SynthSpec s;
    s.classes = get_or(j, "classes", s.classes);
    s.per_class = get_or(j, "per_class", s.per_class);
    s.channels = get_or(j, "channels", s.channels);
    s.height = get_or(j, "height", s.height);
    s.width = get_or(j, "width", s.width);
    s.pixel_noise = get_or(j, "pixel_noise", s.pixel_noise);
    s.tint = get_or(j, "tint", s.tint);
    s.class_offset = get_or(j, "class_offset", s.class_offset);
    s.shift = get_or(j, "shift", s.shift);
    s.split = get_or(j, "split", s.split);
    return s;
  });
}

Json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_max", c.lr_max},
          {"weight_decay", c.weight_decay},
          {"loss", to_json(c.loss)},
          {"operator", to_json(c.op)},
          {"seed", c.seed},
          {"label_fraction", c.label_fraction},
          {"precision", to_string(c.precision)},
          {"augment_pad", c.augment_pad},
          {"norm_mean", c.norm_mean},
          {"norm_std", c.norm_std}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
  return config_guard("train config", [&] {
    reject_unknown_keys(j,
                        {"epochs", "batch_size", "lr_max", "weight_decay", "loss", "operator", "seed", "label_fraction",
                         "precision", "augment_pad", "norm_mean", "norm_std"},
                        "train config");
    c.epochs = get_or(j, "epochs", c.epochs);
    c.batch_size = get_or(j, "batch_size", c.batch_size);
    c.lr_max = get_or(j, "lr_max", c.lr_max);
    c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
    if (j.contains("loss")) c.loss = loss_from_json(j.at("loss"));
    if (j.contains("operator")) c.op = operator_from_json(j.at("operator"));
    c.seed = get_or(j, "seed", c.seed);
    c.label_fraction = get_or(j, "label_fraction", c.label_fraction);
    if (j.contains("precision")) c.precision = precision_from_string(j.at("precision").get<std::string>());
    c.augment_pad = get_or(j, "augment_pad", c.augment_pad);
    c.norm_mean = get_or(j, "norm_mean", c.norm_mean);
    c.norm_std = get_or(j, "norm_std", c.norm_std);
    c.validate();
    return c;
  });
}

Json to_json(const RunRecord& r) {
  return {{"pipeline", r.pipeline},
          {"config", to_json(r.config)},
          {"epoch_losses", r.epoch_losses},
          {"step_lrs", r.step_lrs},
          {"wall_seconds", r.wall_seconds},
          {"checkpoint_path", r.checkpoint_path},
          {"seed", r.seed},
          {"stream_label", r.stream_label},
          {"steps", r.steps},
          {"teacher_clean_batches", r.teacher_clean_batches},
          {"student_corrupted_batches", r.student_corrupted_batches}};
}

RunRecord run_record_from_json(const Json& j) {
  return config_guard("run record", [&] {
    RunRecord r;
    r.pipeline = j.at("pipeline").get<std::string>();
    r.config = train_config_from_json(j.at("config"), TrainConfig{});
    r.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
    r.step_lrs = j.at("step_lrs").get<std::vector<double>>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.checkpoint_path = j.at("checkpoint_path").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.stream_label = j.at("stream_label").get<std::string>();
    r.steps = j.at("steps").get<std::size_t>();
    r.teacher_clean_batches = j.at("teacher_clean_batches").get<std::size_t>();
    r.student_corrupted_batches = j.at("student_corrupted_batches").get<std::size_t>();
    return r;
  });
}

Json to_json(const EvalReport& r) {
  return {{"model", r.model_id},
          {"operator", r.operator_desc},
          {"severity", r.severity ? Json(*r.severity) : Json(nullptr)},
          {"metric", r.metric},
          {"values", r.values},
          {"mean", r.mean},
          {"stderr", r.stderr_value ? Json(*r.stderr_value) : Json(nullptr)},
          {"n_instantiations", r.n_instantiations},
          {"seed", r.seed}};
}

EvalReport eval_report_from_json(const Json& j) {
  return config_guard("eval report", [&] {
    EvalReport r;
    r.model_id = j.at("model").get<std::string>();
    r.operator_desc = j.at("operator").get<std::string>();
    if (!j.at("severity").is_null()) r.severity = j.at("severity").get<double>();
    r.metric = j.at("metric").get<std::string>();
    r.values = j.at("values").get<std::vector<double>>();
    r.mean = j.at("mean").get<double>();
    if (!j.at("stderr").is_null()) r.stderr_value = j.at("stderr").get<double>();
    r.n_instantiations = j.at("n_instantiations").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
  });
}

// ---- experiment ----------------------------------------------------------

namespace {

Json to_json(const DataSource& d) {
  if (d.kind == "idx") return {{"kind", "idx"}, {"images", d.images}, {"labels", d.labels}};
  return {{"kind", "synth"}, {"spec", to_json(d.synth)}, {"seed", d.synth_seed}};
}

DataSource data_source_from_json(const Json& j) {
  reject_unknown_keys(j, {"kind", "images", "labels", "spec", "seed"}, "data source");
  DataSource d;
  d.kind = get_or<std::string>(j, "kind", "synth");
  if (d.kind == "idx") {
    d.images = require_key(j, "images", "idx data").get<std::string>();
    d.labels = get_or<std::string>(j, "labels", "");
  } else if (d.kind == "synth") {
    if (j.contains("spec")) d.synth = synth_spec_from_json(j.at("spec"));
    d.synth_seed = get_or<std::uint64_t>(j, "seed", 0);
  } else {
    throw ConfigError("unknown data kind '" + d.kind + "'");
  }
  return d;
}

}  // namespace

Dataset load_data(const DataSource& source, const fs::path& base_dir) {
  if (source.kind == "synth") return synth_dataset(source.synth, RngStream(source.synth_seed, "synth/" + source.synth.split));
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base_dir.empty() ? fs::path(p) : base_dir / p; };
  std::optional<fs::path> labels;
  if (!source.labels.empty()) labels = resolve(source.labels);
  return load_idx(resolve(source.images), labels, fs::path(source.images).stem().string());
}

EvalOptions ExperimentConfig::eval_options(const std::string& model_id) const {
  EvalOptions o;
  o.n_instantiations = eval.n_instantiations;
  o.batch_size = eval.batch_size;
  o.norm_mean = probe.norm_mean;
  o.norm_std = probe.norm_std;
  o.model_id = model_id;
  return o;
}

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  for (TrainConfig* c : {&teacher, &student, &probe, &baseline}) c->seed = s;
}

void ExperimentConfig::set_precision(Precision p) {
  for (TrainConfig* c : {&teacher, &student, &probe, &baseline}) c->precision = p;
}

Json to_json(const ExperimentConfig& c) {
  Json eval = {{"n_instantiations", c.eval.n_instantiations},
               {"batch_size", c.eval.batch_size},
               {"severities", c.eval.severities},
               {"label_fractions", c.eval.label_fractions},
               {"metrics", c.eval.metrics},
               {"plot", c.eval.plot}};
  if (c.eval.op) eval["operator"] = to_json(*c.eval.op);
  return {{"name", c.name},
          {"train_data", to_json(c.train_data)},
          {"test_data", to_json(c.test_data)},
          {"encoder", to_json(c.encoder)},
          {"operator", to_json(c.op)},
          {"loss", to_json(c.loss)},
          {"teacher", to_json(c.teacher)},
          {"student", to_json(c.student)},
          {"probe", to_json(c.probe)},
          {"baseline", to_json(c.baseline)},
          {"eval", eval},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"teacher_checkpoint", c.teacher_checkpoint},
          {"student_checkpoint", c.student_checkpoint},
          {"probe_checkpoint", c.probe_checkpoint}};
}

ExperimentConfig experiment_from_json(const Json& j) {
  return config_guard("experiment", [&] {
    reject_unknown_keys(j,
                        {"name", "train_data", "test_data", "encoder", "operator", "loss", "teacher", "student",
                         "probe", "baseline", "eval", "seed", "output_dir", "teacher_checkpoint",
                         "student_checkpoint", "probe_checkpoint"},
                        "experiment config");
    ExperimentConfig c;
    c.name = get_or(j, "name", c.name);
    if (j.contains("train_data")) c.train_data = data_source_from_json(j.at("train_data"));
    if (j.contains("test_data")) {
      c.test_data = data_source_from_json(j.at("test_data"));
    } else {
      c.test_data = c.train_data;
      c.test_data.synth.split = "test";
      c.test_data.synth.per_class = std::max<std::size_t>(1, c.train_data.synth.per_class / 5);
    }
    if (j.contains("encoder")) c.encoder = encoder_config_from_json(j.at("encoder"));
    if (j.contains("operator")) c.op = operator_from_json(j.at("operator"));
    if (j.contains("loss")) c.loss = loss_from_json(j.at("loss"));
    c.seed = get_or(j, "seed", c.seed);

    auto section = [&](const char* key, TrainConfig base, bool inherit_op, bool inherit_loss) {
      base.seed = c.seed;
      if (inherit_op) base.op = c.op;
      if (inherit_loss) base.loss = c.loss;
      return j.contains(key) ? train_config_from_json(j.at(key), base) : base;
    };
    c.teacher = section("teacher", TrainConfig::teacher_defaults(), false, false);
    c.student = section("student", TrainConfig::student_defaults(), true, true);
    c.probe = section("probe", TrainConfig::probe_defaults(), true, false);
    c.baseline = section("baseline", TrainConfig::baseline_defaults(), true, false);

    if (j.contains("eval")) {
      const Json& e = j.at("eval");
      reject_unknown_keys(e, {"n_instantiations", "batch_size", "operator", "severities", "label_fractions", "metrics", "plot"},
                          "eval");
      c.eval.n_instantiations = get_or(e, "n_instantiations", c.eval.n_instantiations);
      c.eval.batch_size = get_or(e, "batch_size", c.eval.batch_size);
      if (e.contains("operator")) c.eval.op = operator_from_json(e.at("operator"));
      c.eval.severities = get_or(e, "severities", c.eval.severities);
      c.eval.label_fractions = get_or(e, "label_fractions", c.eval.label_fractions);
      c.eval.metrics = get_or(e, "metrics", c.eval.metrics);
      c.eval.plot = get_or(e, "plot", c.eval.plot);
      for (const auto& m : c.eval.metrics) metric_from_string(m);
      if (c.eval.n_instantiations < 1) throw ConfigError("eval.n_instantiations must be >= 1");
    }
    c.output_dir = get_or(j, "output_dir", c.output_dir);
    c.teacher_checkpoint = get_or(j, "teacher_checkpoint", c.teacher_checkpoint);
    c.student_checkpoint = get_or(j, "student_checkpoint", c.student_checkpoint);
    c.probe_checkpoint = get_or(j, "probe_checkpoint", c.probe_checkpoint);
    return c;
  });
}

ExperimentConfig load_experiment(const fs::path& path) {
  const std::string text = read_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

// ---- checkpoints ---------------------------------------------------------

fs::path sidecar_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p += ".json";
  return p;
}

template <typename T>
void save_checkpoint(const fs::path& path, const EncoderModel<T>& encoder, const LinearHead<T>* head) {
  std::vector<std::pair<std::string, const Tensor<T>*>> entries;
  for (const auto& p : encoder.named_parameters()) entries.emplace_back(p.name, &p.tensor);
  if (head) {
    entries.emplace_back("head.weight", &head->weight);
    entries.emplace_back("head.bias", &head->bias);
  }
  constexpr bool wide = std::is_same_v<T, double>;
  std::string out = "RINV";
  put_u32_le(out, wide ? kCheckpointF64 : kCheckpointF32);
  put_u32_le(out, checked_u32(entries.size(), "entry count"));
  for (const auto& [name, t] : entries) {
    put_u32_le(out, checked_u32(name.size(), "name length"));
    out += name;
    put_u32_le(out, checked_u32(t->rank(), "rank"));
    for (std::size_t d : t->shape()) put_u32_le(out, checked_u32(d, "dimension"));
    for (T v : t->data()) {
      if constexpr (wide) {
        put_u64_le(out, std::bit_cast<std::uint64_t>(v));
      } else {
        put_u32_le(out, std::bit_cast<std::uint32_t>(v));
      }
    }
  }
  Json side = {{"format", "RINV"},
               {"version", wide ? kCheckpointF64 : kCheckpointF32},
               {"encoder", to_json(encoder.config())},
               {"frozen", encoder.frozen()},
               {"head_classes", head ? Json(head->num_classes()) : Json(nullptr)}};
  write_file_atomic(path, out);
  write_file_atomic(sidecar_path(path), side.dump(2) + "\n");
}

template <typename T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  Json side;
  try {
    side = Json::parse(read_file(sidecar_path(path)));
  } catch (const Json::parse_error& e) {
    throw FormatError(sidecar_path(path).string() + ": " + e.what());
  } catch (const DataError&) {
    throw FormatError(path.string() + ": missing JSON sidecar " + sidecar_path(path).string());
  }
  EncoderConfig config;
  try {
    config = encoder_config_from_json(side.at("encoder"));
  } catch (const std::exception& e) {
    throw FormatError(sidecar_path(path).string() + ": bad encoder config: " + e.what());
  }

  Reader r{bytes, path.string()};
  r.need(4, "magic");
  if (bytes.compare(0, 4, "RINV") != 0) throw FormatError(path.string() + ": bad magic at byte offset 0");
  r.pos = 4;
  const std::uint32_t version = r.u32_le("version");
  if (version != kCheckpointF32 && version != kCheckpointF64) {
    throw FormatError(path.string() + ": unsupported format version " + std::to_string(version) +
                      " at byte offset 4");
  }
  const std::size_t width = version == kCheckpointF64 ? 8 : 4;
  const std::uint32_t count = r.u32_le("entry count");

  // Zero-initialized reference fixes the expected names and shapes.
  EncoderConfig ref_config = config;
  ref_config.init = InitScheme::Zero;
  const EncoderModel<T> reference = build_encoder<T>(ref_config, RngStream(0, "checkpoint"));
  std::vector<NamedTensor<T>> params;
  std::optional<LinearHead<T>> head;
  Tensor<T> head_weight, head_bias;
  std::set<std::string> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::string where = "entry " + std::to_string(e);
    const std::uint32_t len = r.u32_le(where + " name length");
    r.need(len, where + " name");
    const std::string name = bytes.substr(r.pos, len);
    r.pos += len;
    const std::string label = "entry '" + name + "'";
    if (!seen.insert(name).second) throw FormatError(path.string() + ": duplicate " + label);
    const std::uint32_t rank = r.u32_le(label + " rank");
    if (rank == 0 || rank > 4) {
      throw FormatError(path.string() + ": " + label + " has invalid rank " + std::to_string(rank));
    }
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.u32_le(label + " dims"));
      numel *= shape.back();
    }
    r.need(numel * width, label + " payload");
    std::vector<T> values(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      if (width == 8) {
        values[i] = static_cast<T>(std::bit_cast<double>(r.u64_le(label)));
      } else {
        values[i] = static_cast<T>(std::bit_cast<float>(r.u32_le(label)));
      }
    }
    Tensor<T> t = Tensor<T>::from_data(shape, std::move(values));
    if (name == "head.weight") {
      head_weight = t;
    } else if (name == "head.bias") {
      head_bias = t;
    } else {
      const Tensor<T>* expected = nullptr;
      for (const auto& p : reference.named_parameters())
        if (p.name == name) expected = &p.tensor;
      if (!expected) throw FormatError(path.string() + ": unexpected " + label + " for this encoder config");
      if (expected->shape() != shape) {
        throw FormatError(path.string() + ": " + label + " has shape " + shape_str(shape) + ", config expects " +
                          shape_str(expected->shape()));
      }
      params.push_back({name, t});
    }
  }
  if (r.pos != bytes.size()) {
    throw FormatError(path.string() + ": trailing bytes at byte offset " + std::to_string(r.pos));
  }
  for (const auto& p : reference.named_parameters()) {
    if (!seen.count(p.name)) throw FormatError(path.string() + ": missing entry '" + p.name + "'");
  }
  // Keep the reference order so re-saving reproduces the file.
  std::vector<NamedTensor<T>> ordered;
  for (const auto& p : reference.named_parameters())
    for (auto& q : params)
      if (q.name == p.name) ordered.push_back(q);
  if (head_weight.defined() != head_bias.defined()) {
    throw FormatError(path.string() + ": head needs both head.weight and head.bias");
  }
  if (head_weight.defined()) {
    if (head_weight.rank() != 2 || head_weight.dim(0) != config.embed_dim || head_bias.rank() != 1 ||
        head_bias.dim(0) != head_weight.dim(1)) {
      throw FormatError(path.string() + ": head shapes do not match embed_dim " + std::to_string(config.embed_dim));
    }
    head = LinearHead<T>{head_weight, head_bias};
  }
  Checkpoint<T> out{EncoderModel<T>(config, std::move(ordered)), std::move(head)};
  out.encoder.set_frozen(side.value("frozen", false));
  return out;
}

// ---- reports -------------------------------------------------------------

namespace {

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '&':
        out += "&amp;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += ch;
    }
  }
  return out;
}

}  // namespace

std::string reports_csv(const std::vector<EvalReport>& reports) {
  std::string out = "model,operator,severity,metric,mean,stderr,n,seed\n";
  for (const auto& r : reports) {
    out += csv_field(r.model_id) + "," + csv_field(r.operator_desc) + "," + (r.severity ? num(*r.severity) : "") +
           "," + csv_field(r.metric) + "," + num(r.mean) + "," + (r.stderr_value ? num(*r.stderr_value) : "") + "," +
           std::to_string(r.n_instantiations) + "," + std::to_string(r.seed) + "\n";
  }
  return out;
}

Json reports_json(const std::vector<EvalReport>& reports) {
  Json arr = Json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  return arr;
}

void write_reports(const fs::path& dir, const std::string& name, const std::vector<EvalReport>& reports) {
  write_file_atomic(dir / (name + ".csv"), reports_csv(reports));
  write_file_atomic(dir / (name + ".json"), reports_json(reports).dump(2) + "\n");
}

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<PlotSeries>& series) {
  const double W = 640, H = 420, left = 70, right = 170, top = 40, bottom = 60;
  double x0 = 1e300, x1 = -1e300, y0 = 0, y1 = 1;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (!(x0 < x1)) {
    x0 = x0 > 1e299 ? 0 : x0 - 0.5;
    x1 = x0 + 1;
  }
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1 - (y - y0) / (y1 - y0)) * ph; };
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4, yv = y0 + (y1 - y0) * t / 4;
    os << "<text x=\"" << px(xv) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
    os << "<text x=\"" << left - 8 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
    os << "<line x1=\"" << left << "\" y1=\"" << py(yv) << "\" x2=\"" << left + pw << "\" y2=\"" << py(yv) << "\" stroke=\"#ddd\"/>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << xml_escape(x_label) << "</text>\n";
  os << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* colour = colours[s % 6];
    auto pts = series[s].points;
    std::sort(pts.begin(), pts.end());
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"2\" points=\"";
    for (const auto& [x, y] : pts) os << px(x) << "," << py(y) << " ";
    os << "\"/>\n";
    for (const auto& [x, y] : pts) os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
    const double ly = top + 10 + 18 * static_cast<double>(s);
    os << "<line x1=\"" << left + pw + 15 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 35 << "\" y2=\"" << ly << "\" stroke=\"" << colour << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 40 << "\" y=\"" << ly + 4 << "\">" << xml_escape(series[s].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

template void save_checkpoint(const fs::path&, const EncoderModel<float>&, const LinearHead<float>*);
template void save_checkpoint(const fs::path&, const EncoderModel<double>&, const LinearHead<double>*);
template Checkpoint<float> load_checkpoint(const fs::path&);
template Checkpoint<double> load_checkpoint(const fs::path&);

}  // namespace rinv
