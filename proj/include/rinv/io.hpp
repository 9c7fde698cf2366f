#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rinv/corruptions.hpp"
#include "rinv/dataset.hpp"
#include "rinv/encoders.hpp"
#include "rinv/evaluation.hpp"
#include "rinv/losses.hpp"
#include "rinv/training.hpp"

namespace rinv {

using Json = nlohmann::json;

// ---- files ---------------------------------------------------------------

/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// ---- IDX -----------------------------------------------------------------

// Magic numbers: 0x0801 labels, 0x0803 N x H x W bytes, 0x0804 N x C x H x W
// bytes, 0x0D04 N x C x H x W big-endian float32.
inline constexpr std::uint32_t kIdxLabels = 0x00000801;
inline constexpr std::uint32_t kIdxImages3 = 0x00000803;
inline constexpr std::uint32_t kIdxImages4 = 0x00000804;
inline constexpr std::uint32_t kIdxFloat4 = 0x00000D04;

/// Loads images (bytes scaled by 1/255; float files taken as-is) and, when
/// given, labels. class_count is max label + 1. Malformed input throws
/// FormatError naming the byte offset.
Dataset load_idx(const std::filesystem::path& images, const std::optional<std::filesystem::path>& labels = {},
                 const std::string& name = "idx", const std::string& split = "train");

/// Byte images round(255 v) with magic 0x0803 for one channel, else 0x0804.
std::string encode_idx_images(const Dataset& data);
/// Float images, magic 0x0D04; used for corrupted outputs.
std::string encode_idx_float_images(std::size_t n, std::size_t c, std::size_t h, std::size_t w,
                                    const std::vector<float>& values);
std::string encode_idx_labels(const std::vector<int>& labels);
void save_idx(const Dataset& data, const std::filesystem::path& images,
              const std::optional<std::filesystem::path>& labels = {});

// ---- JSON conversions ----------------------------------------------------

Json to_json(const Severity& s);
Severity severity_from_json(const Json& j);
Json to_json(const ForwardOperator& op);
ForwardOperator operator_from_json(const Json& j);
Json to_json(const LossSpec& spec);
LossSpec loss_from_json(const Json& j);
Json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const Json& j);
Json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const Json& j);
Json to_json(const TrainConfig& c);
// Absent keys keep the values already in `base`.
TrainConfig train_config_from_json(const Json& j, TrainConfig base);
Json to_json(const RunRecord& r);
RunRecord run_record_from_json(const Json& j);
Json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const Json& j);

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

// ---- experiment configuration -------------------------------------------

struct DataSource {
  std::string kind = "synth";  // synth | idx
  SynthSpec synth;
  std::uint64_t synth_seed = 0;
  std::string images;
  std::string labels;

  bool operator==(const DataSource&) const = default;
};

Dataset load_data(const DataSource& source, const std::filesystem::path& base_dir = {});

struct EvalProtocol {
  std::size_t n_instantiations = 10;
  std::size_t batch_size = 256;
  // Evaluation operator; defaults to the experiment operator.
  std::optional<ForwardOperator> op;
  std::vector<double> severities;
  std::vector<double> label_fractions{0.05, 0.1, 0.25, 0.5, 1.0};
  std::vector<std::string> metrics{"top1"};
  bool plot = true;

  bool operator==(const EvalProtocol&) const = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DataSource train_data;
  DataSource test_data;
  EncoderConfig encoder;
  ForwardOperator op = ForwardOperator::mask(Severity::fixed(0.9));
  LossSpec loss;
  TrainConfig teacher = TrainConfig::teacher_defaults();
  TrainConfig student = TrainConfig::student_defaults();
  TrainConfig probe = TrainConfig::probe_defaults();
  TrainConfig baseline = TrainConfig::baseline_defaults();
  EvalProtocol eval;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  // Inputs for downstream stages; relative paths resolve against output_dir.
  std::string teacher_checkpoint = "teacher.rinv";
  std::string student_checkpoint = "student.rinv";
  std::string probe_checkpoint = "probe.rinv";

  bool operator==(const ExperimentConfig&) const = default;

  ForwardOperator eval_operator() const { return eval.op.value_or(op); }
  EvalOptions eval_options(const std::string& model_id) const;
  // Applies a seed override to the experiment and every pipeline.
  void set_seed(std::uint64_t s);
  void set_precision(Precision p);
};

Json to_json(const ExperimentConfig& c);
/// Pipeline sections inherit the top-level operator, loss and seed when they
/// omit them; the teacher always trains on clean images.
ExperimentConfig experiment_from_json(const Json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

// ---- checkpoints ---------------------------------------------------------

// "RINV" | version u32 | entry count u32 | per entry: name length u32, name,
// rank u32, dims u32[rank], payload. Version 1 stores float32 payloads,
// version 2 float64. All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointF32 = 1;
inline constexpr std::uint32_t kCheckpointF64 = 2;

template <typename T>
struct Checkpoint {
  EncoderModel<T> encoder;
  std::optional<LinearHead<T>> head;
};

/// Writes `path` and the JSON sidecar `path + ".json"` (encoder config,
/// frozen flag, head presence).
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const EncoderModel<T>& encoder,
                     const LinearHead<T>* head = nullptr);

/// Loads a checkpoint written in either precision into T. Structural
/// problems throw FormatError naming the failing entry.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

// ---- reports -------------------------------------------------------------

/// One row per report: model, operator, severity, metric, mean, stderr, n, seed.
std::string reports_csv(const std::vector<EvalReport>& reports);
Json reports_json(const std::vector<EvalReport>& reports);
/// Writes name.csv and name.json under dir.
void write_reports(const std::filesystem::path& dir, const std::string& name, const std::vector<EvalReport>& reports);

struct PlotSeries {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

/// Minimal SVG line chart.
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<PlotSeries>& series);

}  // namespace rinv
