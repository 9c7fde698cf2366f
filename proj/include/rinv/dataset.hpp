#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rinv/corruptions.hpp"
#include "rinv/rng.hpp"

namespace rinv {

/// Images stored as float in [0, 1] (N x C x H x W), optional integer labels.
/// Pixel storage is shared between copies, so subsets of labels or
/// label-free views are cheap.
struct Dataset {
  std::string name;
  std::string split = "train";
  std::size_t count = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::shared_ptr<const std::vector<float>> pixels;
  std::optional<std::vector<int>> labels;
  std::size_t class_count = 0;

  std::size_t image_size() const { return channels * height * width; }
  const float* image(std::size_t i) const { return pixels->data() + i * image_size(); }
  bool has_labels() const { return labels.has_value(); }
  const std::vector<int>& require_labels() const;

  // Throws DataError when labels or pixel values break the invariants.
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  Dataset without_labels() const;
};

template <typename T>
ImageBatch<T> gather_batch(const Dataset& data, std::span<const std::size_t> indices);

std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices);

/// Random crop from a zero-padded image plus random horizontal flip,
/// drawn per image from rng.child(b).
template <typename T>
ImageBatch<T> augment_crop_flip(const ImageBatch<T>& batch, std::size_t pad, const RngStream& rng);

/// Class-stratified subsample: round(fraction * class size) per class, at
/// least one when the class is nonempty. Throws DataError listing classes left
/// without samples.
std::vector<std::size_t> stratified_subset(const Dataset& data, double fraction, RngStream rng);

/// Index batches covering [0, n) in `order`, the last one possibly short.
std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t batch_size,
                                                   bool drop_last);

struct SynthSpec {
  std::size_t classes = 10;
  std::size_t per_class = 500;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double pixel_noise = 0.05;
  // Strength of the per-class background colour.
  double tint = 0.1;
  // Pattern ids are class + class_offset; offsets yield disjoint class families.
  std::size_t class_offset = 0;
  // Perturbs each class pattern to form a nearby sub-cluster (0 = original).
  double shift = 0.0;
  std::string split = "train";

  bool operator==(const SynthSpec&) const = default;
};

/// Class-conditional synthetic images: a background tint, an oriented colour
/// grating, a coloured blob at a class position and pixel noise. Class patterns depend only on
/// the pattern id; per-sample jitter and noise come from `rng`.
Dataset synth_dataset(const SynthSpec& spec, RngStream rng);

}  // namespace rinv
