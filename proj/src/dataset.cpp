#include "rinv/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace rinv {

const std::vector<int>& Dataset::require_labels() const {
  if (!labels) throw DataError("dataset '" + name + "' has no labels");
  return *labels;
}

void Dataset::validate() const {
  if (!pixels || pixels->size() != count * image_size()) {
    throw DataError("dataset '" + name + "': pixel buffer does not match N x C x H x W");
  }
  if (labels) {
    if (labels->size() != count) throw DataError("dataset '" + name + "': label count does not match image count");
    for (std::size_t i = 0; i < labels->size(); ++i) {
      const int y = (*labels)[i];
      if (y < 0 || static_cast<std::size_t>(y) >= class_count) {
        throw DataError("dataset '" + name + "': label " + std::to_string(y) + " at index " +
                        std::to_string(i) + " outside [0, " + std::to_string(class_count) + ")");
      }
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out = *this;
  auto px = std::make_shared<std::vector<float>>();
  px->reserve(indices.size() * image_size());
  for (std::size_t i : indices) {
    if (i >= count) throw DataError("subset index out of range");
    px->insert(px->end(), image(i), image(i) + image_size());
  }
  out.pixels = std::move(px);
  out.count = indices.size();
  if (labels) out.labels = gather_labels(*this, indices);
  return out;
}

Dataset Dataset::without_labels() const {
  Dataset out = *this;
  out.labels.reset();
  return out;
}

template <typename T>
ImageBatch<T> gather_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("gather_batch: empty batch");
  const std::size_t sz = data.image_size();
  std::vector<T> values(indices.size() * sz);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= data.count) throw DataError("gather_batch: index out of range");
    std::copy_n(data.image(indices[b]), sz, values.begin() + static_cast<std::ptrdiff_t>(b * sz));
  }
  return {Tensor<T>::from_data({indices.size(), data.channels, data.height, data.width}, std::move(values)),
          false, false};
}

std::vector<int> gather_labels(const Dataset& data, std::span<const std::size_t> indices) {
  const auto& labels = data.require_labels();
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

template <typename T>
ImageBatch<T> augment_crop_flip(const ImageBatch<T>& batch, std::size_t pad, const RngStream& rng) {
  if (batch.normalized) throw ContractError("augment_crop_flip: augment before normalizing");
  const auto& s = batch.values.shape();
  const std::size_t C = s[1], H = s[2], W = s[3];
  std::vector<T> out(batch.values.numel(), T(0));
  auto in = batch.values.data();
  for (std::size_t b = 0; b < s[0]; ++b) {
    RngStream r = rng.child(b);
    const long dy = static_cast<long>(r.uniform_index(2 * pad + 1)) - static_cast<long>(pad);
    const long dx = static_cast<long>(r.uniform_index(2 * pad + 1)) - static_cast<long>(pad);
    const bool flip = r.bernoulli(0.5);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < H; ++y) {
        const long sy = static_cast<long>(y) + dy;
        if (sy < 0 || sy >= static_cast<long>(H)) continue;
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t xx = flip ? W - 1 - x : x;
          const long sx = static_cast<long>(xx) + dx;
          if (sx < 0 || sx >= static_cast<long>(W)) continue;
          out[((b * C + c) * H + y) * W + x] =
              in[((b * C + c) * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
        }
      }
  }
  return {Tensor<T>::from_data(s, std::move(out)), false, batch.corrupted};
}

std::vector<std::size_t> stratified_subset(const Dataset& data, double fraction, RngStream rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DomainError("label fraction must lie in (0, 1]");
  const auto& labels = data.require_labels();
  std::vector<std::vector<std::size_t>> by_class(data.class_count);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  std::vector<std::size_t> out;
  std::vector<std::size_t> uncovered;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto& members = by_class[c];
    if (members.empty()) {
      uncovered.push_back(c);
      continue;
    }
    std::size_t take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    take = std::clamp<std::size_t>(take, 1, members.size());
    for (std::size_t k : rng.child(c).index_subset(members.size(), take)) out.push_back(members[k]);
  }
  if (!uncovered.empty()) {
    std::string list;
    for (std::size_t c : uncovered) list += (list.empty() ? "" : ",") + std::to_string(c);
    throw DataError("stratified subset leaves classes without samples: " + list);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t batch_size,
                                                   bool drop_last) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (drop_last && end - start < batch_size) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

namespace {

struct ClassPattern {
  double angle, frequency;
  std::vector<double> grating_color, blob_color, tint;
  double cx, cy;
};

ClassPattern class_pattern(std::size_t pattern_id, std::size_t channels, std::size_t h, std::size_t w,
                           double shift) {
  RngStream r(0x5EEDC1A55ULL, "synth-class/" + std::to_string(pattern_id));
  ClassPattern p;
  p.angle = r.uniform(0.0, std::numbers::pi);
  p.frequency = r.uniform(1.5, 5.0);
  for (std::size_t c = 0; c < channels; ++c) p.grating_color.push_back(r.uniform(-1.0, 1.0));
  for (std::size_t c = 0; c < channels; ++c) p.blob_color.push_back(r.uniform(-1.0, 1.0));
  p.cx = r.uniform(0.25, 0.75) * static_cast<double>(w);
  p.cy = r.uniform(0.25, 0.75) * static_cast<double>(h);
  for (std::size_t c = 0; c < channels; ++c) p.tint.push_back(r.uniform(-1.0, 1.0));
  if (shift != 0.0) {
    RngStream d = r.child("shift");
    p.angle += shift * 0.3;
    p.frequency *= 1.0 + 0.15 * shift;
    p.cx += shift * d.uniform(-3.0, 3.0);
    p.cy += shift * d.uniform(-3.0, 3.0);
    for (auto& v : p.grating_color) v += shift * d.uniform(-0.25, 0.25);
    for (auto& v : p.blob_color) v += shift * d.uniform(-0.25, 0.25);
    for (auto& v : p.tint) v += shift * d.uniform(-0.25, 0.25);
  }
  return p;
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec, RngStream rng) {
  if (spec.classes < 2) throw ConfigError("synth_dataset needs at least 2 classes");
  if (spec.per_class == 0) throw ConfigError("synth_dataset needs at least one image per class");
  const std::size_t C = spec.channels, H = spec.height, W = spec.width;
  Dataset out;
  out.name = "synth";
  out.split = spec.split;
  out.count = spec.classes * spec.per_class;
  out.channels = C;
  out.height = H;
  out.width = W;
  out.class_count = spec.classes;
  auto px = std::make_shared<std::vector<float>>(out.count * C * H * W);
  std::vector<int> labels(out.count);

  std::vector<ClassPattern> patterns;
  for (std::size_t k = 0; k < spec.classes; ++k) patterns.push_back(class_pattern(k + spec.class_offset, C, H, W, spec.shift));

  // Classes interleave so any prefix of the dataset is roughly balanced.
  for (std::size_t i = 0; i < out.count; ++i) {
    const std::size_t k = i % spec.classes;
    labels[i] = static_cast<int>(k);
    const ClassPattern& p = patterns[k];
    RngStream r = rng.child(i);
    const double phase = r.uniform(0.0, 2.0 * std::numbers::pi);
    const double amp = r.uniform(0.8, 1.2);
    const double bx = p.cx + r.uniform(-2.0, 2.0), by = p.cy + r.uniform(-2.0, 2.0);
    const double radius = 0.15 * static_cast<double>(std::min(H, W));
    const double kx = 2.0 * std::numbers::pi * p.frequency * std::cos(p.angle) / static_cast<double>(W);
    const double ky = 2.0 * std::numbers::pi * p.frequency * std::sin(p.angle) / static_cast<double>(H);
    float* img = px->data() + i * C * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double wave = amp * std::sin(kx * static_cast<double>(x) + ky * static_cast<double>(y) + phase);
        const double dx = static_cast<double>(x) - bx, dy = static_cast<double>(y) - by;
        const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius));
        for (std::size_t c = 0; c < C; ++c) {
          const double v = 0.5 + spec.tint * p.tint[c] + 0.2 * wave * p.grating_color[c] + 0.3 * blob * p.blob_color[c] +
                           spec.pixel_noise * r.standard_normal();
          img[(c * H + y) * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
  }
  out.pixels = std::move(px);
  out.labels = std::move(labels);
  return out;
}

#define RINV_INSTANTIATE_DATASET(T)                                                         \
  template ImageBatch<T> gather_batch<T>(const Dataset&, std::span<const std::size_t>);     \
  template ImageBatch<T> augment_crop_flip(const ImageBatch<T>&, std::size_t, const RngStream&);

RINV_INSTANTIATE_DATASET(float)
RINV_INSTANTIATE_DATASET(double)

#undef RINV_INSTANTIATE_DATASET

}  // namespace rinv
