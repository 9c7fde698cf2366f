#pragma once

#include <string>
#include <vector>

#include "rinv/rng.hpp"
#include "rinv/tensor.hpp"

namespace rinv {

/// Images in [0, 1] before normalization. Corruption must happen first;
/// normalization flips `normalized` and forbids any further corruption.
template <typename T>
struct ImageBatch {
  Tensor<T> values;  // B x C x H x W
  bool normalized = false;
  // Set once a forward operator (even Identity) has been applied. Training
  // asserts on it to keep clean and corrupted streams apart.
  bool corrupted = false;

  std::size_t size() const { return values.dim(0); }
};

/// A severity parameter: either a fixed value or a closed range sampled
/// uniformly per image.
struct Severity {
  double lo = 0.0;
  double hi = 0.0;
  bool ranged = false;

  static Severity fixed(double v) { return {v, v, false}; }
  static Severity range(double lo, double hi) { return {lo, hi, true}; }
  double value() const { return lo; }
  bool operator==(const Severity&) const = default;
};

enum class OperatorKind { Identity, RandomMask, GaussianNoise, GaussianBlur, Compose };

struct ForwardOperator {
  OperatorKind kind = OperatorKind::Identity;
  Severity mask_fraction = Severity::fixed(0.0);
  // Exact-count masking zeroes round(p * H * W) pixels chosen without
  // replacement instead of independent Bernoulli(p) draws.
  bool exact_count = false;
  Severity noise_std = Severity::fixed(0.0);
  int blur_kernel_size = 1;
  Severity blur_std = Severity::fixed(1.0);
  std::vector<ForwardOperator> parts;

  static ForwardOperator identity();
  static ForwardOperator mask(Severity p, bool exact_count = false);
  static ForwardOperator noise(Severity sigma);
  static ForwardOperator blur(int kernel_size, Severity std);
  static ForwardOperator compose(std::vector<ForwardOperator> parts);

  // Throws DomainError when a parameter leaves its legal domain.
  void validate() const;
  bool is_fixed() const;
  // True when applying the operator draws no randomness at all.
  bool is_deterministic() const;
  // Returns a copy with the primary severity (mask p, noise sigma, blur std)
  // fixed to `value`. Not defined for Identity or Compose.
  ForwardOperator with_severity(double value) const;
  std::string describe() const;

  bool operator==(const ForwardOperator&) const = default;
};

std::vector<double> gaussian_kernel_1d(int n, double std);

template <typename T>
ImageBatch<T> apply_mask(const ImageBatch<T>& batch, double p, const RngStream& rng,
                         bool exact_count = false);

template <typename T>
ImageBatch<T> apply_noise(const ImageBatch<T>& batch, double sigma, const RngStream& rng);

template <typename T>
ImageBatch<T> apply_blur(const ImageBatch<T>& batch, int n, double blur_std);

/// Draws every ranged parameter uniformly from its range.
ForwardOperator sample_operator_instance(const ForwardOperator& op, RngStream rng);

/// Applies `op` image by image. Image b uses rng.child(b); a Compose applies
/// part i with rng.child("part" + i), left to right.
template <typename T>
ImageBatch<T> apply(const ForwardOperator& op, const ImageBatch<T>& batch, const RngStream& rng);

/// Per-channel (x - mean) / std. A single-element vector applies to every channel.
template <typename T>
ImageBatch<T> normalize(const ImageBatch<T>& batch, const std::vector<double>& mean,
                        const std::vector<double>& std);

}  // namespace rinv
