#include "rinv/corruptions.hpp"

#include <cmath>
#include <sstream>

namespace rinv {

namespace {

template <typename T>
void require_unnormalized(const ImageBatch<T>& batch, const char* op) {
  if (batch.normalized) {
    throw ContractError(std::string(op) +
                        ": batch is already normalized; corrupt first, then normalize");
  }
  if (!batch.values.defined() || batch.values.rank() != 4) {
    throw DimensionError(std::string(op) + ": expected a B x C x H x W batch");
  }
}

template <typename T>
std::vector<T> copy_values(const ImageBatch<T>& batch) {
  return {batch.values.data().begin(), batch.values.data().end()};
}

template <typename T>
void mask_image(T* img, std::size_t C, std::size_t HW, double p, RngStream& rng, bool exact) {
  std::vector<std::uint8_t> hit(HW, 0);
  if (exact) {
    const auto count = static_cast<std::size_t>(std::llround(p * static_cast<double>(HW)));
    for (std::size_t idx : rng.index_subset(HW, count)) hit[idx] = 1;
  } else {
    for (std::size_t i = 0; i < HW; ++i) hit[i] = rng.bernoulli(p) ? 1 : 0;
  }
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < HW; ++i)
      if (hit[i]) img[c * HW + i] = T(0);
}

template <typename T>
void noise_image(T* img, std::size_t n, double sigma, RngStream& rng) {
  for (std::size_t i = 0; i < n; ++i) img[i] = static_cast<T>(img[i] + sigma * rng.standard_normal());
}

// numpy-style "reflect": d c b | a b c d | c b a
std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

template <typename T>
void blur_image(T* img, std::size_t C, std::size_t H, std::size_t W, const std::vector<double>& kernel) {
  const long r = static_cast<long>(kernel.size() / 2);
  std::vector<double> tmp(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    T* plane = img + c * H * W;
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        // Offsets from the centre tap: constant regions come back exactly.
        const double centre = plane[y * W + x];
        double acc = 0;
        for (long t = -r; t <= r; ++t)
          acc += kernel[static_cast<std::size_t>(t + r)] *
                 (plane[y * W + reflect_index(static_cast<long>(x) + t, static_cast<long>(W))] - centre);
        tmp[y * W + x] = centre + acc;
      }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double centre = tmp[y * W + x];
        double acc = 0;
        for (long t = -r; t <= r; ++t)
          acc += kernel[static_cast<std::size_t>(t + r)] *
                 (tmp[reflect_index(static_cast<long>(y) + t, static_cast<long>(H)) * W + x] - centre);
        plane[y * W + x] = static_cast<T>(centre + acc);
      }
  }
}

void check_mask_p(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("mask fraction must lie in [0, 1], got " + std::to_string(p));
}
void check_sigma(double s) {
  if (!(s >= 0.0)) throw DomainError("noise std must be >= 0, got " + std::to_string(s));
}
void check_blur(int n, double s) {
  if (n <= 0 || n % 2 == 0) throw DomainError("blur kernel size must be odd and positive, got " + std::to_string(n));
  if (!(s > 0.0)) throw DomainError("blur std must be > 0, got " + std::to_string(s));
}

void check_range(const Severity& s, const char* name) {
  if (s.ranged && !(s.lo <= s.hi)) {
    throw DomainError(std::string(name) + " range must satisfy lo <= hi");
  }
}

std::string severity_str(const Severity& s) {
  std::ostringstream os;
  if (s.ranged) {
    os << "range(" << s.lo << "," << s.hi << ")";
  } else {
    os << s.lo;
  }
  return os.str();
}

template <typename T>
ImageBatch<T> with_values(const ImageBatch<T>& like, std::vector<T> values) {
  return {Tensor<T>::from_data(like.values.shape(), std::move(values)), false, true};
}

}  // namespace

ForwardOperator ForwardOperator::identity() { return {}; }

ForwardOperator ForwardOperator::mask(Severity p, bool exact_count) {
  ForwardOperator op;
  op.kind = OperatorKind::RandomMask;
  op.mask_fraction = p;
  op.exact_count = exact_count;
  op.validate();
  return op;
}

ForwardOperator ForwardOperator::noise(Severity sigma) {
  ForwardOperator op;
  op.kind = OperatorKind::GaussianNoise;
  op.noise_std = sigma;
  op.validate();
  return op;
}

ForwardOperator ForwardOperator::blur(int kernel_size, Severity std) {
  ForwardOperator op;
  op.kind = OperatorKind::GaussianBlur;
  op.blur_kernel_size = kernel_size;
  op.blur_std = std;
  op.validate();
  return op;
}

ForwardOperator ForwardOperator::compose(std::vector<ForwardOperator> parts) {
  ForwardOperator op;
  op.kind = OperatorKind::Compose;
  op.parts = std::move(parts);
  op.validate();
  return op;
}

void ForwardOperator::validate() const {
  switch (kind) {
    case OperatorKind::Identity:
      break;
    case OperatorKind::RandomMask:
      check_range(mask_fraction, "mask fraction");
      check_mask_p(mask_fraction.lo);
      check_mask_p(mask_fraction.hi);
      break;
    case OperatorKind::GaussianNoise:
      check_range(noise_std, "noise std");
      check_sigma(noise_std.lo);
      check_sigma(noise_std.hi);
      break;
    case OperatorKind::GaussianBlur:
      check_range(blur_std, "blur std");
      check_blur(blur_kernel_size, blur_std.lo);
      check_blur(blur_kernel_size, blur_std.hi);
      break;
    case OperatorKind::Compose:
      for (const auto& p : parts) p.validate();
      break;
  }
}

bool ForwardOperator::is_fixed() const {
  switch (kind) {
    case OperatorKind::RandomMask:
      return !mask_fraction.ranged;
    case OperatorKind::GaussianNoise:
      return !noise_std.ranged;
    case OperatorKind::GaussianBlur:
      return !blur_std.ranged;
    case OperatorKind::Compose:
      for (const auto& p : parts)
        if (!p.is_fixed()) return false;
      return true;
    case OperatorKind::Identity:
      break;
  }
  return true;
}

bool ForwardOperator::is_deterministic() const {
  switch (kind) {
    case OperatorKind::Identity:
      return true;
    case OperatorKind::GaussianBlur:
      return !blur_std.ranged;
    case OperatorKind::Compose:
      for (const auto& p : parts)
        if (!p.is_deterministic()) return false;
      return true;
    case OperatorKind::RandomMask:
    case OperatorKind::GaussianNoise:
      break;
  }
  return false;
}

ForwardOperator ForwardOperator::with_severity(double value) const {
  ForwardOperator out = *this;
  switch (kind) {
    case OperatorKind::RandomMask:
      out.mask_fraction = Severity::fixed(value);
      break;
    case OperatorKind::GaussianNoise:
      out.noise_std = Severity::fixed(value);
      break;
    case OperatorKind::GaussianBlur:
      out.blur_std = Severity::fixed(value);
      break;
    default:
      throw DomainError("with_severity: operator " + describe() + " has no single severity");
  }
  out.validate();
  return out;
}

std::string ForwardOperator::describe() const {
  std::ostringstream os;
  switch (kind) {
    case OperatorKind::Identity:
      os << "identity";
      break;
    case OperatorKind::RandomMask:
      os << "mask(p=" << severity_str(mask_fraction) << (exact_count ? ",exact" : "") << ")";
      break;
    case OperatorKind::GaussianNoise:
      os << "noise(sigma=" << severity_str(noise_std) << ")";
      break;
    case OperatorKind::GaussianBlur:
      os << "blur(n=" << blur_kernel_size << ",std=" << severity_str(blur_std) << ")";
      break;
    case OperatorKind::Compose:
      os << "compose(";
      for (std::size_t i = 0; i < parts.size(); ++i) os << (i ? "," : "") << parts[i].describe();
      os << ")";
      break;
  }
  return os.str();
}

std::vector<double> gaussian_kernel_1d(int n, double std) {
  check_blur(n, std);
  const int r = n / 2;
  std::vector<double> k(static_cast<std::size_t>(n));
  double total = 0;
  for (int t = -r; t <= r; ++t) {
    k[static_cast<std::size_t>(t + r)] = std::exp(-(t * t) / (2.0 * std * std));
    total += k[static_cast<std::size_t>(t + r)];
  }
  for (double& v : k) v /= total;
  return k;
}

template <typename T>
ImageBatch<T> apply_mask(const ImageBatch<T>& batch, double p, const RngStream& rng, bool exact_count) {
  require_unnormalized(batch, "apply_mask");
  check_mask_p(p);
  auto values = copy_values(batch);
  const auto& s = batch.values.shape();
  const std::size_t C = s[1], HW = s[2] * s[3];
  for (std::size_t b = 0; b < s[0]; ++b) {
    RngStream img = rng.child(b);
    mask_image(values.data() + b * C * HW, C, HW, p, img, exact_count);
  }
  return with_values(batch, std::move(values));
}

template <typename T>
ImageBatch<T> apply_noise(const ImageBatch<T>& batch, double sigma, const RngStream& rng) {
  require_unnormalized(batch, "apply_noise");
  check_sigma(sigma);
  auto values = copy_values(batch);
  const auto& s = batch.values.shape();
  const std::size_t per_image = s[1] * s[2] * s[3];
  for (std::size_t b = 0; b < s[0]; ++b) {
    RngStream img = rng.child(b);
    noise_image(values.data() + b * per_image, per_image, sigma, img);
  }
  return with_values(batch, std::move(values));
}

template <typename T>
ImageBatch<T> apply_blur(const ImageBatch<T>& batch, int n, double blur_std) {
  require_unnormalized(batch, "apply_blur");
  const auto kernel = gaussian_kernel_1d(n, blur_std);
  auto values = copy_values(batch);
  const auto& s = batch.values.shape();
  const std::size_t per_image = s[1] * s[2] * s[3];
  for (std::size_t b = 0; b < s[0]; ++b) blur_image(values.data() + b * per_image, s[1], s[2], s[3], kernel);
  return with_values(batch, std::move(values));
}

ForwardOperator sample_operator_instance(const ForwardOperator& op, RngStream rng) {
  ForwardOperator out = op;
  auto draw = [&rng](Severity& s) {
    if (s.ranged) s = Severity::fixed(rng.uniform(s.lo, s.hi));
  };
  switch (op.kind) {
    case OperatorKind::RandomMask:
      draw(out.mask_fraction);
      break;
    case OperatorKind::GaussianNoise:
      draw(out.noise_std);
      break;
    case OperatorKind::GaussianBlur:
      draw(out.blur_std);
      break;
    case OperatorKind::Compose:
      for (std::size_t i = 0; i < out.parts.size(); ++i)
        out.parts[i] = sample_operator_instance(op.parts[i], rng.child(i));
      break;
    case OperatorKind::Identity:
      break;
  }
  return out;
}

template <typename T>
ImageBatch<T> apply(const ForwardOperator& op, const ImageBatch<T>& batch, const RngStream& rng) {
  require_unnormalized(batch, "apply");
  op.validate();
  if (op.kind == OperatorKind::Identity) {
    return {batch.values.detach(), false, true};
  }
  if (op.kind == OperatorKind::Compose) {
    ImageBatch<T> current{batch.values.detach(), false, true};
    for (std::size_t i = 0; i < op.parts.size(); ++i)
      current = apply(op.parts[i], current, rng.child("part" + std::to_string(i)));
    return current;
  }

  auto values = copy_values(batch);
  const auto& s = batch.values.shape();
  const std::size_t C = s[1], H = s[2], W = s[3], per_image = C * H * W;
  for (std::size_t b = 0; b < s[0]; ++b) {
    RngStream img = rng.child(b);
    const ForwardOperator inst = op.is_fixed() ? op : sample_operator_instance(op, img.child("severity"));
    T* data = values.data() + b * per_image;
    switch (op.kind) {
      case OperatorKind::RandomMask:
        mask_image(data, C, H * W, inst.mask_fraction.value(), img, inst.exact_count);
        break;
      case OperatorKind::GaussianNoise:
        noise_image(data, per_image, inst.noise_std.value(), img);
        break;
      case OperatorKind::GaussianBlur:
        blur_image(data, C, H, W, gaussian_kernel_1d(inst.blur_kernel_size, inst.blur_std.value()));
        break;
      default:
        break;
    }
  }
  return with_values(batch, std::move(values));
}

template <typename T>
ImageBatch<T> normalize(const ImageBatch<T>& batch, const std::vector<double>& mean,
                        const std::vector<double>& std) {
  if (batch.normalized) throw ContractError("normalize: batch is already normalized");
  const auto& s = batch.values.shape();
  const std::size_t C = s[1], HW = s[2] * s[3];
  auto pick = [C](const std::vector<double>& v, std::size_t c, const char* what) {
    if (v.size() == 1) return v[0];
    if (v.size() != C) throw DimensionError(std::string("normalize: ") + what + " has wrong channel count");
    return v[c];
  };
  auto values = copy_values(batch);
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const double m = pick(mean, c, "mean"), sd = pick(std, c, "std");
      if (!(sd > 0)) throw DomainError("normalize: std must be positive");
      T* plane = values.data() + (b * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) plane[i] = static_cast<T>((plane[i] - m) / sd);
    }
  return {Tensor<T>::from_data(s, std::move(values)), true, batch.corrupted};
}

#define RINV_INSTANTIATE_CORRUPTIONS(T)                                                              \
  template ImageBatch<T> apply_mask(const ImageBatch<T>&, double, const RngStream&, bool);           \
  template ImageBatch<T> apply_noise(const ImageBatch<T>&, double, const RngStream&);                \
  template ImageBatch<T> apply_blur(const ImageBatch<T>&, int, double);                              \
  template ImageBatch<T> apply(const ForwardOperator&, const ImageBatch<T>&, const RngStream&);      \
  template ImageBatch<T> normalize(const ImageBatch<T>&, const std::vector<double>&,                 \
                                   const std::vector<double>&);

RINV_INSTANTIATE_CORRUPTIONS(float)
RINV_INSTANTIATE_CORRUPTIONS(double)

#undef RINV_INSTANTIATE_CORRUPTIONS

}  // namespace rinv
