#include <doctest.h>

#include <cmath>
#include <numeric>

#include "rinv/corruptions.hpp"
#include "rinv/errors.hpp"
#include "test_support.hpp"

using namespace rinv;

namespace {

ImageBatch<double> uniform_batch(std::size_t b, std::size_t c, std::size_t h, std::size_t w, RngStream rng) {
  std::vector<double> v(b * c * h * w);
  for (auto& x : v) x = rng.uniform();
  return {Tensor<double>::from_data({b, c, h, w}, std::move(v)), false, false};
}

ImageBatch<double> constant_batch(std::size_t b, std::size_t c, std::size_t h, std::size_t w, double value) {
  return {Tensor<double>::full({b, c, h, w}, value), false, false};
}

bool same_values(const ImageBatch<double>& a, const ImageBatch<double>& b) {
  auto x = a.values.data(), y = b.values.data();
  return a.values.shape() == b.values.shape() && std::equal(x.begin(), x.end(), y.begin());
}

}  // namespace

TEST_CASE("mask extremes") {
  RngStream rng(1, "mask");
  auto batch = uniform_batch(2, 3, 8, 8, rng.child("img"));
  CHECK(same_values(apply_mask(batch, 0.0, rng), batch));
  auto full = apply_mask(batch, 1.0, rng);
  for (double v : full.values.data()) CHECK(v == 0.0);
  CHECK(full.corrupted);
  CHECK_THROWS_AS(apply_mask(batch, 1.5, rng), DomainError);
  CHECK_THROWS_AS(apply_mask(batch, -0.1, rng), DomainError);
}

TEST_CASE("mask fraction within four binomial standard deviations") {
  RngStream rng(7, "mask-count");
  const std::size_t side = 64, n = side * side;
  // Strictly positive pixels, so zeros can only come from the mask.
  auto batch = constant_batch(3, 3, side, side, 0.5);
  for (bool exact : {false, true}) {
    auto out = apply_mask(batch, 0.9, rng, exact);
    auto v = out.values.data();
    for (std::size_t b = 0; b < 3; ++b) {
      std::size_t zeroed = 0;
      for (std::size_t p = 0; p < n; ++p) {
        const bool z0 = v[(b * 3 + 0) * n + p] == 0.0;
        // The whole pixel goes dark, never a single channel.
        CHECK(z0 == (v[(b * 3 + 1) * n + p] == 0.0));
        CHECK(z0 == (v[(b * 3 + 2) * n + p] == 0.0));
        zeroed += z0;
      }
      const double sd = std::sqrt(n * 0.9 * 0.1);
      CHECK(std::abs(static_cast<double>(zeroed) - 0.9 * n) <= 4 * sd);
      if (exact) CHECK(zeroed == static_cast<std::size_t>(std::llround(0.9 * n)));
    }
    // Distinct images get distinct masks.
    std::size_t differ = 0;
    for (std::size_t p = 0; p < n; ++p) differ += (v[p] == 0.0) != (v[3 * n + p] == 0.0);
    CHECK(differ > 0);
  }
}

TEST_CASE("noise std and additivity") {
  RngStream rng(11, "noise");
  auto batch = constant_batch(1, 1, 1000, 1000, 0.25);
  CHECK(same_values(apply_noise(batch, 0.0, rng), batch));
  CHECK_THROWS_AS(apply_noise(batch, -1.0, rng), DomainError);

  auto stddev = [&](const ImageBatch<double>& out) {
    auto v = out.values.data();
    double s = 0, sq = 0;
    for (double x : v) {
      s += x - 0.25;
      sq += (x - 0.25) * (x - 0.25);
    }
    const double m = s / v.size();
    return std::sqrt(sq / v.size() - m * m);
  };
  auto once = apply_noise(batch, 0.5, rng);
  CHECK(std::abs(stddev(once) - 0.5) < 0.005);
  bool outside = false;
  for (double x : once.values.data()) outside |= x < 0.0 || x > 1.0;
  CHECK(outside);  // not clipped

  auto twice = apply_noise(apply_noise(batch, 0.3, rng.child("a")), 0.4, rng.child("b"));
  CHECK(std::abs(stddev(twice) - 0.5) < 0.01);
}

TEST_CASE("gaussian kernel") {
  for (auto [n, s] : std::vector<std::pair<int, double>>{{1, 1.0}, {3, 0.5}, {21, 5.0}, {37, 9.0}}) {
    auto k = gaussian_kernel_1d(n, s);
    CHECK(k.size() == static_cast<std::size_t>(n));
    CHECK(std::abs(std::accumulate(k.begin(), k.end(), 0.0) - 1.0) < 1e-9);
    for (int i = 0; i < n; ++i) CHECK(k[i] == doctest::Approx(k[n - 1 - i]).epsilon(1e-15));
  }
  CHECK_THROWS_AS(gaussian_kernel_1d(4, 1.0), DomainError);
  CHECK_THROWS_AS(gaussian_kernel_1d(5, 0.0), DomainError);
}

TEST_CASE("blur constant image, delta response and linearity") {
  auto c = constant_batch(1, 3, 24, 24, 0.37);
  auto bc = apply_blur(c, 21, 5.0);
  for (double v : bc.values.data()) CHECK(v == 0.37);
  CHECK_THROWS_AS(apply_blur(c, 4, 1.0), DomainError);

  const int n = 7;
  const double s = 1.5;
  const std::size_t side = 15, mid = 7;
  std::vector<double> delta(side * side, 0.0);
  delta[mid * side + mid] = 1.0;
  ImageBatch<double> d{Tensor<double>::from_data({1, 1, side, side}, delta), false, false};
  auto out = apply_blur(d, n, s);
  // Direct evaluation of the sampled Gaussian, independent of the library kernel.
  std::vector<double> g(n);
  double total = 0;
  for (int i = 0; i < n; ++i) total += g[i] = std::exp(-0.5 * (i - n / 2) * (i - n / 2) / (s * s));
  for (auto& x : g) x /= total;
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      const long dy = static_cast<long>(y) - mid, dx = static_cast<long>(x) - mid;
      const double expect = (std::abs(dy) <= n / 2 && std::abs(dx) <= n / 2) ? g[dy + n / 2] * g[dx + n / 2] : 0.0;
      CHECK(std::abs(out.values[y * side + x] - expect) < 1e-14);
    }

  RngStream rng(3, "blur-lin");
  auto a = uniform_batch(2, 3, 16, 16, rng.child("a"));
  auto b = uniform_batch(2, 3, 16, 16, rng.child("b"));
  const double alpha = 0.7, beta = -1.3;
  std::vector<double> mix(a.values.numel());
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * a.values[i] + beta * b.values[i];
  ImageBatch<double> m{Tensor<double>::from_data(a.values.shape(), mix), false, false};
  auto lhs = apply_blur(m, 9, 2.0);
  auto ba = apply_blur(a, 9, 2.0), bb = apply_blur(b, 9, 2.0);
  for (std::size_t i = 0; i < mix.size(); ++i)
    CHECK(std::abs(lhs.values[i] - (alpha * ba.values[i] + beta * bb.values[i])) < 1e-6);
}

TEST_CASE("range sampling") {
  auto degenerate = sample_operator_instance(ForwardOperator::mask(Severity::range(0.5, 0.5)), RngStream(1, "s"));
  CHECK(degenerate.is_fixed());
  CHECK(degenerate.mask_fraction.value() == 0.5);

  auto op = ForwardOperator::mask(Severity::range(0.5, 0.95));
  RngStream rng(5, "draws");
  double lo = 1, hi = 0, total = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const double p = sample_operator_instance(op, rng.child(static_cast<std::size_t>(i))).mask_fraction.value();
    lo = std::min(lo, p);
    hi = std::max(hi, p);
    total += p;
  }
  CHECK(lo >= 0.5);
  CHECK(hi <= 0.95);
  CHECK(std::abs(total / draws - 0.725) < 0.01 * 0.725);

  auto noise = sample_operator_instance(ForwardOperator::noise(Severity::range(0.1, 0.3)), RngStream(2, "n"));
  CHECK(noise.noise_std.value() >= 0.1);
  CHECK(noise.noise_std.value() <= 0.3);

  CHECK_THROWS_AS(ForwardOperator::mask(Severity::range(0.9, 0.5)).validate(), DomainError);
  CHECK_THROWS_AS(ForwardOperator::mask(Severity::range(0.5, 1.2)).validate(), DomainError);
}

TEST_CASE("ranged severity is drawn per image") {
  auto batch = constant_batch(2, 1, 1, 4000, 0.5);
  auto out = apply(ForwardOperator::mask(Severity::range(0.0, 1.0)), batch, RngStream(9, "per-image"));
  double frac[2] = {0, 0};
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 4000; ++p) frac[b] += out.values[b * 4000 + p] == 0.0;
  CHECK(std::abs(frac[0] - frac[1]) / 4000 > 0.01);
}

TEST_CASE("apply dispatch, composition and ordering contract") {
  RngStream rng(21, "apply");
  auto batch = uniform_batch(3, 3, 8, 8, rng.child("img"));
  auto id = apply(ForwardOperator::identity(), batch, rng);
  CHECK(same_values(id, batch));
  CHECK(id.corrupted);
  CHECK(same_values(apply(ForwardOperator::compose({ForwardOperator::identity(), ForwardOperator::identity()}),
                          batch, rng),
                    batch));

  auto mask = ForwardOperator::mask(Severity::fixed(0.5));
  auto noise = ForwardOperator::noise(Severity::fixed(0.1));
  auto composed = apply(ForwardOperator::compose({mask, noise}), batch, rng);
  auto step1 = apply_mask(batch, 0.5, rng.child("part0"));
  auto step2 = apply_noise(step1, 0.1, rng.child("part1"));
  CHECK(same_values(composed, step2));

  CHECK(same_values(apply(mask, batch, rng), apply(mask, batch, rng)));
  CHECK(same_values(apply(ForwardOperator::blur(5, Severity::fixed(1.0)), batch, rng), apply_blur(batch, 5, 1.0)));

  auto normed = normalize(batch, {0.5}, {0.5});
  CHECK(normed.normalized);
  CHECK(normed.values[0] == doctest::Approx((batch.values[0] - 0.5) / 0.5));
  CHECK_THROWS_AS(apply(mask, normed, rng), ContractError);
  CHECK_THROWS_AS(apply_noise(normed, 0.1, rng), ContractError);
  CHECK_THROWS_AS(normalize(normed, {0.5}, {0.5}), ContractError);
}

TEST_CASE("operator metadata") {
  CHECK(ForwardOperator::identity().is_deterministic());
  CHECK(ForwardOperator::blur(21, Severity::fixed(5.0)).is_deterministic());
  CHECK_FALSE(ForwardOperator::mask(Severity::fixed(0.9)).is_deterministic());
  CHECK_FALSE(ForwardOperator::blur(21, Severity::range(1.0, 5.0)).is_deterministic());
  auto op = ForwardOperator::noise(Severity::range(0.1, 0.3)).with_severity(0.2);
  CHECK(op.is_fixed());
  CHECK(op.noise_std.value() == 0.2);
  CHECK_THROWS_AS(ForwardOperator::identity().with_severity(0.1), DomainError);
  CHECK_THROWS_AS(ForwardOperator::blur(4, Severity::fixed(1.0)).validate(), DomainError);
}
