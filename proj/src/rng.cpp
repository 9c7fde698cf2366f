#include "rinv/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "rinv/errors.hpp"

namespace rinv {

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::string label)
    : seed_(seed), label_(std::move(label)), key_(mix64(mix64(seed) ^ fnv1a(label_))) {}

RngStream RngStream::child(const std::string& sublabel) const {
  return RngStream(seed_, label_ + "/" + sublabel);
}

std::uint64_t RngStream::next_u64() {
  // Two rounds of the splitmix finalizer over (key, counter).
  const std::uint64_t c = counter_++;
  return mix64(key_ ^ mix64(c + 0x9e3779b97f4a7c15ULL));
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double RngStream::standard_normal() {
  // Box-Muller, cosine branch only; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

bool RngStream::bernoulli(double p) { return uniform() < p; }

std::size_t RngStream::uniform_index(std::size_t n) {
  if (n == 0) throw DomainError("uniform_index: empty range");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r >= limit);
  return static_cast<std::size_t>(r % bound);
}

std::vector<std::size_t> RngStream::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(i)]);
  return p;
}

std::vector<std::size_t> RngStream::index_subset(std::size_t n, std::size_t k) {
  if (k > n) throw DomainError("index_subset: k > n");
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(p[i], p[i + uniform_index(n - i)]);
  p.resize(k);
  return p;
}

}  // namespace rinv
