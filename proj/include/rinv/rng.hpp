#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace rinv {

/// Counter-based random stream keyed by (seed, label).
///
/// Draw n of a stream is a pure function of (seed, label, n), so any stream can
/// be replayed from its identity alone. Child streams extend the label, which
/// keeps corruption draws, shuffles and initialization independent of each
/// other regardless of call order.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string label);

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }
  std::uint64_t counter() const { return counter_; }

  RngStream child(const std::string& sublabel) const;
  RngStream child(std::size_t index) const { return child(std::to_string(index)); }

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  double standard_normal();
  bool bernoulli(double p);
  // Uniform integer in [0, n), unbiased.
  std::size_t uniform_index(std::size_t n);
  std::vector<std::size_t> permutation(std::size_t n);
  // k distinct indices from [0, n), in draw order.
  std::vector<std::size_t> index_subset(std::size_t n, std::size_t k);

 private:
  std::uint64_t seed_;
  std::string label_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace rinv
