#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "rinv/losses.hpp"

namespace rinv {

struct FiniteDifferenceCase {
  std::string loss;
  std::size_t instance = 0;
  std::size_t batch = 0;
  double tau = 0.0;
  double relative_error = 0.0;
  bool pass = false;
};

struct DecompositionCase {
  std::string loss;
  std::size_t instance = 0;
  std::size_t batch = 0;
  double tau = 0.0;
  GradientDecompositionReport report;
  bool pass = false;
};

struct GradcheckSuite {
  std::uint64_t seed = 0;
  double step = 1e-5;
  double fd_tolerance = 1e-5;
  double decomposition_tolerance = 1e-8;
  double row_sum_tolerance = 1e-12;
  std::vector<FiniteDifferenceCase> finite_difference;
  std::vector<DecompositionCase> decomposition;

  bool pass() const;
  nlohmann::json to_json() const;
};

/// Analytic gradients of every loss variant through a two-layer MLP student
/// against central differences (f64), plus the pull/push decomposition of the
/// contrastive gradient. `instances` random problems per variant.
GradcheckSuite run_gradcheck_suite(std::uint64_t seed, std::size_t instances = 20);

}  // namespace rinv
