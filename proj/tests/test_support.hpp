#pragma once

// Test-only helpers: random fixtures and a central finite-difference oracle
// that never touches the backward pass.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "rinv/rng.hpp"
#include "rinv/tensor.hpp"

namespace rinv::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, RngStream& rng, bool requires_grad = false, double scale = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(scale * rng.standard_normal());
  return Tensor<T>::from_data(std::move(shape), std::move(v), requires_grad);
}

inline Tensor<double> random_unit_rows(std::size_t n, std::size_t d, RngStream& rng,
                                       bool requires_grad = false) {
  std::vector<double> v(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0;
    for (std::size_t k = 0; k < d; ++k) {
      v[i * d + k] = rng.standard_normal();
      sq += v[i * d + k] * v[i * d + k];
    }
    for (std::size_t k = 0; k < d; ++k) v[i * d + k] /= std::sqrt(sq);
  }
  return Tensor<double>::from_data({n, d}, std::move(v), requires_grad);
}

// Central differences of a scalar function with respect to every entry of x,
// perturbing x in place and restoring it.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, Tensor<double>& x,
                                            double h = 1e-5) {
  auto data = x.data_mut();
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double keep = data[i];
    data[i] = keep + h;
    const double up = f();
    data[i] = keep - h;
    const double down = f();
    data[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||), with a floor so all-zero gradients compare as 0.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-10});
  return std::sqrt(diff) / denom;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Fresh directory under the system temp dir, removed on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("rinv-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ignored;
    std::filesystem::remove_all(path_, ignored);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace rinv::testing
