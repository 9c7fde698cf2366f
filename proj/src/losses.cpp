#include "rinv/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "rinv/ops.hpp"

namespace rinv {

void LossSpec::validate() const {
  if (!(tau > 0.0)) throw DomainError("temperature tau must be > 0, got " + std::to_string(tau));
}

std::string LossSpec::describe() const {
  if (family == LossFamily::MSEOnly) return "mse";
  return "contrastive(" + to_string(variant) + ",tau=" + std::to_string(tau) + ")";
}

std::string to_string(LossFamily f) { return f == LossFamily::MSEOnly ? "mse" : "contrastive"; }

std::string to_string(UniformityVariant v) {
  switch (v) {
    case UniformityVariant::StudentVsTeacher:
      return "student_vs_teacher";
    case UniformityVariant::StudentVsStudent:
      return "student_vs_student";
    case UniformityVariant::StudentVsBoth:
      return "student_vs_both";
    case UniformityVariant::NTXent:
      return "nt_xent";
  }
  return "unknown";
}

LossFamily loss_family_from_string(const std::string& s) {
  if (s == "mse") return LossFamily::MSEOnly;
  if (s == "contrastive") return LossFamily::Contrastive;
  throw ConfigError("unknown loss family '" + s + "'");
}

UniformityVariant uniformity_variant_from_string(const std::string& s) {
  for (auto v : {UniformityVariant::StudentVsTeacher, UniformityVariant::StudentVsStudent,
                 UniformityVariant::StudentVsBoth, UniformityVariant::NTXent}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown uniformity variant '" + s + "'");
}

namespace {

template <typename T>
void require_pair(const Tensor<T>& s, const Tensor<T>& r, const char* op) {
  if (s.rank() != 2 || s.shape() != r.shape()) {
    throw DimensionError(std::string(op) + ": student " + shape_str(s.shape()) + " and teacher " +
                         shape_str(r.shape()) + " embeddings must both be N x d");
  }
}

// Mask over [A | B] blocks of width n each; `exclude_left_diag` and
// `exclude_right_diag` drop the j == i entry of the respective block.
std::vector<std::uint8_t> block_mask(std::size_t n, bool exclude_left_diag, bool exclude_right_diag,
                                     std::size_t blocks) {
  std::vector<std::uint8_t> mask(n * n * blocks, 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (exclude_left_diag) mask[i * n * blocks + i] = 0;
    if (blocks == 2 && exclude_right_diag) mask[i * n * blocks + n + i] = 0;
  }
  return mask;
}

}  // namespace

template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& student, const Tensor<T>& teacher) {
  if (student.rank() != 2 || teacher.rank() != 2 || student.dim(1) != teacher.dim(1)) {
    throw DimensionError("similarity_matrix: embedding dimensions differ");
  }
  return matmul(student, transpose(teacher));
}

template <typename T>
Tensor<T> loss_mse(const Tensor<T>& student, const Tensor<T>& teacher) {
  require_pair(student, teacher, "loss_mse");
  return scale(mean(rowwise_dot(student, teacher)), T(-1));
}

template <typename T>
Tensor<T> loss_uniformity(const Tensor<T>& student, const Tensor<T>& teacher, const LossSpec& spec) {
  require_pair(student, teacher, "loss_uniformity");
  spec.validate();
  const std::size_t n = student.dim(0);
  const T inv_tau = static_cast<T>(1.0 / spec.tau);
  if (spec.variant != UniformityVariant::StudentVsTeacher && n < 2) {
    throw BatchSizeError("loss_uniformity: variant " + to_string(spec.variant) +
                         " needs a batch of at least 2");
  }
  const Tensor<T> rt = transpose(teacher);
  switch (spec.variant) {
    case UniformityVariant::StudentVsTeacher:
      return mean(log_sum_exp_rows(scale(matmul(student, rt), inv_tau)));
    case UniformityVariant::StudentVsStudent: {
      const auto mask = block_mask(n, true, false, 1);
      return mean(log_sum_exp_rows_masked(scale(matmul(student, transpose(student)), inv_tau),
                                          std::span<const std::uint8_t>(mask)));
    }
    case UniformityVariant::StudentVsBoth:
    case UniformityVariant::NTXent: {
      const Tensor<T> st = transpose(student);
      const auto mask_s = block_mask(n, true, false, 2);
      Tensor<T> anchored_s = log_sum_exp_rows_masked(
          scale(concat<T>({matmul(student, st), matmul(student, rt)}, 1), inv_tau),
          std::span<const std::uint8_t>(mask_s));
      if (spec.variant == UniformityVariant::StudentVsBoth) return mean(anchored_s);
      const auto mask_r = block_mask(n, false, true, 2);
      Tensor<T> anchored_r = log_sum_exp_rows_masked(
          scale(concat<T>({matmul(teacher, st), matmul(teacher, rt)}, 1), inv_tau),
          std::span<const std::uint8_t>(mask_r));
      return mean(add(anchored_s, anchored_r));
    }
  }
  throw ContractError("loss_uniformity: unknown variant");
}

template <typename T>
Tensor<T> loss_contrastive(const Tensor<T>& student, const Tensor<T>& teacher, const LossSpec& spec) {
  spec.validate();
  if (spec.family != LossFamily::Contrastive) {
    throw ContractError("loss_contrastive: spec family is not contrastive");
  }
  return add(scale(loss_mse(student, teacher), static_cast<T>(1.0 / spec.tau)),
             loss_uniformity(student, teacher, spec));
}

template <typename T>
Tensor<T> compute_loss(const Tensor<T>& student, const Tensor<T>& teacher, const LossSpec& spec) {
  if (spec.family == LossFamily::MSEOnly) return loss_mse(student, teacher);
  return loss_contrastive(student, teacher, spec);
}

template <typename T>
Tensor<T> uniformity_weights(const Tensor<T>& similarity, double tau) {
  if (similarity.rank() != 2) throw DimensionError("uniformity_weights: expected a matrix");
  if (!(tau > 0.0)) throw DomainError("uniformity_weights: tau must be > 0");
  const std::size_t n = similarity.dim(0), m = similarity.dim(1);
  std::vector<T> w(n * m);
  auto k = similarity.data();
  for (std::size_t i = 0; i < n; ++i) {
    double hi = -INFINITY;
    for (std::size_t j = 0; j < m; ++j) hi = std::max(hi, static_cast<double>(k[i * m + j]) / tau);
    double total = 0;
    std::vector<double> e(m);
    for (std::size_t j = 0; j < m; ++j) {
      e[j] = std::exp(static_cast<double>(k[i * m + j]) / tau - hi);
      total += e[j];
    }
    for (std::size_t j = 0; j < m; ++j) w[i * m + j] = static_cast<T>(e[j] / total);
  }
  return Tensor<T>::from_data({n, m}, std::move(w));
}

template <typename T>
GradientDecompositionReport gradient_decomposition_check(
    const std::function<Tensor<T>()>& student_forward, std::vector<Tensor<T>> params,
    const Tensor<T>& teacher, const LossSpec& spec) {
  spec.validate();
  if (spec.family == LossFamily::Contrastive && spec.variant != UniformityVariant::StudentVsTeacher) {
    throw ContractError("gradient_decomposition_check: the weighted split holds for student_vs_teacher only");
  }
  const Tensor<T> r = teacher.detach();

  auto gradient_of = [&](const std::function<Tensor<T>(const Tensor<T>&)>& objective) {
    for (auto& p : params) p.zero_grad();
    backward(objective(student_forward()));
    std::vector<double> g;
    for (const auto& p : params)
      for (T v : p.grad()) g.push_back(static_cast<double>(v));
    return g;
  };

  const std::vector<double> full = gradient_of([&](const Tensor<T>& s) { return compute_loss(s, r, spec); });
  const std::vector<double> pull = gradient_of([&](const Tensor<T>& s) { return loss_mse(s, r); });

  GradientDecompositionReport report;
  report.parameter_entries = full.size();
  std::vector<double> rhs(full.size(), 0.0);
  if (spec.family == LossFamily::MSEOnly) {
    rhs = pull;
  } else {
    Tensor<T> weights;
    {
      NoGradGuard no_grad;
      const Tensor<T> s = student_forward();
      weights = uniformity_weights(similarity_matrix(s, r), spec.tau);
    }
    const std::size_t n = weights.dim(0);
    report.min_weight = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0;
      for (std::size_t j = 0; j < n; ++j) {
        row += static_cast<double>(weights[i * n + j]);
        report.min_weight = std::min(report.min_weight, static_cast<double>(weights[i * n + j]));
      }
      report.max_row_sum_error = std::max(report.max_row_sum_error, std::abs(row - 1.0));
    }
    // Push side: gradient of 1/(tau N) sum_ij w_i(j) K(i, j) with w held fixed.
    const T factor = static_cast<T>(1.0 / (spec.tau * static_cast<double>(n)));
    const std::vector<double> push = gradient_of([&](const Tensor<T>& s) {
      return scale(sum(mul(similarity_matrix(s, r), weights)), factor);
    });
    for (std::size_t k = 0; k < rhs.size(); ++k) {
      rhs[k] = pull[k] / spec.tau + push[k];
      report.uniformity_side_max = std::max(report.uniformity_side_max, std::abs(push[k]));
    }
  }
  double scale_max = 0;
  for (std::size_t k = 0; k < full.size(); ++k) {
    scale_max = std::max(scale_max, std::abs(full[k]));
    report.max_abs_deviation = std::max(report.max_abs_deviation, std::abs(full[k] - rhs[k]));
  }
  report.max_relative_deviation = scale_max > 0 ? report.max_abs_deviation / scale_max : report.max_abs_deviation;
  for (auto& p : params) p.zero_grad();
  return report;
}

#define RINV_INSTANTIATE_LOSSES(T)                                                                  \
  template Tensor<T> similarity_matrix(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> loss_mse(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> loss_uniformity(const Tensor<T>&, const Tensor<T>&, const LossSpec&);          \
  template Tensor<T> loss_contrastive(const Tensor<T>&, const Tensor<T>&, const LossSpec&);         \
  template Tensor<T> compute_loss(const Tensor<T>&, const Tensor<T>&, const LossSpec&);             \
  template Tensor<T> uniformity_weights(const Tensor<T>&, double);                                  \
  template GradientDecompositionReport gradient_decomposition_check(                                \
      const std::function<Tensor<T>()>&, std::vector<Tensor<T>>, const Tensor<T>&, const LossSpec&);

RINV_INSTANTIATE_LOSSES(float)
RINV_INSTANTIATE_LOSSES(double)

#undef RINV_INSTANTIATE_LOSSES

}  // namespace rinv
