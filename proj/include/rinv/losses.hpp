#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rinv/tensor.hpp"

namespace rinv {

enum class LossFamily { MSEOnly, Contrastive };

// Which similarities enter the push (uniformity) term.
enum class UniformityVariant { StudentVsTeacher, StudentVsStudent, StudentVsBoth, NTXent };

struct LossSpec {
  LossFamily family = LossFamily::Contrastive;
  UniformityVariant variant = UniformityVariant::StudentVsTeacher;
  double tau = 0.1;

  void validate() const;
  std::string describe() const;
  bool operator==(const LossSpec&) const = default;
};

std::string to_string(LossFamily f);
std::string to_string(UniformityVariant v);
LossFamily loss_family_from_string(const std::string& s);
UniformityVariant uniformity_variant_from_string(const std::string& s);

// All functions below take row-unit-norm student embeddings S and teacher
// embeddings R of equal shape N x d.

/// K(i, j) = <S_i, R_j>.
template <typename T>
Tensor<T> similarity_matrix(const Tensor<T>& student, const Tensor<T>& teacher);

/// Alignment term: -(1/N) sum_i <S_i, R_i>.
template <typename T>
Tensor<T> loss_mse(const Tensor<T>& student, const Tensor<T>& teacher);

/// Push term selected by spec.variant, averaged over anchors:
///   StudentVsTeacher  log sum_j       e^{<S_i,R_j>/tau}
///   StudentVsStudent  log sum_{j!=i}  e^{<S_i,S_j>/tau}
///   StudentVsBoth     log (sum_{j!=i} e^{<S_i,S_j>/tau} + sum_j e^{<S_i,R_j>/tau})
///   NTXent            the StudentVsBoth term plus
///                     log (sum_j e^{<R_i,S_j>/tau} + sum_{j!=i} e^{<R_i,R_j>/tau})
/// Variants that exclude j = i throw BatchSizeError for N < 2.
template <typename T>
Tensor<T> loss_uniformity(const Tensor<T>& student, const Tensor<T>& teacher, const LossSpec& spec);

/// (1/tau) * loss_mse + loss_uniformity. For StudentVsTeacher this is the
/// softmax cross-entropy of each student row against the teacher rows.
template <typename T>
Tensor<T> loss_contrastive(const Tensor<T>& student, const Tensor<T>& teacher, const LossSpec& spec);

/// loss_mse for MSEOnly, loss_contrastive otherwise.
template <typename T>
Tensor<T> compute_loss(const Tensor<T>& student, const Tensor<T>& teacher, const LossSpec& spec);

/// w_i(j) = softmax_j(K(i, j) / tau). Returns a detached N x N tensor.
template <typename T>
Tensor<T> uniformity_weights(const Tensor<T>& similarity, double tau);

struct GradientDecompositionReport {
  // max_k |g_contr[k] - g_rhs[k]| / max_k |g_contr[k]|
  double max_relative_deviation = 0.0;
  double max_abs_deviation = 0.0;
  double max_row_sum_error = 0.0;
  double min_weight = 0.0;
  // Largest entry of the push-side gradient; exactly 0 for MSEOnly.
  double uniformity_side_max = 0.0;
  std::size_t parameter_entries = 0;
};

/// Compares the gradient of the full loss with respect to `params` against
/// its split into a pull part and a w_i(j)-weighted push part:
///   grad L = (1/tau) grad L_mse + 1/(tau N) sum_ij w_i(j) grad K(i, j)
/// Each side comes from its own backward pass. `student_forward` must rebuild
/// the student embeddings from `params` on every call. For MSEOnly the push
/// part is dropped and the comparison is against grad L_mse.
template <typename T>
GradientDecompositionReport gradient_decomposition_check(
    const std::function<Tensor<T>()>& student_forward, std::vector<Tensor<T>> params,
    const Tensor<T>& teacher, const LossSpec& spec);

}  // namespace rinv
