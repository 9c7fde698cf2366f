#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "rinv/errors.hpp"

namespace rinv {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// 64-bit runs are the verification mode: every op output and every gradient
// is checked for NaN/Inf.
template <typename T>
inline constexpr bool kVerificationMode = std::is_same_v<T, double>;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

/// Dense row-major tensor with optional gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage and graph node.
/// Use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Mutation is reserved for optimizers and for filling freshly created tensors.
  std::span<T> data_mut() { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const;
  std::span<T> grad_mut();
  void zero_grad();

  T item() const;
  T operator[](std::size_t flat_index) const { return node_->data[flat_index]; }

  Tensor detach() const;
  Tensor clone() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are reset on every call.
template <typename T>
void backward(const Tensor<T>& loss);

bool grad_enabled();

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Builds an op output. The node records parents and a backward closure only
// when grad mode is on and at least one parent requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<TensorNode<T>>> parents,
                      std::function<void(TensorNode<T>&)> backward_fn,
                      const char* op_name);

template <typename T>
void check_finite(std::span<const T> values, const char* what);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace rinv
