#include "rinv/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace rinv {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(shape_numel(shape), value);
  return from_data(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  if (requires_grad) node->ensure_grad();
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from_data({1}, {value});
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on) {
    node_->ensure_grad();
  } else {
    node_->grad.clear();
  }
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient buffer");
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  if (!has_grad()) throw ContractError("tensor has no gradient buffer");
  return node_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out = detach();
  if (requires_grad()) out.set_requires_grad(true);
  return out;
}

namespace detail {

template <typename T>
void check_finite(std::span<const T> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value in ") + what + " at index " +
                         std::to_string(i));
    }
  }
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::vector<std::shared_ptr<TensorNode<T>>> parents,
                      std::function<void(TensorNode<T>&)> backward_fn, const char* op_name) {
  if constexpr (kVerificationMode<T>) check_finite<T>(data, op_name);
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) track = track || p->requires_grad;
  }
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);
template Tensor<float> make_result<float>(Shape, std::vector<float>,
                                          std::vector<std::shared_ptr<TensorNode<float>>>,
                                          std::function<void(TensorNode<float>&)>, const char*);
template Tensor<double> make_result<double>(Shape, std::vector<double>,
                                            std::vector<std::shared_ptr<TensorNode<double>>>,
                                            std::function<void(TensorNode<double>&)>, const char*);

}  // namespace detail

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  TensorNode<T>* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order with parents first.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode<T>* node : order) {
    node->ensure_grad();
    if (node->backward_fn) std::fill(node->grad.begin(), node->grad.end(), T(0));
  }
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
  if constexpr (kVerificationMode<T>) {
    for (TensorNode<T>* node : order) {
      if (!node->backward_fn) detail::check_finite<T>(node->grad, "gradient");
    }
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);

}  // namespace rinv
