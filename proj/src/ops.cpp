#include "rinv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace rinv {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

void require(bool ok, const std::string& message) {
  if (!ok) throw DimensionError(message);
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  require(t.defined() && t.rank() == rank,
          std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
              (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Builds the patch matrix of one image: rows index (c, ki, kj), columns index
// output positions.
template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t pad, std::size_t Ho, std::size_t Wo, T* cols) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* row = cols + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh + ki) - static_cast<long>(pad);
          T* out = row + oh * Wo;
          if (ih < 0 || ih >= static_cast<long>(H)) {
            std::fill(out, out + Wo, T(0));
            continue;
          }
          const T* src = img + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow + kj) - static_cast<long>(pad);
            out[ow] = (iw < 0 || iw >= static_cast<long>(W)) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                std::size_t pad, std::size_t Ho, std::size_t Wo, T* img) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* row = cols + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh + ki) - static_cast<long>(pad);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          T* dst = img + (c * H + static_cast<std::size_t>(ih)) * W;
          const T* in = row + oh * Wo;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow + kj) - static_cast<long>(pad);
            if (iw >= 0 && iw < static_cast<long>(W)) dst[iw] += in[ow];
          }
        }
      }
    }
  }
}

template <typename T, typename Fwd, typename Grad>
Tensor<T> unary(const Tensor<T>& a, Fwd fwd, Grad grad, const char* name) {
  std::vector<T> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  NodePtr<T> pa = a.node_ptr();
  return detail::make_result<T>(
      a.shape(), std::move(out), {pa},
      [pa, grad](TensorNode<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          pa->grad[i] += self.grad[i] * grad(pa->data[i], self.data[i]);
        }
      },
      name);
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  require(b.dim(0) == K, "matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  std::vector<T> out(M * N);
  MapMat<T>(out.data(), M, N).noalias() =
      ConstMapMat<T>(a.data().data(), M, K) * ConstMapMat<T>(b.data().data(), K, N);
  NodePtr<T> pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result<T>(
      {M, N}, std::move(out), {pa, pb},
      [pa, pb, M, K, N](TensorNode<T>& self) {
        ConstMapMat<T> g(self.grad.data(), M, N);
        if (pa->requires_grad) {
          MapMat<T>(pa->grad.data(), M, K).noalias() +=
              g * ConstMapMat<T>(pb->data.data(), K, N).transpose();
        }
        if (pb->requires_grad) {
          MapMat<T>(pb->grad.data(), K, N).noalias() +=
              ConstMapMat<T>(pa->data.data(), M, K).transpose() * g;
        }
      },
      "matmul");
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t M = a.dim(0), N = a.dim(1);
  std::vector<T> out(M * N);
  auto in = a.data();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) out[j * M + i] = in[i * N + j];
  NodePtr<T> pa = a.node_ptr();
  return detail::make_result<T>(
      {N, M}, std::move(out), {pa},
      [pa, M, N](TensorNode<T>& self) {
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t j = 0; j < N; ++j) pa->grad[i * N + j] += self.grad[j * M + i];
      },
      "transpose");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  NodePtr<T> pa = a.node_ptr();
  return detail::make_result<T>(
      std::move(shape), std::move(out), {pa},
      [pa](TensorNode<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      },
      "reshape");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  NodePtr<T> pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result<T>(
      a.shape(), std::move(out), {pa, pb},
      [pa, pb](TensorNode<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (pa->requires_grad) pa->grad[i] += self.grad[i];
          if (pb->requires_grad) pb->grad[i] += self.grad[i];
        }
      },
      "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  NodePtr<T> pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result<T>(
      a.shape(), std::move(out), {pa, pb},
      [pa, pb](TensorNode<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (pa->requires_grad) pa->grad[i] += self.grad[i];
          if (pb->requires_grad) pb->grad[i] -= self.grad[i];
        }
      },
      "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  NodePtr<T> pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result<T>(
      a.shape(), std::move(out), {pa, pb},
      [pa, pb](TensorNode<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
          if (pa->requires_grad) pa->grad[i] += self.grad[i] * pb->data[i];
          if (pb->requires_grad) pb->grad[i] += self.grad[i] * pa->data[i];
        }
      },
      "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; }, "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  return unary<T>(
      a, [value](T x) { return x + value; }, [](T, T) { return T(1); }, "add_scalar");
}

template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x, 2, "add_row_bias");
  require_rank(bias, 1, "add_row_bias");
  const std::size_t N = x.dim(0), M = x.dim(1);
  require(bias.dim(0) == M, "add_row_bias: bias length " + std::to_string(bias.dim(0)) +
                                " does not match " + std::to_string(M) + " columns");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < M; ++j) out[i * M + j] += bias.data()[j];
  NodePtr<T> px = x.node_ptr(), pb = bias.node_ptr();
  return detail::make_result<T>(
      x.shape(), std::move(out), {px, pb},
      [px, pb, N, M](TensorNode<T>& self) {
        if (px->requires_grad)
          for (std::size_t i = 0; i < N * M; ++i) px->grad[i] += self.grad[i];
        if (pb->requires_grad)
          for (std::size_t i = 0; i < N; ++i)
            for (std::size_t j = 0; j < M; ++j) pb->grad[j] += self.grad[i * M + j];
      },
      "add_row_bias");
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x, 4, "add_channel_bias");
  require_rank(bias, 1, "add_channel_bias");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(bias.dim(0) == C, "add_channel_bias: bias length does not match channel count");
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      T* row = out.data() + (b * C + c) * HW;
      const T v = bias.data()[c];
      for (std::size_t i = 0; i < HW; ++i) row[i] += v;
    }
  NodePtr<T> px = x.node_ptr(), pb = bias.node_ptr();
  return detail::make_result<T>(
      x.shape(), std::move(out), {px, pb},
      [px, pb, B, C, HW](TensorNode<T>& self) {
        if (px->requires_grad)
          for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        if (pb->requires_grad)
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
              const T* row = self.grad.data() + (b * C + c) * HW;
              T acc = 0;
              for (std::size_t i = 0; i < HW; ++i) acc += row[i];
              pb->grad[c] += acc;
            }
      },
      "add_channel_bias");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); },
      "relu");
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary<T>(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; }, "log");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  NodePtr<T> pa = a.node_ptr();
  return detail::make_result<T>(
      {1}, {acc}, {pa},
      [pa](TensorNode<T>& self) {
        for (auto& g : pa->grad) g += self.grad[0];
      },
      "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "rowwise_dot");
  require_same_shape(a, b, "rowwise_dot");
  const std::size_t N = a.dim(0), D = a.dim(1);
  std::vector<T> out(N, T(0));
  for (std::size_t i = 0; i < N; ++i) {
    T acc = 0;
    for (std::size_t k = 0; k < D; ++k) acc += a.data()[i * D + k] * b.data()[i * D + k];
    out[i] = acc;
  }
  NodePtr<T> pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result<T>(
      {N}, std::move(out), {pa, pb},
      [pa, pb, N, D](TensorNode<T>& self) {
        for (std::size_t i = 0; i < N; ++i) {
          const T g = self.grad[i];
          for (std::size_t k = 0; k < D; ++k) {
            if (pa->requires_grad) pa->grad[i * D + k] += g * pb->data[i * D + k];
            if (pb->requires_grad) pb->grad[i * D + k] += g * pa->data[i * D + k];
          }
        }
      },
      "rowwise_dot");
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t padding) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t F = w.dim(0), k = w.dim(2);
  require(w.dim(1) == C, "conv2d: kernel expects " + std::to_string(w.dim(1)) +
                             " input channels, input has " + std::to_string(C));
  require(w.dim(3) == k, "conv2d: kernel must be square");
  require(k % 2 == 1, "conv2d: kernel size must be odd");
  require(H + 2 * padding >= k && W + 2 * padding >= k, "conv2d: kernel larger than padded input");
  const std::size_t Ho = H + 2 * padding - k + 1, Wo = W + 2 * padding - k + 1;
  const std::size_t patch = C * k * k, npos = Ho * Wo;

  std::vector<T> out(B * F * npos);
  std::vector<T> cols(patch * npos);
  ConstMapMat<T> wm(w.data().data(), F, patch);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(x.data().data() + b * C * H * W, C, H, W, k, padding, Ho, Wo, cols.data());
    MapMat<T>(out.data() + b * F * npos, F, npos).noalias() =
        wm * ConstMapMat<T>(cols.data(), patch, npos);
  }

  NodePtr<T> px = x.node_ptr(), pw = w.node_ptr();
  return detail::make_result<T>(
      {B, F, Ho, Wo}, std::move(out), {px, pw},
      [=](TensorNode<T>& self) {
        std::vector<T> buf(patch * npos);
        ConstMapMat<T> wmat(pw->data.data(), F, patch);
        for (std::size_t b = 0; b < B; ++b) {
          ConstMapMat<T> g(self.grad.data() + b * F * npos, F, npos);
          if (pw->requires_grad) {
            im2col(px->data.data() + b * C * H * W, C, H, W, k, padding, Ho, Wo, buf.data());
            MapMat<T>(pw->grad.data(), F, patch).noalias() +=
                g * ConstMapMat<T>(buf.data(), patch, npos).transpose();
          }
          if (px->requires_grad) {
            MapMat<T>(buf.data(), patch, npos).noalias() = wmat.transpose() * g;
            col2im_add(buf.data(), C, H, W, k, padding, Ho, Wo,
                       px->grad.data() + b * C * H * W);
          }
        }
      },
      "conv2d");
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x) {
  require_rank(x, 4, "avg_pool2d");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "avg_pool2d: spatial size must be even, got " +
                                        shape_str(x.shape()));
  const std::size_t Ho = H / 2, Wo = W / 2, planes = B * C;
  std::vector<T> out(planes * Ho * Wo);
  auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        const T* base = in.data() + p * H * W + 2 * i * W + 2 * j;
        out[(p * Ho + i) * Wo + j] = T(0.25) * (base[0] + base[1] + base[W] + base[W + 1]);
      }
  NodePtr<T> px = x.node_ptr();
  return detail::make_result<T>(
      {B, C, Ho, Wo}, std::move(out), {px},
      [px, planes, H, W, Ho, Wo](TensorNode<T>& self) {
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j) {
              const T g = T(0.25) * self.grad[(p * Ho + i) * Wo + j];
              T* base = px->grad.data() + p * H * W + 2 * i * W + 2 * j;
              base[0] += g;
              base[1] += g;
              base[W] += g;
              base[W + 1] += g;
            }
      },
      "avg_pool2d");
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x, 4, "global_avg_pool");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<T> out(B * C);
  for (std::size_t p = 0; p < B * C; ++p) {
    T acc = 0;
    for (std::size_t i = 0; i < HW; ++i) acc += x.data()[p * HW + i];
    out[p] = acc / static_cast<T>(HW);
  }
  NodePtr<T> px = x.node_ptr();
  return detail::make_result<T>(
      {B, C}, std::move(out), {px},
      [px, B, C, HW](TensorNode<T>& self) {
        for (std::size_t p = 0; p < B * C; ++p) {
          const T g = self.grad[p] / static_cast<T>(HW);
          for (std::size_t i = 0; i < HW; ++i) px->grad[p * HW + i] += g;
        }
      },
      "global_avg_pool");
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis) require(p.dim(d) == first[d], "concat: shape mismatch off the concat axis");
    }
    shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_stride = shape[axis] * inner;

  std::vector<T> out(shape_numel(shape));
  std::vector<NodePtr<T>> nodes;
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t width = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * width, width, out.data() + o * out_stride + offset);
    nodes.push_back(p.node_ptr());
    widths.push_back(width);
    offset += width;
  }
  auto parents = nodes;
  return detail::make_result<T>(
      std::move(shape), std::move(out), std::move(parents),
      [nodes, widths, outer, out_stride](TensorNode<T>& self) {
        std::size_t off = 0;
        for (std::size_t n = 0; n < nodes.size(); ++n) {
          if (nodes[n]->requires_grad) {
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < widths[n]; ++i)
                nodes[n]->grad[o * widths[n] + i] += self.grad[o * out_stride + off + i];
          }
          off += widths[n];
        }
      },
      "concat");
}

template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  require_rank(x, 2, "l2_normalize_rows");
  const std::size_t N = x.dim(0), D = x.dim(1);
  std::vector<T> out(N * D);
  std::vector<T> norms(N);
  for (std::size_t i = 0; i < N; ++i) {
    T sq = 0;
    for (std::size_t k = 0; k < D; ++k) sq += x.data()[i * D + k] * x.data()[i * D + k];
    const T norm = std::sqrt(sq);
    if (!(norm > static_cast<T>(kNormFloor))) {
      throw DegenerateEmbeddingError("l2_normalize_rows: row " + std::to_string(i) +
                                     " has norm " + std::to_string(static_cast<double>(norm)) +
                                     " at or below the norm floor");
    }
    norms[i] = norm;
    for (std::size_t k = 0; k < D; ++k) out[i * D + k] = x.data()[i * D + k] / norm;
  }
  NodePtr<T> px = x.node_ptr();
  return detail::make_result<T>(
      x.shape(), std::move(out), {px},
      [px, norms, N, D](TensorNode<T>& self) {
        for (std::size_t i = 0; i < N; ++i) {
          const T* y = self.data.data() + i * D;
          const T* g = self.grad.data() + i * D;
          T proj = 0;
          for (std::size_t k = 0; k < D; ++k) proj += y[k] * g[k];
          for (std::size_t k = 0; k < D; ++k) px->grad[i * D + k] += (g[k] - y[k] * proj) / norms[i];
        }
      },
      "l2_normalize_rows");
}

namespace {

template <typename T>
Tensor<T> lse_rows_impl(const Tensor<T>& x, const std::uint8_t* mask, const char* name) {
  require_rank(x, 2, name);
  const std::size_t N = x.dim(0), M = x.dim(1);
  auto in = x.data();
  if constexpr (kVerificationMode<T>) detail::check_finite<T>(in, name);
  std::vector<T> out(N);
  // Row-wise softmax weights, saved for the backward pass.
  std::vector<T> weights(N * M, T(0));
  for (std::size_t i = 0; i < N; ++i) {
    T hi = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < M; ++j) {
      if (mask && !mask[i * M + j]) continue;
      hi = std::max(hi, in[i * M + j]);
      any = true;
    }
    if (!any) throw DimensionError(std::string(name) + ": row " + std::to_string(i) + " is fully masked");
    T total = 0;
    for (std::size_t j = 0; j < M; ++j) {
      if (mask && !mask[i * M + j]) continue;
      const T e = std::exp(in[i * M + j] - hi);
      weights[i * M + j] = e;
      total += e;
    }
    out[i] = hi + std::log(total);
    for (std::size_t j = 0; j < M; ++j) weights[i * M + j] /= total;
  }
  NodePtr<T> px = x.node_ptr();
  return detail::make_result<T>(
      {N}, std::move(out), {px},
      [px, weights = std::move(weights), N, M](TensorNode<T>& self) {
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < M; ++j)
            px->grad[i * M + j] += self.grad[i] * weights[i * M + j];
      },
      name);
}

}  // namespace

template <typename T>
Tensor<T> log_sum_exp_rows(const Tensor<T>& x) {
  return lse_rows_impl(x, nullptr, "log_sum_exp_rows");
}

template <typename T>
Tensor<T> log_sum_exp_rows_masked(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  require(mask.size() == x.numel(), "log_sum_exp_rows_masked: mask size does not match input");
  return lse_rows_impl(x, mask.data(), "log_sum_exp_rows_masked");
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  require(labels.size() == N, "cross_entropy: label count does not match batch size");
  std::vector<T> probs(N * C);
  T total = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(C) + ")");
    }
    const T* row = logits.data().data() + i * C;
    const T hi = *std::max_element(row, row + C);
    T z = 0;
    for (std::size_t j = 0; j < C; ++j) {
      probs[i * C + j] = std::exp(row[j] - hi);
      z += probs[i * C + j];
    }
    for (std::size_t j = 0; j < C; ++j) probs[i * C + j] /= z;
    total += hi + std::log(z) - row[y];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  NodePtr<T> pl = logits.node_ptr();
  return detail::make_result<T>(
      {1}, {total / static_cast<T>(N)}, {pl},
      [pl, probs = std::move(probs), ys = std::move(ys), N, C](TensorNode<T>& self) {
        const T g = self.grad[0] / static_cast<T>(N);
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < C; ++j) {
            const T target = static_cast<std::size_t>(ys[i]) == j ? T(1) : T(0);
            pl->grad[i * C + j] += g * (probs[i * C + j] - target);
          }
      },
      "cross_entropy");
}

#define RINV_INSTANTIATE_OPS(T)                                                             \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> transpose(const Tensor<T>&);                                           \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                       \
  template Tensor<T> add_row_bias(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> add_channel_bias(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> relu(const Tensor<T>&);                                                \
  template Tensor<T> exp(const Tensor<T>&);                                                 \
  template Tensor<T> log(const Tensor<T>&);                                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                 \
  template Tensor<T> mean(const Tensor<T>&);                                                \
  template Tensor<T> rowwise_dot(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t);               \
  template Tensor<T> avg_pool2d(const Tensor<T>&);                                          \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                    \
  template Tensor<T> l2_normalize_rows(const Tensor<T>&);                                   \
  template Tensor<T> log_sum_exp_rows(const Tensor<T>&);                                    \
  template Tensor<T> log_sum_exp_rows_masked(const Tensor<T>&, std::span<const std::uint8_t>); \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);

RINV_INSTANTIATE_OPS(float)
RINV_INSTANTIATE_OPS(double)

#undef RINV_INSTANTIATE_OPS

}  // namespace rinv
