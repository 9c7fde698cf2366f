#include "rinv/encoders.hpp"

#include <cmath>

#include "rinv/ops.hpp"

namespace rinv {

void EncoderConfig::validate() const {
  if (embed_dim < 2) throw ConfigError("embed_dim must be >= 2");
  if (widths.empty()) throw ConfigError("widths must be nonempty");
  for (std::size_t w : widths)
    if (w == 0) throw ConfigError("layer widths must be positive");
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("input shape must be positive");
  if (architecture == Architecture::SmallConv) {
    if (widths.size() != 3) throw ConfigError("SmallConv takes exactly three widths");
    if (height % 2 || width % 2) throw ConfigError("SmallConv needs even spatial size for pooling");
  }
}

std::size_t expected_parameter_count(const EncoderConfig& c) {
  c.validate();
  const std::size_t d = c.embed_dim;
  if (c.architecture == Architecture::SmallConv) {
    const std::size_t w1 = c.widths[0], w2 = c.widths[1], w3 = c.widths[2];
    return (w1 * c.channels * 9 + w1) + (w2 * w1 * 9 + w2) + (w3 * w2 * 9 + w3) + (w3 * d + d);
  }
  std::size_t in = c.channels * c.height * c.width, total = 0;
  for (std::size_t w : c.widths) {
    total += in * w + w;
    in = w;
  }
  return total + in * d + d;
}

template <typename T>
EncoderModel<T>::EncoderModel(EncoderConfig config, std::vector<NamedTensor<T>> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  set_frozen(false);
}

template <typename T>
std::vector<Tensor<T>> EncoderModel<T>::parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

template <typename T>
const Tensor<T>& EncoderModel<T>::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ContractError("no parameter named " + name);
}

template <typename T>
std::size_t EncoderModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void EncoderModel<T>::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : params_) p.tensor.set_requires_grad(!frozen);
}

template <typename T>
Tensor<T> EncoderModel<T>::features(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != config_.channels || x.dim(2) != config_.height ||
      x.dim(3) != config_.width) {
    throw DimensionError("encoder expects B x " + std::to_string(config_.channels) + " x " +
                         std::to_string(config_.height) + " x " + std::to_string(config_.width) +
                         " input, got " + shape_str(x.shape()));
  }
  if (config_.architecture == Architecture::SmallConv) {
    auto block = [this](const Tensor<T>& h, const char* layer) {
      const std::string name(layer);
      return relu(add_channel_bias(conv2d(h, parameter(name + ".weight"), 1),
                                   parameter(name + ".bias")));
    };
    Tensor<T> h = block(x, "conv1");
    h = block(h, "conv2");
    h = avg_pool2d(h);
    h = block(h, "conv3");
    h = global_avg_pool(h);
    return add_row_bias(matmul(h, parameter("fc.weight")), parameter("fc.bias"));
  }
  Tensor<T> h = reshape(x, {x.dim(0), config_.channels * config_.height * config_.width});
  for (std::size_t i = 0; i < config_.widths.size(); ++i) {
    const std::string name = "fc" + std::to_string(i + 1);
    h = relu(add_row_bias(matmul(h, parameter(name + ".weight")), parameter(name + ".bias")));
  }
  return add_row_bias(matmul(h, parameter("out.weight")), parameter("out.bias"));
}

template <typename T>
Tensor<T> EncoderModel<T>::embed(const ImageBatch<T>& batch) const {
  if (!batch.normalized) throw ContractError("embed: batch must be normalized first");
  Tensor<T> z = features(batch.values);
  return config_.normalize_output ? l2_normalize_rows(z) : z;
}

template <typename T>
EncoderModel<T> EncoderModel<T>::clone() const {
  std::vector<NamedTensor<T>> copy;
  for (const auto& p : params_) copy.push_back({p.name, p.tensor.detach()});
  EncoderModel out(config_, std::move(copy));
  out.set_frozen(frozen_);
  return out;
}

namespace {

template <typename T>
Tensor<T> init_tensor(Shape shape, std::size_t fan_in, double gain, InitScheme scheme, RngStream rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  if (scheme == InitScheme::Zero) return t;
  const double std = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& v : t.data_mut()) v = static_cast<T>(std * rng.standard_normal());
  return t;
}

}  // namespace

template <typename T>
EncoderModel<T> build_encoder(const EncoderConfig& c, RngStream rng) {
  c.validate();
  std::vector<NamedTensor<T>> params;
  auto add = [&](const std::string& name, Shape shape, std::size_t fan_in, double gain) {
    params.push_back({name + ".weight", init_tensor<T>(std::move(shape), fan_in, gain, c.init, rng.child(name))});
  };
  auto bias = [&](const std::string& name, std::size_t n) {
    params.push_back({name + ".bias", Tensor<T>::zeros({n})});
  };
  if (c.architecture == Architecture::SmallConv) {
    std::size_t in = c.channels;
    const char* names[] = {"conv1", "conv2", "conv3"};
    for (std::size_t i = 0; i < 3; ++i) {
      add(names[i], {c.widths[i], in, 3, 3}, in * 9, 2.0);
      bias(names[i], c.widths[i]);
      in = c.widths[i];
    }
    add("fc", {in, c.embed_dim}, in, 1.0);
    bias("fc", c.embed_dim);
  } else {
    std::size_t in = c.channels * c.height * c.width;
    for (std::size_t i = 0; i < c.widths.size(); ++i) {
      const std::string name = "fc" + std::to_string(i + 1);
      add(name, {in, c.widths[i]}, in, 2.0);
      bias(name, c.widths[i]);
      in = c.widths[i];
    }
    add("out", {in, c.embed_dim}, in, 1.0);
    bias("out", c.embed_dim);
  }
  return EncoderModel<T>(c, std::move(params));
}

template <typename T>
LinearHead<T> build_head(std::size_t input_dim, std::size_t num_classes, RngStream rng) {
  if (num_classes < 1 || input_dim < 1) throw ConfigError("head dimensions must be positive");
  LinearHead<T> head{init_tensor<T>({input_dim, num_classes}, input_dim, 1.0, InitScheme::FanIn, rng),
                     Tensor<T>::zeros({num_classes})};
  head.weight.set_requires_grad(true);
  head.bias.set_requires_grad(true);
  return head;
}

template <typename T>
Tensor<T> head_logits(const LinearHead<T>& head, const Tensor<T>& embeddings) {
  if (embeddings.rank() != 2 || embeddings.dim(1) != head.input_dim()) {
    throw DimensionError("head expects B x " + std::to_string(head.input_dim()) +
                         " embeddings, got " + shape_str(embeddings.shape()));
  }
  return add_row_bias(matmul(embeddings, head.weight), head.bias);
}

template <typename T>
EncoderModel<T> teacher_from_supervised(const SupervisedModel<T>& model) {
  EncoderModel<T> teacher = model.encoder.clone();
  EncoderConfig cfg = teacher.config();
  cfg.normalize_output = true;
  std::vector<NamedTensor<T>> params = teacher.named_parameters();
  EncoderModel<T> out(cfg, std::move(params));
  out.set_frozen(true);
  return out;
}

#define RINV_INSTANTIATE_ENCODERS(T)                                                   \
  template class EncoderModel<T>;                                                      \
  template EncoderModel<T> build_encoder<T>(const EncoderConfig&, RngStream);          \
  template LinearHead<T> build_head<T>(std::size_t, std::size_t, RngStream);           \
  template Tensor<T> head_logits(const LinearHead<T>&, const Tensor<T>&);              \
  template EncoderModel<T> teacher_from_supervised(const SupervisedModel<T>&);

RINV_INSTANTIATE_ENCODERS(float)
RINV_INSTANTIATE_ENCODERS(double)

#undef RINV_INSTANTIATE_ENCODERS

}  // namespace rinv
