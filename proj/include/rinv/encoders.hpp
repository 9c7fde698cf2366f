#pragma once

#include <string>
#include <vector>

#include "rinv/corruptions.hpp"
#include "rinv/rng.hpp"
#include "rinv/tensor.hpp"

namespace rinv {

enum class Architecture { SmallConv, MLP };
enum class InitScheme { FanIn, Zero };

struct EncoderConfig {
  Architecture architecture = Architecture::SmallConv;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t embed_dim = 64;
  // SmallConv takes exactly three conv widths; MLP takes one width per hidden layer.
  std::vector<std::size_t> widths{8, 16, 32};
  bool normalize_output = true;
  InitScheme init = InitScheme::FanIn;

  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

// Closed-form parameter count implied by a config.
std::size_t expected_parameter_count(const EncoderConfig& config);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

/// Image encoder producing (by default) unit-norm embeddings. Serves as both
/// the frozen teacher and the trainable student.
template <typename T>
class EncoderModel {
 public:
  EncoderModel(EncoderConfig config, std::vector<NamedTensor<T>> params);

  const EncoderConfig& config() const { return config_; }
  const std::vector<NamedTensor<T>>& named_parameters() const { return params_; }
  std::vector<Tensor<T>> parameters() const;
  const Tensor<T>& parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  bool frozen() const { return frozen_; }
  // Frozen parameters do not require gradients, so no graph is recorded
  // through them.
  void set_frozen(bool frozen);

  // Requires a normalized batch whose image shape matches the config.
  Tensor<T> embed(const ImageBatch<T>& batch) const;
  // Forward pass on a raw B x C x H x W tensor, before the output normalization.
  Tensor<T> features(const Tensor<T>& x) const;

  // Deep copy with its own parameter storage.
  EncoderModel clone() const;

 private:
  EncoderConfig config_;
  std::vector<NamedTensor<T>> params_;
  bool frozen_ = false;
};

template <typename T>
EncoderModel<T> build_encoder(const EncoderConfig& config, RngStream rng);

template <typename T>
struct LinearHead {
  Tensor<T> weight;  // d x num_classes
  Tensor<T> bias;    // num_classes

  std::size_t num_classes() const { return weight.dim(1); }
  std::size_t input_dim() const { return weight.dim(0); }
  std::vector<Tensor<T>> parameters() const { return {weight, bias}; }
  LinearHead clone() const { return {weight.clone(), bias.clone()}; }
};

template <typename T>
LinearHead<T> build_head(std::size_t input_dim, std::size_t num_classes, RngStream rng);

template <typename T>
Tensor<T> head_logits(const LinearHead<T>& head, const Tensor<T>& embeddings);

template <typename T>
struct SupervisedModel {
  EncoderModel<T> encoder;
  LinearHead<T> head;
};

/// Drops the head and returns a frozen, output-normalized copy of the encoder.
template <typename T>
EncoderModel<T> teacher_from_supervised(const SupervisedModel<T>& model);

}  // namespace rinv
