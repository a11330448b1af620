#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fsdet/rng.hpp"
#include "fsdet/tensor.hpp"

namespace fsdet {

/// Trainable weights of one layer plus their gradient accumulators. Backward passes add into
/// the grad buffers; callers zero them explicitly (see zero_grad / sgd_step).
struct LayerParams {
  std::string name;
  Tensor weights;
  Tensor bias;
  Tensor grad_weights;
  Tensor grad_bias;

  /// Convolution filters [out, in, k, k] with bias [out], all zero.
  static LayerParams conv(std::string name, std::size_t out_channels, std::size_t in_channels,
                          std::size_t kernel);
  /// Fully connected weights [out, in] with bias [out], all zero.
  static LayerParams dense(std::string name, std::size_t out_features, std::size_t in_features);

  void zero_grad();
  /// Fan-in scaled normal init, std = sqrt(2 / fan_in); the bias is zeroed.
  void init_kaiming(Rng& rng);
  /// Same as init_kaiming with std = sqrt(1 / fan_in), used for layers not followed by relu.
  void init_fan_in(Rng& rng);
  std::size_t fan_in() const;
  std::size_t parameter_count() const { return weights.size() + bias.size(); }

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

// Convolution ----------------------------------------------------------------------------------

/// Cross-correlation of a [C,H,W] input with square filters [C',C,k,k], zero padding `pad`.
/// Output extent is floor((H + 2 pad - k) / stride) + 1.
Tensor conv2d_forward(const Tensor& input, const LayerParams& params, std::size_t stride,
                      std::size_t pad);

/// Returns dL/d input and accumulates dL/d weights, dL/d bias into `params`.
Tensor conv2d_backward(const Tensor& grad_out, const Tensor& saved_input, LayerParams& params,
                       std::size_t stride, std::size_t pad);

// Pooling --------------------------------------------------------------------------------------

struct MaxPoolResult {
  Tensor output;
  /// Flat input index of the winning element for every output element; first max wins ties.
  std::vector<std::size_t> argmax;
  Shape input_shape;
};

MaxPoolResult maxpool2d(const Tensor& input, std::size_t window, std::size_t stride);
Tensor maxpool2d_backward(const Tensor& grad_out, const MaxPoolResult& forward);

/// [C,H,W] -> [C], mean over each channel.
Tensor avgpool_global(const Tensor& input);
Tensor avgpool_global_backward(const Tensor& grad_out, const Shape& input_shape);

// Dense / activation ---------------------------------------------------------------------------

/// out = W x + b. The input may have any shape; it is read as a flat vector.
Tensor fc_forward(const Tensor& input, const LayerParams& params);
Tensor fc_backward(const Tensor& grad_out, const Tensor& saved_input, LayerParams& params);

Tensor relu(const Tensor& input);
/// Passes the gradient where the saved forward input was strictly positive.
Tensor relu_backward(const Tensor& grad_out, const Tensor& saved_input);

// Optimization ---------------------------------------------------------------------------------

/// Plain SGD: p -= lr * grad for every parameter, then zero the grads. Checks every gradient for
/// finiteness before touching any parameter; throws TrainingError naming the offending layer.
void sgd_step(std::span<LayerParams* const> params, double lr);

}  // namespace fsdet
