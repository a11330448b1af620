#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fsdet/layers.hpp"
#include "fsdet/meta.hpp"
#include "fsdet/tensor.hpp"
#include "fsdet/toydata.hpp"

namespace fsdet {

/// Layer widths of the toy detector. The backbone downsamples by 4 (two stride-2 convs), so a
/// 32x32 crop yields a feature_channels x 8 x 8 map; 2x2 max pooling brings it to 4x4 before the
/// MR module.
struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t stem_channels = 12;
  std::size_t feature_channels = 16;
  std::size_t box_channels = 16;
  std::size_t way = 3;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Shared feature extractor for supports and query RoIs.
struct Backbone {
  LayerParams conv1;  // stride 2
  LayerParams conv2;  // stride 2
};

struct BackboneTrace {
  Tensor input;
  Tensor conv1_out;
  Tensor conv1_act;
  Tensor conv2_out;
  Tensor features;  // relu(conv2_out)
};

BackboneTrace backbone_forward(const Tensor& crop, const Backbone& backbone);
/// Accumulates backbone gradients; the image gradient is not needed and not returned.
void backbone_backward(const BackboneTrace& trace, const Tensor& grad_features,
                       Backbone& backbone);

/// 2x2 / stride 2 max pooling applied to every backbone map before it enters the MR module:
/// the support max-pooling step, and the RoI max pooling onto the same grid for queries.
MaxPoolResult pool_for_embedding(const Tensor& features);

/// Parameterized box offsets relative to a proposal: center shifts in units of the proposal size
/// and log size ratios.
struct BoxDelta {
  double tx = 0.0, ty = 0.0, tw = 0.0, th = 0.0;

  friend bool operator==(const BoxDelta&, const BoxDelta&) = default;
};

BoxDelta encode_box(const Box& proposal, const Box& target);
Box decode_box(const Box& proposal, const BoxDelta& delta);

/// Class-agnostic box regressor: conv block (3x3, stride 2) -> relu -> global average pool ->
/// fc to 4 deltas. The final fc starts at zero, so untrained proposals pass through unchanged.
struct BoxHead {
  LayerParams conv;
  LayerParams fc;
};

struct BoxTrace {
  Tensor input;
  Tensor conv_out;
  Tensor conv_act;
  Tensor pooled;
  BoxDelta delta;
};

BoxTrace box_head_forward(const Tensor& roi_features, const BoxHead& head);
/// Returns d loss / d roi_features and accumulates head gradients.
Tensor box_head_backward(const BoxTrace& trace, const BoxDelta& grad_delta, BoxHead& head);

/// How an RoI / support map becomes a vector in the metric space.
enum class EmbeddingMode {
  /// Through the (adapted) MR module.
  meta_module,
  /// Global average of the pooled backbone map; the no-MR ablation.
  backbone_pool,
};

struct Model {
  ModelConfig config;
  Backbone backbone;
  MRModule mr;
  BoxHead box_head;

  static Model create(const ModelConfig& config, std::uint64_t seed);

  /// Every checkpointed layer, in checkpoint order. The MR fc_head is excluded: it is re-drawn
  /// for every episode.
  std::vector<LayerParams*> persistent_layers();
  std::vector<const LayerParams*> persistent_layers() const;
  void zero_grad();
};

}  // namespace fsdet
