#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fsdet/layers.hpp"
#include "fsdet/tensor.hpp"

namespace fsdet {

/// Feature-reconstruction head adapted per episode.
///
/// embed: conv1 (3x3, stride 2, d -> 2d) -> relu -> conv2 (3x3, stride 1, 2d -> 2d) -> relu ->
/// global average pool, giving a 2d-dimensional vector. fc_head classifies prototypes during
/// the inner loop only and is never applied to queries.
struct MRModule {
  LayerParams conv1;
  LayerParams conv2;
  LayerParams fc_head;
  std::size_t in_channels = 0;
  std::size_t embed_dim = 0;

  static MRModule create(std::size_t in_channels, std::size_t way, Rng& rng);

  /// Fresh seeded fc_head of width `way`.
  void reset_head(std::size_t way, std::uint64_t seed);
  std::size_t way() const { return fc_head.weights.dim(0); }

  std::vector<LayerParams*> parameters() { return {&conv1, &conv2, &fc_head}; }
  std::vector<LayerParams*> trunk_parameters() { return {&conv1, &conv2}; }
  void zero_grad();

  friend bool operator==(const MRModule&, const MRModule&) = default;
};

/// Saved activations of one embed call, needed by embed_backward.
struct EmbedTrace {
  Tensor input;
  Tensor conv1_out;
  Tensor conv1_act;
  Tensor conv2_out;
  Tensor conv2_act;
  Tensor embedding;
};

EmbedTrace embed_forward(const Tensor& feature_map, const MRModule& mr);
Tensor embed(const Tensor& feature_map, const MRModule& mr);
/// Accumulates conv1 / conv2 gradients into `mr` and returns d loss / d feature_map.
Tensor embed_backward(const EmbedTrace& trace, const Tensor& grad_embedding, MRModule& mr);

struct Prototype {
  std::size_t class_index = 0;
  Tensor vector;
  std::size_t k_used = 0;
};

/// Per episode class (vector index = episode-local class), the items of that class.
template <typename T>
using ClassGroups = std::vector<std::vector<T>>;

/// Intra-class mean of the support embeddings, one prototype per class. Throws SamplingError
/// for a class without embeddings.
std::vector<Prototype> build_prototypes(const ClassGroups<Tensor>& support_embeddings);

struct InnerLoopConfig {
  double meta_lr = 0.01;
  std::size_t steps = 30;
  /// fc label of every episode class (a permutation of 0..N-1).
  std::vector<std::size_t> label_assignment;
  /// When set, fc_head is re-drawn from this seed before the first step.
  std::optional<std::uint64_t> head_seed;

  void validate(std::size_t way) const;
};

struct InnerAdaptation {
  MRModule adapted;
  /// Inner loss before each step, then once more after the last step (steps + 1 values).
  std::vector<double> losses;
};

/// Inner-loop loss on a set of support feature maps: embed every support, average into
/// prototypes, classify each prototype with fc_head against its assigned label, and take the
/// mean cross-entropy over prototypes. Gradients of conv1, conv2 and fc_head are accumulated
/// into `mr`. Per-prototype losses are written to `per_class` when given.
double inner_loss_backward(MRModule& mr, const ClassGroups<Tensor>& support_maps,
                           std::span<const std::size_t> labels,
                           std::vector<double>* per_class = nullptr);

/// Same loss without gradients.
double inner_loss(const MRModule& mr, const ClassGroups<Tensor>& support_maps,
                  std::span<const std::size_t> labels, std::vector<double>* per_class = nullptr);

/// Adapts a copy of `mr` by cfg.steps plain SGD steps on the inner loss. The input module is
/// never modified. Throws TrainingError when the inner loss goes non-finite.
InnerAdaptation inner_adapt(const MRModule& mr, const ClassGroups<Tensor>& support_maps,
                            const InnerLoopConfig& cfg);

/// Embeds query RoI maps with the adapted module (fc_head unused).
std::vector<Tensor> reconstruct_queries(const MRModule& adapted,
                                        std::span<const Tensor> roi_feature_maps);

}  // namespace fsdet
