#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "fsdet/tensor.hpp"
#include "fsdet/toydata.hpp"

namespace fsdet {

/// Episode-local index of the background class. Foreground classes are 1..way-1.
inline constexpr std::size_t kBackgroundClass = 0;
inline constexpr std::size_t kNoDatasetClass = std::numeric_limits<std::size_t>::max();
/// Background support crops overlap every annotated box by at most this IoU.
inline constexpr double kSupportBackgroundMaxIou = 0.1;

struct SupportItem {
  std::size_t episode_class = 0;
  /// Dataset class id, kNoDatasetClass for background crops.
  std::size_t dataset_class = kNoDatasetClass;
  Box box;
  /// Annotations of the scene the crop was taken from.
  std::vector<SceneObject> scene_objects;
  std::uint64_t scene_seed = 0;
  Tensor crop;
};

struct QueryScene {
  ToyScene scene;
  /// Episode-local label of every object in scene.objects.
  std::vector<std::size_t> object_labels;
  std::vector<Proposal> proposals;
};

struct EpisodeSpec {
  Split split = Split::base;
  std::size_t way = 3;
  std::size_t shot = 5;
  /// Query scenes per foreground class.
  std::size_t n_query = 6;
  std::size_t n_bg_proposals = 4;
  double jitter = 0.15;
  /// Objects per query scene (1 guaranteed object of the scene's class plus extras drawn from the
  /// episode's foreground classes).
  std::size_t max_query_objects = 3;
};

/// One N-way K-shot task. `classes[i]` is the dataset class of episode class i + 1.
struct Episode {
  std::size_t way = 0;
  std::size_t shot = 0;
  Split split = Split::base;
  std::vector<std::size_t> classes;
  /// support[c] holds the `shot` items of episode class c; support[0] is background.
  std::vector<std::vector<SupportItem>> support;
  std::vector<QueryScene> queries;
  /// fc label assigned to every episode class in the inner loop.
  std::vector<std::size_t> label_perm;
  std::uint64_t seed = 0;
};

/// Deterministic in (dataset, spec, seed). Throws SamplingError when the split has fewer than
/// way - 1 classes, and ConfigError when the split overlaps.
Episode sample_episode(const ToyDataset& dataset, const EpisodeSpec& spec, std::uint64_t seed);

/// One query proposal prepared for the detector.
struct RoiSample {
  std::size_t query = 0;
  std::size_t proposal = 0;
  Box box;
  Tensor crop;
  std::size_t label = kBackgroundClass;
  /// Matched ground truth (IoU >= 0.5) for foreground RoIs.
  bool has_target = false;
  Box target;
};

/// Crops every proposal of every query scene, labels it by the best-overlapping ground truth
/// (IoU >= 0.5 gives that object's class, anything else is background).
std::vector<RoiSample> collect_rois(const Episode& episode, std::size_t resolution);

}  // namespace fsdet
