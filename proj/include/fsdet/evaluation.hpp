#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fsdet/config.hpp"
#include "fsdet/episode.hpp"
#include "fsdet/meta.hpp"
#include "fsdet/metric.hpp"
#include "fsdet/model.hpp"
#include "fsdet/toydata.hpp"

namespace fsdet {

struct Detection {
  std::size_t scene = 0;
  Box box;
  std::size_t episode_class = 0;
  double score = 0.0;
};

struct GroundTruth {
  std::size_t scene = 0;
  Box box;
  std::size_t episode_class = 0;
};

/// Greedy non-maximum suppression within each (scene, class) pair. Output is sorted by
/// descending score; equal scores keep input order.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

/// AP of one class: detections of `episode_class` are taken in descending score order and
/// matched to the ground truth of the same scene with the highest IoU. They are true positives
/// when that IoU reaches the threshold and the box is still unmatched, false positives
/// otherwise. Returns the area under the monotone precision envelope.
/// Returns 0 when the class has ground truth but no detections; nullopt when it has no ground
/// truth at all.
std::optional<double> average_precision(std::span<const Detection> detections,
                                        std::span<const GroundTruth> ground_truth,
                                        std::size_t episode_class, double iou_threshold);

/// Mean AP over the foreground classes that have ground truth (0 if none do).
double mean_average_precision(std::span<const Detection> detections,
                              std::span<const GroundTruth> ground_truth, std::size_t way,
                              double iou_threshold);

/// Lowest class confidence that still becomes a candidate detection before NMS.
inline constexpr double kCandidateScoreFloor = 0.05;
inline constexpr double kDetectionNmsIou = 0.5;

struct RoiResult {
  std::size_t query = 0;
  std::size_t proposal = 0;
  Box box;
  std::size_t label = kBackgroundClass;
  SimilarityRow row;
  BoxDelta delta;
  Box refined;
  Tensor embedding;
};

struct EpisodeRun {
  std::vector<Prototype> prototypes;
  std::vector<double> inner_losses;
  std::vector<RoiResult> rois;
  /// After NMS, every score >= the floor passed to run_episode.
  std::vector<Detection> detections;
  std::vector<GroundTruth> ground_truth;
};

/// Adapts a clone of the MR module on the episode supports, embeds every query RoI, classifies it
/// against the adapted prototypes and refines its box. Each RoI proposes one detection per
/// foreground class scored by that class confidence. The model is not modified. Constant RoI
/// embeddings are classified as background.
EpisodeRun run_episode(const Model& model, const Episode& episode, const TrainConfig& cfg,
                       double score_floor = kCandidateScoreFloor);

/// Mean Pearson similarity of each RoI embedding to its own class prototype and to every other
/// prototype.
struct ClusterStats {
  double within = 0.0;
  double cross = 0.0;
  std::size_t n_within = 0;
  std::size_t n_cross = 0;
};
ClusterStats cluster_stats(const EpisodeRun& run, double epsilon = kDegenerateEpsilon);

struct EvalOptions {
  Split split = Split::novel;
  std::size_t way = 3;
  std::size_t shot = 5;
  std::size_t n_episodes = 200;
  std::uint64_t seed = 0;
  /// Episodes are split evenly over seed groups seed + 0 .. seed + groups - 1.
  std::size_t groups = 5;
  std::size_t workers = 1;
  /// Keep prototype and RoI embeddings for export.
  bool keep_embeddings = false;
};

struct EpisodeEval {
  std::size_t index = 0;
  std::size_t group = 0;
  std::uint64_t seed = 0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  ClusterStats clusters;
  double inner_first = 0.0;
  double inner_last = 0.0;
  std::size_t n_detections = 0;
  /// Filled when EvalOptions::keep_embeddings is set.
  std::vector<Prototype> prototypes;
  std::vector<std::pair<std::size_t, Tensor>> roi_embeddings;
};

struct EvalResult {
  double ap50 = 0.0;
  double ap75 = 0.0;
  std::vector<double> group_ap50;
  std::vector<double> group_ap75;
  std::vector<EpisodeEval> episodes;
  std::size_t n_episodes = 0;
  /// Averages of the per-episode cluster means.
  double within_similarity = 0.0;
  double cross_similarity = 0.0;
  /// Fraction of episodes whose last inner loss is below the first (MR variants only).
  double inner_improved_fraction = 0.0;
  EvalOptions options;
  TrainConfig config;
};

/// Sample episode i of a seeded evaluation, as evaluate() does.
std::uint64_t evaluation_episode_seed(std::uint64_t group_seed, std::size_t index);

EvalResult evaluate(const Model& model, const TrainConfig& cfg, const ToyDataset& dataset,
                    const EvalOptions& options);

/// One line per prototype and per RoI: episode,role,class,v0,...,v{d-1}.
void write_embeddings_csv(const EvalResult& result, const std::filesystem::path& path);

}  // namespace fsdet
