#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fsdet/config.hpp"
#include "fsdet/episode.hpp"
#include "fsdet/meta.hpp"
#include "fsdet/model.hpp"
#include "fsdet/toydata.hpp"

namespace fsdet {

/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise, summed over the four offsets.
double smooth_l1(const BoxDelta& pred, const BoxDelta& target);
/// d smooth_l1 / d pred.
BoxDelta smooth_l1_grad(const BoxDelta& pred, const BoxDelta& target);

struct LossReport {
  double l_cls = 0.0;
  double l_reg = 0.0;
  double l_det = 0.0;
  double lambda = 1.0;
  std::size_t n_rois = 0;
  /// RoIs that passed the foreground-confidence gate and contributed to l_reg.
  std::size_t n_regressed = 0;
};

/// Which gradient routes an outer backward pass takes. Used to isolate the query-RoI route and
/// the support-prototype route (both reach the MR trunk and the backbone) and the box route.
struct GradientPaths {
  bool query = true;
  bool support = true;
  bool box = true;
};

/// Everything the outer step computes for one episode before any parameter update.
struct EpisodeForward {
  std::vector<Prototype> prototypes;
  std::vector<double> inner_losses;
};

/// Seed of the per-episode fc_head re-draw.
std::uint64_t head_seed_for(const Episode& episode);

/// Runs the episode through the model and accumulates outer gradients into the model's grad
/// buffers (callers zero them first):
///   1. support crops -> backbone -> 2x2 max pool;
///   2. a copy of the MR module is adapted on the supports (inner loop; skipped without MR);
///   3. prototypes are recomputed with the adapted parameters;
///   4. every query RoI is embedded and scored against the prototypes;
///      L_cls is the mean cross-entropy over RoIs;
///   5. L_reg is the mean smooth-L1 over foreground RoIs whose foreground confidence
///      1 - P(background) exceeds cfg.fg_gate;
///   6. gradients flow from the RoI embeddings (query route) and from the prototypes back through
///      every support embedding (support route) into the MR trunk and the backbone, and from the
///      box loss into the box head and the backbone. The MR gradients are taken at the adapted
///      parameters and applied to the outer parameters (first-order treatment of the inner loop).
LossReport accumulate_outer_gradients(Model& model, const Episode& episode,
                                      const TrainConfig& cfg, GradientPaths paths = {},
                                      EpisodeForward* forward = nullptr);

/// Layers an outer step updates for this configuration.
std::vector<LayerParams*> outer_parameters(Model& model, const TrainConfig& cfg);

struct StepOutcome {
  LossReport report;
  bool skipped = false;
  std::string diagnostic;
};

/// accumulate_outer_gradients followed by one SGD step at `lr`. A degenerate embedding or a
/// non-finite loss/gradient skips the episode: grads are cleared, parameters stay untouched, and
/// the reason is returned in `diagnostic`.
StepOutcome outer_step(Model& model, const Episode& episode, const TrainConfig& cfg, double lr,
                       GradientPaths paths = {});

/// Outer learning rate at a global step under the configured decay schedule.
double learning_rate_at(const TrainConfig& cfg, std::size_t step);
/// Seed of the training episode sampled at a global step.
std::uint64_t training_episode_seed(const TrainConfig& cfg, std::size_t step);

struct TrainOptions {
  std::filesystem::path out_dir;
  /// Resume from this checkpoint; its step counter continues.
  std::optional<std::filesystem::path> resume;
  /// Stop after this many global steps (for resume tests); defaults to epochs * iters.
  std::optional<std::size_t> stop_after;
  /// Progress callback, called after every step.
  std::function<void(std::size_t step, const StepOutcome&)> on_step;
};

struct TrainResult {
  Model model;
  std::size_t steps_done = 0;
  std::size_t skipped = 0;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path metrics_log;
  std::filesystem::path final_checkpoint;
};

/// Runs epochs x iters outer steps on seeded base-split episodes, appending one JSON line per
/// step to `out_dir/metrics.jsonl`. Writes `out_dir/checkpoint_eNNN.json` every
/// checkpoint_every_epochs epochs and after the last epoch; a run stopped between epochs
/// (stop_after) ends with `out_dir/checkpoint_sNNNNNN.json`. The last one written is
/// `final_checkpoint`.
TrainResult train(const TrainConfig& cfg, const ToyDataset& dataset, const TrainOptions& options);

}  // namespace fsdet
