#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "fsdet/episode.hpp"
#include "fsdet/meta.hpp"
#include "fsdet/metric.hpp"
#include "fsdet/model.hpp"

namespace fsdet {

enum class DecayMode {
  /// One multiplication by decay_factor once step >= decay_step.
  single,
  /// Multiply by decay_factor every decay_step steps.
  periodic,
};

/// Everything that determines a training run. The first block of fields are the required keys
/// of the JSON config file; the rest are optional with the defaults shown.
struct TrainConfig {
  std::size_t way = 3;
  std::size_t shot = 5;
  std::size_t n_query = 6;
  double alpha = 10.0;
  double meta_lr = 0.01;
  std::size_t inner_steps = 30;
  double outer_lr = 0.001;
  double lambda = 1.0;
  std::size_t decay_step = 2000;
  std::size_t epochs = 30;
  std::size_t iters = 100;
  std::uint64_t seed = 0;
  MetricKind metric_kind = MetricKind::pearson;
  bool mr_enabled = true;

  double decay_factor = 0.1;
  DecayMode decay_mode = DecayMode::single;
  std::size_t n_bg_proposals = 4;
  double jitter = 0.15;
  /// RoIs regress only when 1 - P(background) exceeds this.
  double fg_gate = 0.7;
  std::size_t checkpoint_every_epochs = 1;
  /// Optional dataset manifest; empty means the built-in inventory.
  std::string dataset;

  void validate() const;

  MetricConfig metric() const;
  EpisodeSpec episode_spec(Split split) const;
  ModelConfig model_config() const;
  EmbeddingMode embedding_mode() const {
    return mr_enabled ? EmbeddingMode::meta_module : EmbeddingMode::backbone_pool;
  }

  /// Parses a JSON object. Missing required keys, wrong types and out-of-range values raise
  /// ConfigError naming the field.
  static TrainConfig from_json(std::string_view text);
  static TrainConfig load(const std::filesystem::path& path);
  /// Canonical JSON with every field, stable key order.
  std::string to_json() const;
};

}  // namespace fsdet
