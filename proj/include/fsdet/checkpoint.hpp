#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fsdet/config.hpp"
#include "fsdet/layers.hpp"
#include "fsdet/model.hpp"

namespace fsdet {

/// Parameter persistence.
///
/// A checkpoint is a JSON manifest plus a sidecar blob named after it (`x.json` -> `x.bin`).
/// The manifest lists one entry per tensor, `{name, shape, offset}`, with `offset` in bytes into
/// the blob; the blob holds IEEE-754 binary64 values in little-endian byte order, entries
/// back to back in manifest order. A free-form `meta` object rides along in the manifest.

/// Raw little-endian bytes of every weight and bias of `layers`, in order.
std::vector<std::uint8_t> parameter_blob(std::span<const LayerParams* const> layers);
/// FNV-1a hash of parameter_blob, used to prove that a command left parameters untouched.
std::uint64_t parameter_digest(std::span<const LayerParams* const> layers);

/// `meta_json` must be a JSON object.
void save_parameters(const std::filesystem::path& manifest,
                     std::span<const LayerParams* const> layers, const std::string& meta_json);
/// Fills `layers` (matched by order and name) and returns the meta object as JSON text. Throws
/// LoadError when the names or shapes differ from what `layers` expects, IoError on I/O failure.
std::string load_parameters(const std::filesystem::path& manifest,
                            std::span<LayerParams* const> layers);

std::filesystem::path blob_path_for(const std::filesystem::path& manifest);

struct Checkpoint {
  Model model;
  TrainConfig config;
  std::size_t step = 0;
};

void save_checkpoint(const std::filesystem::path& manifest, const Model& model,
                     const TrainConfig& config, std::size_t step);
Checkpoint load_checkpoint(const std::filesystem::path& manifest);

}  // namespace fsdet
