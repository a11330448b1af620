#include "fsdet/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include "fsdet/errors.hpp"
#include "json.hpp"

namespace fsdet {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "fsdet-checkpoint-v1";

void append_le(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
}

double read_le(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[b]) << (8 * b);
  return std::bit_cast<double>(bits);
}

struct Entry {
  std::string name;
  const Tensor* tensor;
};

std::vector<Entry> entries_of(std::span<const LayerParams* const> layers) {
  std::vector<Entry> out;
  for (const auto* l : layers) {
    out.push_back({l->name + ".weight", &l->weights});
    out.push_back({l->name + ".bias", &l->bias});
  }
  return out;
}

}  // namespace

std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

std::vector<std::uint8_t> parameter_blob(std::span<const LayerParams* const> layers) {
  std::vector<std::uint8_t> out;
  for (const auto& e : entries_of(layers))
    for (double v : e.tensor->values()) append_le(out, v);
  return out;
}

std::uint64_t parameter_digest(std::span<const LayerParams* const> layers) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto byte : parameter_blob(layers)) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void save_parameters(const std::filesystem::path& manifest,
                     std::span<const LayerParams* const> layers, const std::string& meta_json) {
  json j;
  j["format"] = kFormat;
  j["blob"] = blob_path_for(manifest).filename().string();
  j["layers"] = json::array();
  std::size_t offset = 0;
  for (const auto& e : entries_of(layers)) {
    j["layers"].push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}});
    offset += 8 * e.tensor->size();
  }
  j["meta"] = json::parse(meta_json);

  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  const auto blob = parameter_blob(layers);
  std::ofstream bin(blob_path_for(manifest), std::ios::binary);
  if (!bin) throw IoError("cannot write checkpoint blob " + blob_path_for(manifest).string());
  bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  if (!bin) throw IoError("short write to " + blob_path_for(manifest).string());
  std::ofstream man(manifest);
  if (!man) throw IoError("cannot write checkpoint manifest " + manifest.string());
  man << j.dump(2) << '\n';
}

std::string load_parameters(const std::filesystem::path& manifest,
                            std::span<LayerParams* const> layers) {
  std::ifstream man(manifest);
  if (!man) throw IoError("cannot read checkpoint manifest " + manifest.string());
  json j;
  try {
    man >> j;
  } catch (const json::exception& e) {
    throw LoadError("checkpoint manifest " + manifest.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != kFormat)
    throw LoadError("checkpoint manifest " + manifest.string() + " has unknown format");

  const auto blob_file = manifest.parent_path() / j.at("blob").get<std::string>();
  std::ifstream bin(blob_file, std::ios::binary);
  if (!bin) throw IoError("cannot read checkpoint blob " + blob_file.string());
  const std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(bin)),
                                       std::istreambuf_iterator<char>());

  std::vector<std::pair<std::string, Tensor*>> targets;
  for (auto* l : layers) {
    targets.emplace_back(l->name + ".weight", &l->weights);
    targets.emplace_back(l->name + ".bias", &l->bias);
  }
  const auto& listed = j.at("layers");
  if (listed.size() != targets.size())
    throw LoadError("checkpoint lists " + std::to_string(listed.size()) + " tensors, model has " +
                    std::to_string(targets.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& e = listed[i];
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    auto& [want_name, tensor] = targets[i];
    if (name != want_name)
      throw LoadError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                      want_name + "'");
    if (shape != tensor->shape())
      throw LoadError("checkpoint tensor '" + name + "' has shape " + shape_string(shape) +
                      ", model expects " + shape_string(tensor->shape()));
    if (offset + 8 * tensor->size() > blob.size())
      throw LoadError("checkpoint blob too short for tensor '" + name + "'");
    for (std::size_t k = 0; k < tensor->size(); ++k) (*tensor)[k] = read_le(&blob[offset + 8 * k]);
  }
  for (auto* l : layers) l->zero_grad();
  return j.value("meta", json::object()).dump();
}

void save_checkpoint(const std::filesystem::path& manifest, const Model& model,
                     const TrainConfig& config, std::size_t step) {
  const auto layers = model.persistent_layers();
  const auto& mc = model.config;
  json meta;
  meta["step"] = step;
  meta["config"] = json::parse(config.to_json());
  meta["model"] = {{"in_channels", mc.in_channels},
                   {"stem_channels", mc.stem_channels},
                   {"feature_channels", mc.feature_channels},
                   {"box_channels", mc.box_channels},
                   {"way", mc.way}};
  save_parameters(manifest, layers, meta.dump());
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream man(manifest);
  if (!man) throw IoError("cannot read checkpoint manifest " + manifest.string());
  json j;
  try {
    man >> j;
  } catch (const json::exception& e) {
    throw LoadError("checkpoint manifest " + manifest.string() + " is not valid JSON: " + e.what());
  }
  const auto& meta = j.at("meta");
  ModelConfig mc;
  const auto& m = meta.at("model");
  mc.in_channels = m.at("in_channels").get<std::size_t>();
  mc.stem_channels = m.at("stem_channels").get<std::size_t>();
  mc.feature_channels = m.at("feature_channels").get<std::size_t>();
  mc.box_channels = m.at("box_channels").get<std::size_t>();
  mc.way = m.at("way").get<std::size_t>();

  Checkpoint ck{Model::create(mc, 0), TrainConfig::from_json(meta.at("config").dump()),
                meta.at("step").get<std::size_t>()};
  std::vector<LayerParams*> layers = ck.model.persistent_layers();
  load_parameters(manifest, layers);
  return ck;
}

}  // namespace fsdet
