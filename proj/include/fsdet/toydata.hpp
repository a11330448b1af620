#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsdet/tensor.hpp"

namespace fsdet {

/// Axis-aligned box in pixel units; (x, y) is the top-left corner and the box covers
/// [x, x + w) x [y, y + h).
struct Box {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;

  double area() const { return w * h; }
  double center_x() const { return x + 0.5 * w; }
  double center_y() const { return y + 0.5 * h; }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Intersection over union; 0 for disjoint boxes.
double iou(const Box& a, const Box& b);

/// Clips a box to [0, width) x [0, height).
Box clip_box(const Box& b, double width, double height);

enum class ShapeKind {
  disk,
  ring,
  square,
  frame,
  plus,
  xcross,
  triangle,
  diamond,
  checker,
  hstripes,
  vstripes,
  dots,
  lshape,
  tshape,
  hourglass,
  semicircle,
};

std::string_view to_string(ShapeKind kind);
ShapeKind parse_shape_kind(std::string_view text);

/// Whether normalized box coordinate (u, v) in [0,1]^2 (v grows downward) lies on the shape.
/// Every shape reaches all four sides of its box, so an object's box is tight.
bool shape_contains(ShapeKind kind, double u, double v);

struct ClassSpec {
  std::string name;
  ShapeKind shape = ShapeKind::disk;
};

enum class Split { base, novel };
std::string_view to_string(Split split);
Split parse_split(std::string_view text);

struct GeneratorParams {
  std::size_t image_size = 96;
  std::size_t channels = 3;
  std::size_t min_object = 20;
  std::size_t max_object = 36;
  /// Amplitude of the uniform per-pixel background noise.
  double background_noise = 0.3;
  /// Placement rejects any object whose box overlaps an earlier one above this IoU.
  double max_object_iou = 0.1;
  std::size_t support_resolution = 32;
};

/// Class inventory with a disjoint base / novel split and the scene generator parameters.
/// Everything needed to regenerate any scene is contained here plus a seed.
struct ToyDataset {
  std::vector<ClassSpec> classes;
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
  GeneratorParams params;

  /// 16 shape classes, 11 base and 5 novel.
  static ToyDataset default_inventory();

  const std::vector<std::size_t>& split(Split s) const { return s == Split::base ? base : novel; }

  /// Throws ConfigError when the split overlaps, references unknown classes, or the generator
  /// parameters are unusable.
  void validate() const;

  std::string to_manifest_json() const;
  static ToyDataset from_manifest_json(std::string_view text);
  void save_manifest(const std::filesystem::path& path) const;
  static ToyDataset load_manifest(const std::filesystem::path& path);
};

struct SceneObject {
  std::size_t class_id = 0;
  Box box;
};

struct ToyScene {
  Tensor image;  // [C, H, W], values in [0, 1]
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kMaxSceneObjects = 4;
inline constexpr int kPlacementAttempts = 100;

/// Renders background noise plus one object per entry of `classes` (1 to 4 entries) with seeded
/// color, scale, aspect, and position. Throws SamplingError if an object cannot be placed within
/// kPlacementAttempts tries.
ToyScene render_scene(const ToyDataset& dataset, std::span<const std::size_t> classes,
                      std::uint64_t seed);

enum class ProposalSource { jittered_gt, random_bg };
std::string_view to_string(ProposalSource source);

struct Proposal {
  Box box;
  ProposalSource source = ProposalSource::random_bg;
  /// Index into ToyScene::objects for jittered proposals.
  std::size_t source_object = 0;
};

inline constexpr std::size_t kJitteredPerObject = 3;
inline constexpr double kJitterMinIou = 0.5;
inline constexpr double kBackgroundMaxIou = 0.3;

/// Region proposals standing in for an RPN: three jittered copies of every ground-truth box
/// (IoU >= 0.5 with their source) followed by up to `n_bg` random boxes with IoU < 0.3 against
/// every ground-truth box. Background boxes are rejection-sampled; a box that cannot be placed is
/// dropped.
std::vector<Proposal> make_proposals(const ToyScene& scene, std::size_t n_bg, double jitter,
                                     std::uint64_t seed);

/// Crops `box` out of the image and resizes it by nearest neighbor to [C, res, res]. Output pixel
/// (oy, ox) samples source row floor(y + (oy + 0.5) h / res), clamped to the image.
Tensor crop_resize(const Tensor& image, const Box& box, std::size_t resolution);

/// crop_resize at the dataset's support resolution. Throws SamplingError when the box is
/// narrower or shorter than 4 px or leaves the image.
Tensor crop_support(const ToyScene& scene, const Box& box, std::size_t resolution = 32);

}  // namespace fsdet
