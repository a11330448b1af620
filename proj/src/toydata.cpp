#include "fsdet/toydata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fsdet/errors.hpp"
#include "fsdet/rng.hpp"
#include "json.hpp"

namespace fsdet {

using nlohmann::json;

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, double width, double height) {
  const double x0 = std::clamp(b.x, 0.0, width), y0 = std::clamp(b.y, 0.0, height);
  const double x1 = std::clamp(b.x + b.w, 0.0, width), y1 = std::clamp(b.y + b.h, 0.0, height);
  return {x0, y0, x1 - x0, y1 - y0};
}

namespace {

constexpr std::array<std::pair<ShapeKind, std::string_view>, 16> kShapeNames{{
    {ShapeKind::disk, "disk"},         {ShapeKind::ring, "ring"},
    {ShapeKind::square, "square"},     {ShapeKind::frame, "frame"},
    {ShapeKind::plus, "plus"},         {ShapeKind::xcross, "xcross"},
    {ShapeKind::triangle, "triangle"}, {ShapeKind::diamond, "diamond"},
    {ShapeKind::checker, "checker"},   {ShapeKind::hstripes, "hstripes"},
    {ShapeKind::vstripes, "vstripes"}, {ShapeKind::dots, "dots"},
    {ShapeKind::lshape, "lshape"},     {ShapeKind::tshape, "tshape"},
    {ShapeKind::hourglass, "hourglass"}, {ShapeKind::semicircle, "semicircle"},
}};

}  // namespace

std::string_view to_string(ShapeKind kind) {
  for (const auto& [k, name] : kShapeNames)
    if (k == kind) return name;
  return "unknown";
}

ShapeKind parse_shape_kind(std::string_view text) {
  for (const auto& [k, name] : kShapeNames)
    if (name == text) return k;
  throw ConfigError("unknown shape kind '" + std::string(text) + "'");
}

bool shape_contains(ShapeKind kind, double u, double v) {
  const double du = u - 0.5, dv = v - 0.5;
  const double r2 = du * du + dv * dv;
  switch (kind) {
    case ShapeKind::disk:
      return r2 <= 0.25;
    case ShapeKind::ring:
      return r2 <= 0.25 && r2 >= 0.09;
    case ShapeKind::square:
      return true;
    case ShapeKind::frame:
      return std::abs(du) >= 0.28 || std::abs(dv) >= 0.28;
    case ShapeKind::plus:
      return std::abs(du) <= 0.14 || std::abs(dv) <= 0.14;
    case ShapeKind::xcross:
      return std::abs(u - v) <= 0.16 || std::abs(u + v - 1.0) <= 0.16;
    case ShapeKind::triangle:
      return std::abs(du) <= 0.5 * v + 0.03;
    case ShapeKind::diamond:
      return std::abs(du) + std::abs(dv) <= 0.54;
    case ShapeKind::checker:
      return (static_cast<int>(u * 4.0) + static_cast<int>(v * 4.0)) % 2 == 0;
    case ShapeKind::hstripes:
      return static_cast<int>(v * 5.0) % 2 == 0;
    case ShapeKind::vstripes:
      return static_cast<int>(u * 5.0) % 2 == 0;
    case ShapeKind::dots: {
      const double cu = (std::floor(u * 3.0) + 0.5) / 3.0, cv = (std::floor(v * 3.0) + 0.5) / 3.0;
      const double a = u - cu, b = v - cv;
      return a * a + b * b <= 1.0 / 36.0;
    }
    case ShapeKind::lshape:
      return u <= 0.32 || v >= 0.68;
    case ShapeKind::tshape:
      return v <= 0.32 || std::abs(du) <= 0.16;
    case ShapeKind::hourglass:
      return std::abs(du) <= std::abs(dv);
    case ShapeKind::semicircle:
      return du * du + v * v * 0.25 <= 0.25;
  }
  return false;
}

std::string_view to_string(Split split) { return split == Split::base ? "base" : "novel"; }

Split parse_split(std::string_view text) {
  if (text == "base") return Split::base;
  if (text == "novel") return Split::novel;
  throw ConfigError("split must be 'base' or 'novel', got '" + std::string(text) + "'");
}

ToyDataset ToyDataset::default_inventory() {
  ToyDataset d;
  for (const auto& [kind, name] : kShapeNames) d.classes.push_back({std::string(name), kind});
  auto id = [&](ShapeKind k) {
    return static_cast<std::size_t>(
        std::find_if(d.classes.begin(), d.classes.end(), [k](auto& c) { return c.shape == k; }) -
        d.classes.begin());
  };
  for (auto k : {ShapeKind::disk, ShapeKind::square, ShapeKind::frame, ShapeKind::plus,
                 ShapeKind::xcross, ShapeKind::triangle, ShapeKind::hstripes, ShapeKind::dots,
                 ShapeKind::lshape, ShapeKind::hourglass, ShapeKind::semicircle})
    d.base.push_back(id(k));
  for (auto k : {ShapeKind::ring, ShapeKind::diamond, ShapeKind::checker, ShapeKind::vstripes,
                 ShapeKind::tshape})
    d.novel.push_back(id(k));
  return d;
}

void ToyDataset::validate() const {
  if (classes.empty()) throw ConfigError("dataset: class inventory is empty");
  std::set<std::size_t> seen_base;
  for (auto c : base) {
    if (c >= classes.size()) throw ConfigError("dataset: base split references unknown class");
    seen_base.insert(c);
  }
  std::set<std::size_t> seen_novel;
  for (auto c : novel) {
    if (c >= classes.size()) throw ConfigError("dataset: novel split references unknown class");
    if (seen_base.count(c))
      throw ConfigError("dataset: class '" + classes[c].name + "' is in both base and novel");
    seen_novel.insert(c);
  }
  if (seen_base.size() != base.size() || seen_novel.size() != novel.size())
    throw ConfigError("dataset: a split lists the same class twice");
  const auto& p = params;
  if (p.channels == 0 || p.image_size < 16) throw ConfigError("dataset: image too small");
  if (p.min_object < 8 || p.min_object > p.max_object || p.max_object > p.image_size / 2)
    throw ConfigError("dataset: object size range must satisfy 8 <= min <= max <= image/2");
  if (p.background_noise < 0.0 || p.background_noise > 0.5)
    throw ConfigError("dataset: background_noise must be in [0, 0.5]");
  if (p.max_object_iou < 0.0 || p.max_object_iou > 0.3)
    throw ConfigError("dataset: max_object_iou must be in [0, 0.3]");
  if (p.support_resolution < 8) throw ConfigError("dataset: support resolution too small");
}

std::string ToyDataset::to_manifest_json() const {
  json j;
  j["format"] = "fsdet-dataset-v1";
  j["classes"] = json::array();
  for (const auto& c : classes) j["classes"].push_back({{"name", c.name}, {"shape", to_string(c.shape)}});
  j["split"] = {{"base", base}, {"novel", novel}};
  j["generator"] = {{"image_size", params.image_size},
                    {"channels", params.channels},
                    {"min_object", params.min_object},
                    {"max_object", params.max_object},
                    {"background_noise", params.background_noise},
                    {"max_object_iou", params.max_object_iou},
                    {"support_resolution", params.support_resolution}};
  return j.dump(2);
}

ToyDataset ToyDataset::from_manifest_json(std::string_view text) {
  ToyDataset d;
  try {
    const json j = json::parse(text);
    for (const auto& c : j.at("classes"))
      d.classes.push_back({c.at("name").get<std::string>(),
                           parse_shape_kind(c.at("shape").get<std::string>())});
    d.base = j.at("split").at("base").get<std::vector<std::size_t>>();
    d.novel = j.at("split").at("novel").get<std::vector<std::size_t>>();
    if (j.contains("generator")) {
      const auto& g = j["generator"];
      auto& p = d.params;
      p.image_size = g.value("image_size", p.image_size);
      p.channels = g.value("channels", p.channels);
      p.min_object = g.value("min_object", p.min_object);
      p.max_object = g.value("max_object", p.max_object);
      p.background_noise = g.value("background_noise", p.background_noise);
      p.max_object_iou = g.value("max_object_iou", p.max_object_iou);
      p.support_resolution = g.value("support_resolution", p.support_resolution);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset manifest: ") + e.what());
  }
  d.validate();
  return d;
}

void ToyDataset::save_manifest(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset manifest " + path.string());
  out << to_manifest_json() << '\n';
}

ToyDataset ToyDataset::load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read dataset manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_manifest_json(buf.str());
}

ToyScene render_scene(const ToyDataset& dataset, std::span<const std::size_t> classes,
                      std::uint64_t seed) {
  if (classes.empty() || classes.size() > kMaxSceneObjects)
    throw SamplingError("render_scene: a scene holds 1 to 4 objects, asked for " +
                        std::to_string(classes.size()));
  const auto& p = dataset.params;
  const std::size_t size = p.image_size;
  ToyScene scene;
  scene.seed = seed;
  scene.image = Tensor({p.channels, size, size});
  Rng rng(seed);

  for (auto& v : scene.image.values()) v = p.background_noise * rng.uniform();

  for (const auto cls : classes) {
    if (cls >= dataset.classes.size())
      throw SamplingError("render_scene: unknown class id " + std::to_string(cls));
    Box box;
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      const double side = rng.uniform(static_cast<double>(p.min_object),
                                      static_cast<double>(p.max_object) + 1.0);
      const double aspect = std::exp(rng.uniform(-0.2, 0.2));
      const auto w = std::clamp<std::size_t>(static_cast<std::size_t>(side * aspect), p.min_object,
                                             p.max_object);
      const auto h = std::clamp<std::size_t>(static_cast<std::size_t>(side / aspect), p.min_object,
                                             p.max_object);
      const auto x = static_cast<std::size_t>(rng.index(size - w + 1));
      const auto y = static_cast<std::size_t>(rng.index(size - h + 1));
      box = {static_cast<double>(x), static_cast<double>(y), static_cast<double>(w),
             static_cast<double>(h)};
      placed = std::all_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
        return iou(o.box, box) <= p.max_object_iou;
      });
    }
    if (!placed)
      throw SamplingError("render_scene: could not place object " +
                          std::to_string(scene.objects.size() + 1) + " without overlap after " +
                          std::to_string(kPlacementAttempts) + " attempts");

    // Saturated random color: one channel high, the others anywhere above the noise floor.
    std::vector<double> color(p.channels);
    const auto bright = rng.index(p.channels);
    for (std::size_t c = 0; c < p.channels; ++c)
      color[c] = c == bright ? rng.uniform(0.8, 1.0) : rng.uniform(0.35, 1.0);

    const auto shape = dataset.classes[cls].shape;
    const auto bx = static_cast<std::size_t>(box.x), by = static_cast<std::size_t>(box.y);
    const auto bw = static_cast<std::size_t>(box.w), bh = static_cast<std::size_t>(box.h);
    for (std::size_t yy = 0; yy < bh; ++yy)
      for (std::size_t xx = 0; xx < bw; ++xx) {
        const double u = (static_cast<double>(xx) + 0.5) / box.w;
        const double v = (static_cast<double>(yy) + 0.5) / box.h;
        if (!shape_contains(shape, u, v)) continue;
        for (std::size_t c = 0; c < p.channels; ++c)
          scene.image.at(c, by + yy, bx + xx) = color[c];
      }
    scene.objects.push_back({cls, box});
  }
  return scene;
}

std::string_view to_string(ProposalSource source) {
  return source == ProposalSource::jittered_gt ? "jittered-gt" : "random-bg";
}

std::vector<Proposal> make_proposals(const ToyScene& scene, std::size_t n_bg, double jitter,
                                     std::uint64_t seed) {
  if (jitter < 0.0 || jitter > 0.5)
    throw ConfigError("make_proposals: jitter must be in [0, 0.5]");
  const double width = static_cast<double>(scene.image.dim(2));
  const double height = static_cast<double>(scene.image.dim(1));
  Rng rng(seed);
  std::vector<Proposal> out;

  for (std::size_t oi = 0; oi < scene.objects.size(); ++oi) {
    const Box& gt = scene.objects[oi].box;
    for (std::size_t copy = 0; copy < kJitteredPerObject; ++copy) {
      Box chosen = gt;
      for (int attempt = 0; attempt < kPlacementAttempts && jitter > 0.0; ++attempt) {
        const double cx = gt.center_x() + rng.uniform(-jitter, jitter) * gt.w;
        const double cy = gt.center_y() + rng.uniform(-jitter, jitter) * gt.h;
        const double w = gt.w * std::exp(rng.uniform(-jitter, jitter));
        const double h = gt.h * std::exp(rng.uniform(-jitter, jitter));
        const Box cand = clip_box({cx - 0.5 * w, cy - 0.5 * h, w, h}, width, height);
        if (cand.w >= 4.0 && cand.h >= 4.0 && iou(cand, gt) >= kJitterMinIou) {
          chosen = cand;
          break;
        }
      }
      out.push_back({chosen, ProposalSource::jittered_gt, oi});
    }
  }

  const auto& objs = scene.objects;
  for (std::size_t b = 0; b < n_bg; ++b) {
    for (int attempt = 0; attempt < 2 * kPlacementAttempts; ++attempt) {
      const double w = rng.uniform(16.0, 40.0), h = rng.uniform(16.0, 40.0);
      const Box cand{rng.uniform(0.0, width - w), rng.uniform(0.0, height - h), w, h};
      const bool clear = std::all_of(objs.begin(), objs.end(), [&](const SceneObject& o) {
        return iou(o.box, cand) < kBackgroundMaxIou;
      });
      if (clear) {
        out.push_back({cand, ProposalSource::random_bg, 0});
        break;
      }
    }
  }
  return out;
}

Tensor crop_resize(const Tensor& image, const Box& box, std::size_t resolution) {
  const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
  Tensor out({channels, resolution, resolution});
  const double res = static_cast<double>(resolution);
  std::vector<std::size_t> xs(resolution), ys(resolution);
  for (std::size_t o = 0; o < resolution; ++o) {
    const double sx = std::floor(box.x + (static_cast<double>(o) + 0.5) * box.w / res);
    const double sy = std::floor(box.y + (static_cast<double>(o) + 0.5) * box.h / res);
    xs[o] = static_cast<std::size_t>(std::clamp(sx, 0.0, static_cast<double>(width - 1)));
    ys[o] = static_cast<std::size_t>(std::clamp(sy, 0.0, static_cast<double>(height - 1)));
  }
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t oy = 0; oy < resolution; ++oy)
      for (std::size_t ox = 0; ox < resolution; ++ox) out.at(c, oy, ox) = image.at(c, ys[oy], xs[ox]);
  return out;
}

Tensor crop_support(const ToyScene& scene, const Box& box, std::size_t resolution) {
  if (box.w < 4.0 || box.h < 4.0)
    throw SamplingError("crop_support: degenerate box (" + std::to_string(box.w) + " x " +
                        std::to_string(box.h) + " px, minimum 4)");
  const double width = static_cast<double>(scene.image.dim(2));
  const double height = static_cast<double>(scene.image.dim(1));
  constexpr double kSlack = 1e-9;
  if (box.x < -kSlack || box.y < -kSlack || box.x + box.w > width + kSlack ||
      box.y + box.h > height + kSlack)
    throw SamplingError("crop_support: box leaves the image");
  return crop_resize(scene.image, box, resolution);
}

}  // namespace fsdet
