#include "fsdet/episode.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fsdet/errors.hpp"
#include "fsdet/rng.hpp"

namespace fsdet {

namespace {

enum Stream : std::uint64_t {
  kClassChoice = 1,
  kForegroundSupport,
  kBackgroundSupport,
  kQuery,
  kProposals,
  kPermutation,
  kCropPlacement,
};

}  // namespace

Episode sample_episode(const ToyDataset& dataset, const EpisodeSpec& spec, std::uint64_t seed) {
  dataset.validate();
  if (spec.way < 2) throw ConfigError("episode: way must be >= 2 (foreground + background)");
  if (spec.shot < 1) throw ConfigError("episode: shot must be >= 1");
  if (spec.max_query_objects < 1 || spec.max_query_objects > kMaxSceneObjects)
    throw ConfigError("episode: max_query_objects must be in [1, 4]");
  const auto& pool = dataset.split(spec.split);
  const std::size_t n_fg = spec.way - 1;
  if (pool.size() < n_fg)
    throw SamplingError("episode: split '" + std::string(to_string(spec.split)) + "' has " +
                        std::to_string(pool.size()) + " classes, a " + std::to_string(spec.way) +
                        "-way episode needs " + std::to_string(n_fg) + " (deficit " +
                        std::to_string(n_fg - pool.size()) + ")");

  Episode ep;
  ep.way = spec.way;
  ep.shot = spec.shot;
  ep.split = spec.split;
  ep.seed = seed;

  {
    Rng rng(derive_seed(seed, {kClassChoice}));
    std::vector<std::size_t> order = pool;
    rng.shuffle(std::span(order));
    ep.classes.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_fg));
  }
  {
    Rng rng(derive_seed(seed, {kPermutation}));
    ep.label_perm.resize(spec.way);
    std::iota(ep.label_perm.begin(), ep.label_perm.end(), std::size_t{0});
    rng.shuffle(std::span(ep.label_perm));
  }
  const std::size_t res = dataset.params.support_resolution;
  ep.support.resize(spec.way);

  for (std::size_t c = 1; c < spec.way; ++c) {
    const std::size_t cls = ep.classes[c - 1];
    for (std::size_t k = 0; k < spec.shot; ++k) {
      const auto scene_seed = derive_seed(seed, {kForegroundSupport, c, k});
      const std::size_t one[] = {cls};
      ToyScene scene = render_scene(dataset, one, scene_seed);
      SupportItem item;
      item.episode_class = c;
      item.dataset_class = cls;
      item.box = scene.objects.front().box;
      item.scene_objects = scene.objects;
      item.scene_seed = scene_seed;
      item.crop = crop_support(scene, item.box, res);
      ep.support[c].push_back(std::move(item));
    }
  }

  // Background crops come from scenes holding split objects, taken away from every annotation.
  const double image = static_cast<double>(dataset.params.image_size);
  for (std::size_t k = 0; k < spec.shot; ++k) {
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt == static_cast<std::size_t>(kPlacementAttempts))
        throw SamplingError("episode: could not crop a background support region");
      const auto scene_seed = derive_seed(seed, {kBackgroundSupport, k, attempt});
      Rng rng(derive_seed(scene_seed, {kCropPlacement}));
      std::vector<std::size_t> objs(1 + rng.index(2));
      for (auto& o : objs) o = pool[rng.index(pool.size())];
      ToyScene scene = render_scene(dataset, objs, scene_seed);
      bool found = false;
      Box box;
      for (int tries = 0; tries < kPlacementAttempts && !found; ++tries) {
        const double w = rng.uniform(16.0, 40.0), h = rng.uniform(16.0, 40.0);
        box = {std::floor(rng.uniform(0.0, image - w)), std::floor(rng.uniform(0.0, image - h)),
               std::floor(w), std::floor(h)};
        found = std::all_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
          return iou(o.box, box) <= kSupportBackgroundMaxIou;
        });
      }
      if (!found) continue;
      SupportItem item;
      item.episode_class = kBackgroundClass;
      item.box = box;
      item.scene_objects = scene.objects;
      item.scene_seed = scene_seed;
      item.crop = crop_support(scene, box, res);
      ep.support[kBackgroundClass].push_back(std::move(item));
      break;
    }
  }

  for (std::size_t c = 1; c < spec.way; ++c) {
    for (std::size_t q = 0; q < spec.n_query; ++q) {
      const auto scene_seed = derive_seed(seed, {kQuery, c, q});
      Rng rng(derive_seed(scene_seed, {kClassChoice}));
      const std::size_t count = 1 + rng.index(spec.max_query_objects);
      std::vector<std::size_t> labels{c};
      while (labels.size() < count) labels.push_back(1 + rng.index(n_fg));
      std::vector<std::size_t> objs;
      for (auto l : labels) objs.push_back(ep.classes[l - 1]);
      QueryScene qs;
      qs.scene = render_scene(dataset, objs, scene_seed);
      qs.object_labels = labels;
      qs.proposals = make_proposals(qs.scene, spec.n_bg_proposals, spec.jitter,
                                    derive_seed(scene_seed, {kProposals}));
      ep.queries.push_back(std::move(qs));
    }
  }
  return ep;
}

std::vector<RoiSample> collect_rois(const Episode& episode, std::size_t resolution) {
  std::vector<RoiSample> out;
  for (std::size_t q = 0; q < episode.queries.size(); ++q) {
    const auto& qs = episode.queries[q];
    for (std::size_t p = 0; p < qs.proposals.size(); ++p) {
      RoiSample r;
      r.query = q;
      r.proposal = p;
      r.box = qs.proposals[p].box;
      r.crop = crop_support(qs.scene, r.box, resolution);
      double best = 0.0;
      std::size_t best_obj = 0;
      for (std::size_t o = 0; o < qs.scene.objects.size(); ++o) {
        const double v = iou(r.box, qs.scene.objects[o].box);
        if (v > best) {
          best = v;
          best_obj = o;
        }
      }
      if (best >= kJitterMinIou) {
        r.label = qs.object_labels[best_obj];
        r.has_target = true;
        r.target = qs.scene.objects[best_obj].box;
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace fsdet
