#include "fsdet/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "fsdet/errors.hpp"
#include "fsdet/rng.hpp"
#include "fsdet/training.hpp"

namespace fsdet {

namespace {

constexpr std::uint64_t kEvalEpisodes = 0x6576616c;

std::vector<std::size_t> by_descending_score(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  const auto order = by_descending_score(detections);
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const auto& d = detections[i];
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.scene == d.scene && k.episode_class == d.episode_class &&
          iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::optional<double> average_precision(std::span<const Detection> detections,
                                        std::span<const GroundTruth> ground_truth,
                                        std::size_t episode_class, double iou_threshold) {
  std::vector<const GroundTruth*> gts;
  for (const auto& g : ground_truth)
    if (g.episode_class == episode_class) gts.push_back(&g);
  if (gts.empty()) return std::nullopt;

  std::vector<Detection> dets;
  for (const auto& d : detections)
    if (d.episode_class == episode_class) dets.push_back(d);
  const auto order = by_descending_score(dets);

  std::vector<bool> matched(gts.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i : order) {
    const auto& d = dets[i];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (gts[j]->scene != d.scene) continue;
      const double o = iou(d.box, gts[j]->box);
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best >= iou_threshold && !matched[best_j]) {
      matched[best_j] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }

  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

double mean_average_precision(std::span<const Detection> detections,
                              std::span<const GroundTruth> ground_truth, std::size_t way,
                              double iou_threshold) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 1; c < way; ++c)
    if (auto ap = average_precision(detections, ground_truth, c, iou_threshold)) {
      sum += *ap;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

EpisodeRun run_episode(const Model& model, const Episode& episode, const TrainConfig& cfg,
                       double score_floor) {
  const MetricConfig metric = cfg.metric();
  const std::size_t way = episode.support.size();
  const bool use_mr = cfg.mr_enabled;
  EpisodeRun run;

  ClassGroups<Tensor> maps(way);
  for (std::size_t c = 0; c < way; ++c)
    for (const auto& item : episode.support[c])
      maps[c].push_back(pool_for_embedding(backbone_forward(item.crop, model.backbone).features).output);

  MRModule adapted;
  if (use_mr) {
    InnerLoopConfig inner{cfg.meta_lr, cfg.inner_steps, episode.label_perm, head_seed_for(episode)};
    auto adaptation = inner_adapt(model.mr, maps, inner);
    adapted = std::move(adaptation.adapted);
    run.inner_losses = std::move(adaptation.losses);
  }
  auto to_vector = [&](const Tensor& map) {
    return use_mr ? embed(map, adapted) : avgpool_global(map);
  };

  ClassGroups<Tensor> vectors(way);
  for (std::size_t c = 0; c < way; ++c)
    for (const auto& m : maps[c]) vectors[c].push_back(to_vector(m));
  run.prototypes = build_prototypes(vectors);
  std::vector<Tensor> protos;
  for (const auto& p : run.prototypes) protos.push_back(p.vector);

  const std::size_t res = episode.support.front().front().crop.dim(1);
  const auto rois = collect_rois(episode, res);
  std::vector<Detection> candidates;
  for (const auto& roi : rois) {
    const auto features = backbone_forward(roi.crop, model.backbone).features;
    RoiResult r;
    r.query = roi.query;
    r.proposal = roi.proposal;
    r.box = roi.box;
    r.label = roi.label;
    r.embedding = to_vector(pool_for_embedding(features).output);
    r.row = score_prototypes_or_fallback(r.embedding.values(), protos, metric, kBackgroundClass);
    r.delta = box_head_forward(features, model.box_head).delta;
    const auto& image = episode.queries[roi.query].scene.image;
    r.refined = clip_box(decode_box(roi.box, r.delta), static_cast<double>(image.dim(2)),
                         static_cast<double>(image.dim(1)));
    for (std::size_t c = 1; c < way; ++c)
      if (r.row.confidences[c] >= score_floor && r.refined.w > 0.0 && r.refined.h > 0.0)
        candidates.push_back({roi.query, r.refined, c, r.row.confidences[c]});
    run.rois.push_back(std::move(r));
  }
  run.detections = nms(std::move(candidates), kDetectionNmsIou);

  for (std::size_t q = 0; q < episode.queries.size(); ++q) {
    const auto& query = episode.queries[q];
    for (std::size_t o = 0; o < query.scene.objects.size(); ++o)
      run.ground_truth.push_back({q, query.scene.objects[o].box, query.object_labels[o]});
  }
  return run;
}

ClusterStats cluster_stats(const EpisodeRun& run, double epsilon) {
  ClusterStats s;
  for (const auto& r : run.rois) {
    for (const auto& p : run.prototypes) {
      double pr;
      try {
        pr = pearson_distance(r.embedding.values(), p.vector.values(), epsilon);
      } catch (const DegenerateVectorError&) {
        pr = 0.0;
      }
      if (p.class_index == r.label) {
        s.within += pr;
        ++s.n_within;
      } else {
        s.cross += pr;
        ++s.n_cross;
      }
    }
  }
  if (s.n_within) s.within /= static_cast<double>(s.n_within);
  if (s.n_cross) s.cross /= static_cast<double>(s.n_cross);
  return s;
}

std::uint64_t evaluation_episode_seed(std::uint64_t group_seed, std::size_t index) {
  return derive_seed(group_seed, {kEvalEpisodes, index});
}

EvalResult evaluate(const Model& model, const TrainConfig& cfg, const ToyDataset& dataset,
                    const EvalOptions& options) {
  if (options.groups == 0) throw ConfigError("evaluation needs at least one seed group");
  if (options.workers == 0) throw ConfigError("workers must be at least 1");
  TrainConfig run_cfg = cfg;
  run_cfg.way = options.way;
  run_cfg.shot = options.shot;
  run_cfg.validate();
  const EpisodeSpec spec = run_cfg.episode_spec(options.split);

  EvalResult result;
  result.options = options;
  result.config = run_cfg;
  result.n_episodes = options.n_episodes;
  result.episodes.resize(options.n_episodes);
  const std::size_t base = options.n_episodes / options.groups;
  const std::size_t extra = options.n_episodes % options.groups;
  {
    std::size_t i = 0;
    for (std::size_t g = 0; g < options.groups; ++g) {
      const std::size_t n = base + (g < extra ? 1 : 0);
      for (std::size_t k = 0; k < n; ++k, ++i) {
        auto& e = result.episodes[i];
        e.index = i;
        e.group = g;
        e.seed = evaluation_episode_seed(options.seed + g, k);
      }
    }
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(options.workers);
  auto worker = [&](std::size_t w) {
    try {
      for (std::size_t i = next++; i < result.episodes.size(); i = next++) {
        auto& e = result.episodes[i];
        const Episode episode = sample_episode(dataset, spec, e.seed);
        const EpisodeRun run = run_episode(model, episode, run_cfg);
        e.ap50 = mean_average_precision(run.detections, run.ground_truth, episode.way, 0.5);
        e.ap75 = mean_average_precision(run.detections, run.ground_truth, episode.way, 0.75);
        e.clusters = cluster_stats(run);
        if (!run.inner_losses.empty()) {
          e.inner_first = run.inner_losses.front();
          e.inner_last = run.inner_losses.back();
        }
        e.n_detections = run.detections.size();
        if (options.keep_embeddings) {
          e.prototypes = run.prototypes;
          for (const auto& r : run.rois) e.roi_embeddings.emplace_back(r.label, r.embedding);
        }
      }
    } catch (...) {
      errors[w] = std::current_exception();
      next = result.episodes.size();
    }
  };
  const std::size_t n_threads = std::min(options.workers, std::max<std::size_t>(1, result.episodes.size()));
  if (n_threads == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_threads; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  std::vector<double> g50(options.groups, 0.0), g75(options.groups, 0.0);
  std::vector<std::size_t> counts(options.groups, 0);
  std::size_t improved = 0;
  for (const auto& e : result.episodes) {
    g50[e.group] += e.ap50;
    g75[e.group] += e.ap75;
    ++counts[e.group];
    result.within_similarity += e.clusters.within;
    result.cross_similarity += e.clusters.cross;
    if (e.inner_last < e.inner_first) ++improved;
  }
  std::size_t used = 0;
  for (std::size_t g = 0; g < options.groups; ++g) {
    if (!counts[g]) continue;
    result.group_ap50.push_back(g50[g] / static_cast<double>(counts[g]));
    result.group_ap75.push_back(g75[g] / static_cast<double>(counts[g]));
    result.ap50 += result.group_ap50.back();
    result.ap75 += result.group_ap75.back();
    ++used;
  }
  if (used) {
    result.ap50 /= static_cast<double>(used);
    result.ap75 /= static_cast<double>(used);
  }
  if (!result.episodes.empty()) {
    const double n = static_cast<double>(result.episodes.size());
    result.within_similarity /= n;
    result.cross_similarity /= n;
    result.inner_improved_fraction = static_cast<double>(improved) / n;
  }
  return result;
}

void write_embeddings_csv(const EvalResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write embeddings to " + path.string());
  out.precision(17);
  auto row = [&](std::size_t episode, const char* role, std::size_t cls, const Tensor& v) {
    out << episode << ',' << role << ',' << cls;
    for (double x : v.values()) out << ',' << x;
    out << '\n';
  };
  for (const auto& e : result.episodes) {
    for (const auto& p : e.prototypes) row(e.index, "support-prototype", p.class_index, p.vector);
    for (const auto& [label, v] : e.roi_embeddings) row(e.index, "query-roi", label, v);
  }
  if (!out) throw IoError("write to " + path.string() + " failed");
}

}  // namespace fsdet
