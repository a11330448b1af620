#include "fsdet/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "fsdet/checkpoint.hpp"
#include "fsdet/errors.hpp"
#include "fsdet/metric.hpp"
#include "fsdet/rng.hpp"
#include "json.hpp"

namespace fsdet {

namespace {

enum Stream : std::uint64_t {
  kModelInit = 0x6d6f64656c,
  kTrainEpisodes = 0x747261696e,
  kHeadInit = 0x68656164,
};

double smooth_l1_scalar(double x) {
  const double a = std::abs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double smooth_l1_deriv(double x) {
  if (x >= 1.0) return 1.0;
  if (x <= -1.0) return -1.0;
  return x;
}

BoxDelta scaled(const BoxDelta& d, double f) { return {d.tx * f, d.ty * f, d.tw * f, d.th * f}; }

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.empty()) dst = src;
  else dst.add_scaled(src);
}

void transfer_grads(const LayerParams& from, LayerParams& to) {
  to.grad_weights.add_scaled(from.grad_weights);
  to.grad_bias.add_scaled(from.grad_bias);
}

// Forward state of one query RoI kept until its backward pass.
struct RoiState {
  BackboneTrace backbone;
  MaxPoolResult pool;
  EmbedTrace embed;
  BoxTrace box;
  HeadGradient head;
  bool gated = false;
  BoxDelta target;
};

}  // namespace

double smooth_l1(const BoxDelta& pred, const BoxDelta& target) {
  return smooth_l1_scalar(pred.tx - target.tx) + smooth_l1_scalar(pred.ty - target.ty) +
         smooth_l1_scalar(pred.tw - target.tw) + smooth_l1_scalar(pred.th - target.th);
}

BoxDelta smooth_l1_grad(const BoxDelta& pred, const BoxDelta& target) {
  return {smooth_l1_deriv(pred.tx - target.tx), smooth_l1_deriv(pred.ty - target.ty),
          smooth_l1_deriv(pred.tw - target.tw), smooth_l1_deriv(pred.th - target.th)};
}

std::uint64_t head_seed_for(const Episode& episode) {
  return derive_seed(episode.seed, {kHeadInit});
}

std::vector<LayerParams*> outer_parameters(Model& model, const TrainConfig& cfg) {
  std::vector<LayerParams*> p{&model.backbone.conv1, &model.backbone.conv2, &model.box_head.conv,
                              &model.box_head.fc};
  if (cfg.mr_enabled) {
    p.push_back(&model.mr.conv1);
    p.push_back(&model.mr.conv2);
  }
  return p;
}

LossReport accumulate_outer_gradients(Model& model, const Episode& episode,
                                      const TrainConfig& cfg, GradientPaths paths,
                                      EpisodeForward* forward) {
  const MetricConfig metric = cfg.metric();
  const bool use_mr = cfg.mr_enabled;
  const std::size_t way = episode.support.size();
  if (way != cfg.way)
    throw ConfigError("episode has " + std::to_string(way) + " classes, config way is " +
                      std::to_string(cfg.way));

  // Supports through the shared backbone and the support max pool.
  ClassGroups<BackboneTrace> sup_backbone(way);
  ClassGroups<MaxPoolResult> sup_pool(way);
  ClassGroups<Tensor> sup_maps(way);
  for (std::size_t c = 0; c < way; ++c)
    for (const auto& item : episode.support[c]) {
      sup_backbone[c].push_back(backbone_forward(item.crop, model.backbone));
      sup_pool[c].push_back(pool_for_embedding(sup_backbone[c].back().features));
      sup_maps[c].push_back(sup_pool[c].back().output);
    }

  MRModule adapted;
  if (use_mr) {
    InnerLoopConfig inner{cfg.meta_lr, cfg.inner_steps, episode.label_perm, head_seed_for(episode)};
    auto adaptation = inner_adapt(model.mr, sup_maps, inner);
    adapted = std::move(adaptation.adapted);
    adapted.zero_grad();
    if (forward) forward->inner_losses = std::move(adaptation.losses);
  }

  // Prototypes from the adapted parameters.
  ClassGroups<EmbedTrace> sup_embed(way);
  ClassGroups<Tensor> sup_vectors(way);
  for (std::size_t c = 0; c < way; ++c)
    for (const auto& map : sup_maps[c]) {
      if (use_mr) {
        sup_embed[c].push_back(embed_forward(map, adapted));
        sup_vectors[c].push_back(sup_embed[c].back().embedding);
      } else {
        sup_vectors[c].push_back(avgpool_global(map));
      }
    }
  const auto prototypes = build_prototypes(sup_vectors);
  std::vector<Tensor> proto_vectors;
  for (const auto& p : prototypes) proto_vectors.push_back(p.vector);

  const std::size_t res = episode.support.front().front().crop.dim(1);
  const auto rois = collect_rois(episode, res);
  if (rois.empty()) throw SamplingError("episode has no query RoIs");

  LossReport report;
  report.lambda = cfg.lambda;
  report.n_rois = rois.size();
  std::vector<RoiState> states(rois.size());
  double reg_sum = 0.0;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    auto& s = states[i];
    s.backbone = backbone_forward(rois[i].crop, model.backbone);
    s.pool = pool_for_embedding(s.backbone.features);
    Tensor v;
    if (use_mr) {
      s.embed = embed_forward(s.pool.output, adapted);
      v = s.embed.embedding;
    } else {
      v = avgpool_global(s.pool.output);
    }
    s.head = metric_head_gradient(v.values(), proto_vectors, rois[i].label, metric);
    report.l_cls += s.head.loss;

    s.box = box_head_forward(s.backbone.features, model.box_head);
    const double fg_conf = 1.0 - s.head.row.confidences[kBackgroundClass];
    s.gated = rois[i].label != kBackgroundClass && rois[i].has_target && fg_conf > cfg.fg_gate;
    if (s.gated) {
      s.target = encode_box(rois[i].box, rois[i].target);
      reg_sum += smooth_l1(s.box.delta, s.target);
      ++report.n_regressed;
    }
  }
  const double inv_r = 1.0 / static_cast<double>(rois.size());
  report.l_cls *= inv_r;
  report.l_reg = report.n_regressed ? reg_sum / static_cast<double>(report.n_regressed) : 0.0;
  report.l_det = report.l_cls + cfg.lambda * report.l_reg;
  if (!std::isfinite(report.l_det)) throw TrainingError("non-finite episode loss");

  const double reg_scale =
      report.n_regressed ? cfg.lambda / static_cast<double>(report.n_regressed) : 0.0;
  const std::size_t dim = proto_vectors.front().size();
  std::vector<Tensor> grad_protos(way, Tensor({dim}));

  for (auto& s : states) {
    Tensor g_features;
    if (paths.query) {
      Tensor g_v = Tensor::vector(s.head.grad_query);
      g_v.scale(inv_r);
      const Tensor g_map = use_mr ? embed_backward(s.embed, g_v, adapted)
                                  : avgpool_global_backward(g_v, s.pool.output.shape());
      add_into(g_features, maxpool2d_backward(g_map, s.pool));
    }
    if (paths.support)
      for (std::size_t c = 0; c < way; ++c)
        for (std::size_t k = 0; k < dim; ++k) grad_protos[c][k] += inv_r * s.head.grad_prototypes[c][k];
    if (paths.box && s.gated) {
      const auto g_delta = scaled(smooth_l1_grad(s.box.delta, s.target), reg_scale);
      add_into(g_features, box_head_backward(s.box, g_delta, model.box_head));
    }
    if (!g_features.empty()) backbone_backward(s.backbone, g_features, model.backbone);
  }

  if (paths.support) {
    for (std::size_t c = 0; c < way; ++c) {
      Tensor g_v = grad_protos[c];
      g_v.scale(1.0 / static_cast<double>(prototypes[c].k_used));
      for (std::size_t k = 0; k < sup_maps[c].size(); ++k) {
        const Tensor g_map = use_mr ? embed_backward(sup_embed[c][k], g_v, adapted)
                                    : avgpool_global_backward(g_v, sup_maps[c][k].shape());
        backbone_backward(sup_backbone[c][k], maxpool2d_backward(g_map, sup_pool[c][k]),
                          model.backbone);
      }
    }
  }

  if (use_mr) {
    transfer_grads(adapted.conv1, model.mr.conv1);
    transfer_grads(adapted.conv2, model.mr.conv2);
  }
  if (forward) forward->prototypes = prototypes;
  return report;
}

StepOutcome outer_step(Model& model, const Episode& episode, const TrainConfig& cfg, double lr,
                       GradientPaths paths) {
  StepOutcome out;
  model.zero_grad();
  try {
    out.report = accumulate_outer_gradients(model, episode, cfg, paths);
    sgd_step(outer_parameters(model, cfg), lr);
  } catch (const DegenerateVectorError& e) {
    out.skipped = true;
    out.diagnostic = e.what();
  } catch (const NumericError& e) {
    out.skipped = true;
    out.diagnostic = e.what();
  } catch (const TrainingError& e) {
    out.skipped = true;
    out.diagnostic = e.what();
  }
  if (out.skipped) model.zero_grad();
  return out;
}

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
  const std::size_t decays = cfg.decay_mode == DecayMode::single
                                 ? (step >= cfg.decay_step ? 1 : 0)
                                 : step / cfg.decay_step;
  double lr = cfg.outer_lr;
  for (std::size_t i = 0; i < decays; ++i) lr *= cfg.decay_factor;
  return lr;
}

std::uint64_t training_episode_seed(const TrainConfig& cfg, std::size_t step) {
  return derive_seed(cfg.seed, {kTrainEpisodes, step});
}

namespace {

std::string checkpoint_name(const char* prefix, std::size_t number, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu.json", prefix, width, number);
  return buf;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const ToyDataset& dataset, const TrainOptions& options) {
  cfg.validate();
  dataset.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(options.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + options.out_dir.string() + ": " + ec.message());

  TrainResult result;
  std::size_t start = 0;
  if (options.resume) {
    auto ck = load_checkpoint(*options.resume);
    if (ck.model.config != cfg.model_config())
      throw LoadError("checkpoint " + options.resume->string() + " has a different model layout");
    result.model = std::move(ck.model);
    start = ck.step;
  } else {
    result.model = Model::create(cfg.model_config(), derive_seed(cfg.seed, {kModelInit}));
  }

  result.metrics_log = options.out_dir / "metrics.jsonl";
  std::ofstream log(result.metrics_log, options.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open metrics log " + result.metrics_log.string());

  const std::size_t total = cfg.epochs * cfg.iters;
  const std::size_t end = std::min(total, options.stop_after.value_or(total));
  const auto spec = cfg.episode_spec(Split::base);
  for (std::size_t step = start; step < end; ++step) {
    const auto seed = training_episode_seed(cfg, step);
    const Episode episode = sample_episode(dataset, spec, seed);
    const double lr = learning_rate_at(cfg, step);
    const auto outcome = outer_step(result.model, episode, cfg, lr);
    if (outcome.skipped) ++result.skipped;

    nlohmann::json line;
    line["step"] = step;
    line["l_cls"] = outcome.report.l_cls;
    line["l_reg"] = outcome.report.l_reg;
    line["l_det"] = outcome.report.l_det;
    line["lr"] = lr;
    line["episode_seed"] = seed;
    if (outcome.skipped) {
      line["skipped"] = true;
      line["diagnostic"] = outcome.diagnostic;
    }
    log << line.dump() << '\n';
    if (!log) throw IoError("write to metrics log " + result.metrics_log.string() + " failed");
    if (options.on_step) options.on_step(step, outcome);

    const std::size_t done = step + 1;
    if (done % cfg.iters == 0) {
      const std::size_t epoch = done / cfg.iters;
      if (epoch % cfg.checkpoint_every_epochs == 0 || epoch == cfg.epochs) {
        const auto path = options.out_dir / checkpoint_name("checkpoint_e", epoch, 3);
        save_checkpoint(path, result.model, cfg, done);
        result.checkpoints.push_back(path);
      }
    }
  }
  result.steps_done = end > start ? end - start : 0;
  if (result.checkpoints.empty() || end % cfg.iters != 0) {
    const auto path = options.out_dir / checkpoint_name("checkpoint_s", end, 6);
    save_checkpoint(path, result.model, cfg, end);
    result.checkpoints.push_back(path);
  }
  result.final_checkpoint = result.checkpoints.back();
  return result;
}

}  // namespace fsdet
