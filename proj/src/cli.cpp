#include "fsdet/cli.hpp"

#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "fsdet/checkpoint.hpp"
#include "fsdet/episode.hpp"
#include "fsdet/errors.hpp"
#include "fsdet/evaluation.hpp"
#include "fsdet/gradcheck.hpp"
#include "fsdet/training.hpp"
#include "json.hpp"

namespace fsdet {

using nlohmann::json;
namespace fs = std::filesystem;

ToyDataset dataset_for(const TrainConfig& cfg) {
  if (cfg.dataset.empty()) return ToyDataset::default_inventory();
  return ToyDataset::load_manifest(cfg.dataset);
}

fs::path latest_checkpoint(const fs::path& run_dir) {
  std::optional<fs::path> best;
  std::size_t best_step = 0;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(run_dir, ec)) {
    const auto name = entry.path().filename().string();
    if (!name.starts_with("checkpoint_") || entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    const auto manifest = json::parse(in, nullptr, false);
    if (manifest.is_discarded() || !manifest.contains("meta")) continue;
    const auto step = manifest["meta"].value("step", std::size_t{0});
    if (!best || step > best_step) {
      best = entry.path();
      best_step = step;
    }
  }
  if (ec) throw IoError("cannot read run directory " + run_dir.string() + ": " + ec.message());
  if (!best) throw IoError("no checkpoint found in " + run_dir.string());
  return *best;
}

namespace {

json box_json(const Box& b) { return {b.x, b.y, b.w, b.h}; }

json delta_json(const BoxDelta& d) { return {d.tx, d.ty, d.tw, d.th}; }

std::string model_digest(const Model& model) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(parameter_digest(model.persistent_layers())));
  return buf;
}

void emit(const json& doc, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << doc.dump(2) << '\n';
    return;
  }
  std::ofstream f(out_path);
  if (!f) throw IoError("cannot write " + out_path);
  f << doc.dump(2) << '\n';
  if (!f) throw IoError("write to " + out_path + " failed");
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::string metric;
  bool no_mr = false;

  void apply(TrainConfig& cfg) const {
    if (seed) cfg.seed = *seed;
    if (!metric.empty()) cfg.metric_kind = parse_metric_kind(metric);
    if (no_mr) cfg.mr_enabled = false;
  }
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Seed");
  cmd->add_option("--metric", o.metric, "Similarity metric")->check(CLI::IsMember({"pearson", "cosine"}));
  cmd->add_flag("--no-mr", o.no_mr, "Disable the MR module");
}

json eval_json(const EvalResult& r) {
  json episodes = json::array();
  for (const auto& e : r.episodes)
    episodes.push_back({{"index", e.index},
                        {"group", e.group},
                        {"seed", e.seed},
                        {"ap50", e.ap50},
                        {"ap75", e.ap75},
                        {"within_similarity", e.clusters.within},
                        {"cross_similarity", e.clusters.cross},
                        {"inner_loss_first", e.inner_first},
                        {"inner_loss_last", e.inner_last},
                        {"n_detections", e.n_detections}});
  return {{"ap50", r.ap50},
          {"ap75", r.ap75},
          {"group_ap50", r.group_ap50},
          {"group_ap75", r.group_ap75},
          {"n_episodes", r.n_episodes},
          {"split", std::string(to_string(r.options.split))},
          {"way", r.options.way},
          {"shot", r.options.shot},
          {"seed", r.options.seed},
          {"groups", r.options.groups},
          {"within_similarity", r.within_similarity},
          {"cross_similarity", r.cross_similarity},
          {"clustering_margin", r.within_similarity - r.cross_similarity},
          {"inner_improved_fraction", r.inner_improved_fraction},
          {"config", json::parse(r.config.to_json())},
          {"episodes", std::move(episodes)}};
}

struct Variant {
  const char* name;
  const char* dir;
  bool mr;
  MetricKind metric;
};

constexpr Variant kAblationVariants[] = {
    {"no-mr+pearson", "no_mr_pearson", false, MetricKind::pearson},
    {"mr+cosine", "mr_cosine", true, MetricKind::cosine},
    {"mr+pearson", "mr_pearson", true, MetricKind::pearson},
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot detection on synthetic shapes: episodic training, evaluation, inference "
               "dumps and gradient checks."};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out_path, run_dir = "fsdet-run", split_name = "novel",
                                                     embeddings_path;
  Overrides overrides;
  std::optional<std::size_t> way, shot;
  std::size_t episodes = 200, workers = 1;
  std::uint64_t eval_seed = 0;
  double score_threshold = 0.7;
  bool train_variants = false;
  GradcheckOptions gc;
  std::optional<std::size_t> layer_trials;

  auto* train_cmd = app.add_subcommand("train", "Episodic training on the base split");
  train_cmd->add_option("--config", config_path, "Training config (JSON)")->required();
  train_cmd->add_option("--run-dir", run_dir, "Directory for checkpoints and the metrics log");
  train_cmd->add_option("--out", out_path, "Write the JSON summary here instead of stdout");
  add_overrides(train_cmd, overrides);

  auto add_eval_options = [&](CLI::App* cmd) {
    cmd->add_option("--split", split_name, "Class split to sample episodes from")
        ->check(CLI::IsMember({"base", "novel"}));
    cmd->add_option("--way", way, "Episode classes including background");
    cmd->add_option("--shot", shot, "Support examples per class");
    cmd->add_option("--out", out_path, "Write JSON here instead of stdout");
  };

  auto* eval_cmd = app.add_subcommand("eval", "AP50 / AP75 over seeded episodes");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint manifest")->required();
  eval_cmd->add_option("--episodes", episodes, "Number of episodes");
  eval_cmd->add_option("--seed", eval_seed, "Base seed of the 5 evaluation groups");
  eval_cmd->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--embeddings", embeddings_path, "Export prototype and RoI embeddings (CSV)");
  eval_cmd->add_option("--metric", overrides.metric, "Similarity metric")
      ->check(CLI::IsMember({"pearson", "cosine"}));
  eval_cmd->add_flag("--no-mr", overrides.no_mr, "Skip the MR module");
  add_eval_options(eval_cmd);

  auto* infer_cmd = app.add_subcommand("infer", "Dump one episode's proposals, scores and detections");
  infer_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint manifest")->required();
  infer_cmd->add_option("--seed", eval_seed, "Episode seed");
  infer_cmd->add_option("--score-threshold", score_threshold, "Minimum detection confidence")
      ->check(CLI::Range(0.0, 1.0));
  add_eval_options(infer_cmd);

  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  gc_cmd->add_option("--seed", gc.seed, "Seed");
  gc_cmd->add_option("--dims", gc.dims, "Vector sizes of the metric suites")->delimiter(',');
  gc_cmd->add_option("--trials", gc.trials, "Draws per dimension for the metric suites");
  gc_cmd->add_option("--layer-trials", layer_trials, "Draws per layer suite (default min(trials, 100))");
  gc_cmd->add_flag("--corrupt-gradient", gc.corrupt_pearson, "Perturb the analytic Pearson gradient");

  auto* ablate_cmd = app.add_subcommand("ablate", "AP50 of no-MR+Pearson, MR+cosine, MR+Pearson");
  ablate_cmd->add_option("--config", config_path, "Shared training config")->required();
  ablate_cmd->add_option("--run-dir", run_dir, "Parent directory of the three variant runs");
  ablate_cmd->add_flag("--train", train_variants, "Train the variants first");
  ablate_cmd->add_option("--episodes", episodes, "Evaluation episodes per variant");
  ablate_cmd->add_option("--seed", overrides.seed, "Training seed override");
  ablate_cmd->add_option("--eval-seed", eval_seed, "Evaluation base seed");
  ablate_cmd->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--out", out_path, "Write JSON here instead of stdout");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*train_cmd) {
      TrainConfig cfg = TrainConfig::load(config_path);
      overrides.apply(cfg);
      cfg.validate();
      const ToyDataset dataset = dataset_for(cfg);
      TrainOptions opts;
      opts.out_dir = run_dir;
      const auto result = train(cfg, dataset, opts);
      json summary{{"command", "train"},
                   {"seed", cfg.seed},
                   {"config", json::parse(cfg.to_json())},
                   {"steps", result.steps_done},
                   {"skipped", result.skipped},
                   {"metrics_log", result.metrics_log.string()},
                   {"final_checkpoint", result.final_checkpoint.string()},
                   {"parameter_digest", model_digest(result.model)}};
      json cks = json::array();
      for (const auto& c : result.checkpoints) cks.push_back(c.string());
      summary["checkpoints"] = std::move(cks);
      emit(summary, out_path, out);
      return kExitOk;
    }

    if (*eval_cmd || *infer_cmd) {
      auto ck = load_checkpoint(checkpoint_path);
      TrainConfig cfg = ck.config;
      overrides.apply(cfg);
      if (way) cfg.way = *way;
      if (shot) cfg.shot = *shot;
      cfg.validate();
      const ToyDataset dataset = dataset_for(cfg);
      const Split split = parse_split(split_name);
      const std::string digest_before = model_digest(ck.model);

      if (*eval_cmd) {
        EvalOptions eo;
        eo.split = split;
        eo.way = cfg.way;
        eo.shot = cfg.shot;
        eo.n_episodes = episodes;
        eo.seed = eval_seed;
        eo.workers = workers;
        eo.keep_embeddings = !embeddings_path.empty();
        const auto result = evaluate(ck.model, cfg, dataset, eo);
        if (!embeddings_path.empty()) write_embeddings_csv(result, embeddings_path);
        json doc = eval_json(result);
        doc["command"] = "eval";
        doc["checkpoint"] = checkpoint_path;
        doc["parameter_digest_before"] = digest_before;
        doc["parameter_digest_after"] = model_digest(ck.model);
        emit(doc, out_path, out);
        return kExitOk;
      }

      const Episode episode = sample_episode(dataset, cfg.episode_spec(split), eval_seed);
      const EpisodeRun run = run_episode(ck.model, episode, cfg);
      json classes = json::array();
      classes.push_back("background");
      for (std::size_t c : episode.classes) classes.push_back(dataset.classes[c].name);
      json queries = json::array();
      for (std::size_t q = 0; q < episode.queries.size(); ++q) {
        const auto& query = episode.queries[q];
        json objects = json::array(), proposals = json::array(), rois = json::array(),
             dets = json::array();
        for (std::size_t o = 0; o < query.scene.objects.size(); ++o)
          objects.push_back({{"episode_class", query.object_labels[o]},
                             {"class", dataset.classes[query.scene.objects[o].class_id].name},
                             {"box", box_json(query.scene.objects[o].box)}});
        for (const auto& p : query.proposals)
          proposals.push_back({{"box", box_json(p.box)}, {"source", std::string(to_string(p.source))}});
        for (const auto& r : run.rois) {
          if (r.query != q) continue;
          rois.push_back({{"proposal", r.proposal},
                          {"label", r.label},
                          {"sims", r.row.sims},
                          {"confidences", r.row.confidences},
                          {"predicted_class", r.row.predicted_class},
                          {"metric", std::string(to_string(r.row.metric_kind))},
                          {"degenerate", r.row.degenerate},
                          {"delta", delta_json(r.delta)},
                          {"refined_box", box_json(r.refined)}});
        }
        for (const auto& d : run.detections)
          if (d.scene == q && d.score >= score_threshold)
            dets.push_back({{"episode_class", d.episode_class}, {"score", d.score}, {"box", box_json(d.box)}});
        queries.push_back({{"scene_seed", query.scene.seed},
                           {"objects", std::move(objects)},
                           {"proposals", std::move(proposals)},
                           {"rois", std::move(rois)},
                           {"detections", std::move(dets)}});
      }
      json doc{{"command", "infer"},
               {"checkpoint", checkpoint_path},
               {"seed", eval_seed},
               {"split", split_name},
               {"score_threshold", score_threshold},
               {"classes", std::move(classes)},
               {"label_perm", episode.label_perm},
               {"inner_losses", run.inner_losses},
               {"config", json::parse(cfg.to_json())},
               {"queries", std::move(queries)}};
      emit(doc, out_path, out);
      return kExitOk;
    }

    if (*gc_cmd) {
      gc.layer_trials = layer_trials.value_or(std::min<std::size_t>(gc.trials, 100));
      const auto report = run_gradcheck(gc);
      json suites = json::array();
      for (const auto& s : report.suites)
        suites.push_back({{"name", s.name},
                          {"trials", s.trials},
                          {"checks", s.checks},
                          {"excluded", s.excluded},
                          {"max_rel_error", s.max_rel_error},
                          {"passed", s.passed}});
      emit({{"command", "gradcheck"},
            {"seed", gc.seed},
            {"dims", gc.dims},
            {"trials", gc.trials},
            {"layer_trials", gc.layer_trials},
            {"tolerance", gc.tolerance},
            {"passed", report.passed},
            {"empty", report.empty},
            {"suites", std::move(suites)}},
           "", out);
      if (!report.passed) {
        err << "gradcheck failed\n";
        return kExitRuntime;
      }
      return kExitOk;
    }

    if (*ablate_cmd) {
      TrainConfig base = TrainConfig::load(config_path);
      overrides.apply(base);
      base.validate();
      const ToyDataset dataset = dataset_for(base);
      json rows = json::array();
      for (const auto& v : kAblationVariants) {
        TrainConfig cfg = base;
        cfg.mr_enabled = v.mr;
        cfg.metric_kind = v.metric;
        const fs::path dir = fs::path(run_dir) / v.dir;
        fs::path ck_path;
        if (train_variants) {
          TrainOptions opts;
          opts.out_dir = dir;
          ck_path = train(cfg, dataset, opts).final_checkpoint;
        } else {
          ck_path = latest_checkpoint(dir);
        }
        auto ck = load_checkpoint(ck_path);
        if (ck.config.mr_enabled != v.mr || ck.config.metric_kind != v.metric)
          throw LoadError("checkpoint " + ck_path.string() + " was not trained as " + v.name);
        EvalOptions eo;
        eo.way = cfg.way;
        eo.shot = cfg.shot;
        eo.n_episodes = episodes;
        eo.seed = eval_seed;
        eo.workers = workers;
        const auto r = evaluate(ck.model, ck.config, dataset, eo);
        rows.push_back({{"variant", v.name},
                        {"mr_enabled", v.mr},
                        {"metric", std::string(to_string(v.metric))},
                        {"ap50", r.ap50},
                        {"ap75", r.ap75},
                        {"checkpoint", ck_path.string()}});
      }
      emit({{"command", "ablate"},
            {"seed", base.seed},
            {"eval_seed", eval_seed},
            {"episodes", episodes},
            {"rows", std::move(rows)}},
           out_path, out);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace fsdet
