#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "fsdet/checkpoint.hpp"
#include "fsdet/config.hpp"
#include "fsdet/evaluation.hpp"
#include "fsdet/gradcheck.hpp"
#include "fsdet/metric.hpp"
#include "fsdet/training.hpp"
#include "support.hpp"

using namespace fsdet;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;
std::ofstream report_file;

void emit(const std::string& line) {
  std::cout << line << std::endl;
  report_file << line << std::endl;
}

void report(const std::string& id, bool ok, const std::string& detail) {
  emit((ok ? "PASS " : "FAIL ") + id + ": " + detail);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double pearson_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  return (cov / n) / (std::sqrt(va / n) * std::sqrt(vb / n));
}

double cosine_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

std::vector<double> random_vec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto r = run_gradcheck(GradcheckOptions{});
  const double secs = seconds_since(t0);
  double pearson_err = 0.0;
  std::size_t pearson_trials = 0;
  for (const auto& s : r.suites)
    if (s.name == "pearson-head") pearson_err = s.max_rel_error, pearson_trials = s.trials;
  double worst = 0.0;
  for (const auto& s : r.suites) worst = std::max(worst, s.max_rel_error);
  const bool ok = r.passed && !r.empty && pearson_err < 1e-4 && pearson_trials >= 3000 && secs < 60.0;
  report("1 gradient suite", ok,
         "pearson head max rel err " + fmt("%.3g", pearson_err) + " over " +
             std::to_string(pearson_trials) + " draws (D = 8, 32, 128), all suites max " +
             fmt("%.3g", worst) + ", " + fmt("%.1f", secs) + " s");
}

void invariance_suite() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t d = 2 + rng.index(127);
    const auto v = random_vec(d, rng), s = random_vec(d, rng);
    const double a = std::exp(rng.uniform(-4, 4)), b = rng.uniform(-20, 20);
    auto w = v;
    for (double& x : w) x = a * x + b;
    worst = std::max(worst, std::abs(pearson_distance(w, s) - pearson_distance(v, s)));
  }
  const std::vector<double> v{1, 2, 3}, shifted{2, 3, 4}, s{1, 2, 4};
  const double cos_v = cosine_distance(v, s), cos_shift = cosine_distance(shifted, s);
  const double pr_v = pearson_distance(v, s), pr_shift = pearson_distance(shifted, s);
  const bool witness = std::abs(cos_v - cosine_oracle(v, s)) < 1e-12 &&
                       std::abs(cos_shift - cosine_oracle(shifted, s)) < 1e-12 &&
                       std::abs(pr_v - pearson_oracle(v, s)) < 1e-12 &&
                       std::abs(cos_v - cos_shift) > 1e-3 && std::abs(pr_v - pr_shift) < 1e-12;
  const double secs = seconds_since(t0);
  report("2 pearson invariance", worst < 1e-9 && witness && secs < 10.0,
         "max |PR(av+b,s) - PR(v,s)| " + fmt("%.3g", worst) + " over 1000 draws; witness cosine " +
             fmt("%.6f", cos_v) + " vs " + fmt("%.6f", cos_shift) + ", pearson " + fmt("%.6f", pr_v) +
             " vs " + fmt("%.6f", pr_shift) + ", " + fmt("%.2f", secs) + " s");
}

void oracle_equivalence() {
  Rng rng(77);
  double pr_worst = 0.0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t d = 2 + rng.index(127);
    const auto a = random_vec(d, rng), b = random_vec(d, rng);
    pr_worst = std::max(pr_worst, std::abs(pearson_distance(a, b) - pearson_oracle(a, b)));
  }
  double conv_worst = 0.0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t cin = 1 + rng.index(6), cout = 1 + rng.index(6), k = 1 + rng.index(4);
    const std::size_t h = k + rng.index(12), w = k + rng.index(12);
    const std::size_t stride = 1 + rng.index(2), pad = rng.index(2);
    auto p = LayerParams::conv("c", cout, cin, k);
    p.weights = fsdet::testing::random_tensor(p.weights.shape(), rng);
    p.bias = fsdet::testing::random_tensor(p.bias.shape(), rng);
    const Tensor x = fsdet::testing::random_tensor({cin, h, w}, rng);
    const Tensor got = conv2d_forward(x, p, stride, pad);
    const Tensor want = fsdet::testing::naive_conv(x, p, stride, pad);
    if (got.shape() != want.shape()) {
      conv_worst = INFINITY;
      break;
    }
    for (std::size_t i = 0; i < got.size(); ++i) conv_worst = std::max(conv_worst, std::abs(got[i] - want[i]));
  }
  report("3 oracle equivalence", pr_worst <= 1e-12 && conv_worst <= 1e-12,
         "pearson vs two-pass oracle max diff " + fmt("%.3g", pr_worst) +
             " over 10^4 draws; conv2d vs direct loops max diff " + fmt("%.3g", conv_worst) +
             " over 50 layers");
}

std::size_t worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

void inner_loop_efficacy(const TrainConfig& cfg, const ToyDataset& dataset) {
  const auto t0 = Clock::now();
  const Model fresh = Model::create(cfg.model_config(), derive_seed(cfg.seed, {1}));
  EvalOptions eo;
  eo.way = cfg.way;
  eo.shot = cfg.shot;
  eo.n_episodes = 100;
  eo.seed = 500;
  eo.workers = worker_count();
  const auto r = evaluate(fresh, cfg, dataset, eo);
  std::size_t improved = 0;
  for (const auto& e : r.episodes) improved += e.inner_last < e.inner_first;
  const double secs = seconds_since(t0);
  report("4 inner-loop efficacy", improved >= 95 && r.episodes.size() == 100 && secs < 300.0,
         std::to_string(improved) + "/100 episodes lower after " + std::to_string(cfg.inner_steps) +
             " steps at meta_lr " + fmt("%g", cfg.meta_lr) + " (2 classes + background, " +
             std::to_string(cfg.shot) + "-shot), " + fmt("%.1f", secs) + " s");
}

struct Variant {
  std::string name;
  bool mr;
  MetricKind metric;
  TrainResult trained;
  EvalResult eval;
  double seconds = 0.0;
};

double moving_average(const std::vector<double>& xs, std::size_t from, std::size_t window) {
  double s = 0.0;
  for (std::size_t i = from; i < from + window; ++i) s += xs[i];
  return s / double(window);
}

std::vector<double> logged_losses(const fs::path& log) {
  std::vector<double> out;
  std::istringstream in(fsdet::testing::read_file(log));
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (!j.value("skipped", false)) out.push_back(j.at("l_det").get<double>());
  }
  return out;
}

void reproducibility(const fs::path& work, const TrainConfig& base, const ToyDataset& dataset,
                     const fs::path& full_checkpoint) {
  TrainConfig cfg = base;
  cfg.epochs = 2;
  cfg.iters = 25;
  TrainOptions a, b;
  a.out_dir = work / "repro_a";
  b.out_dir = work / "repro_b";
  const auto ra = train(cfg, dataset, a);
  const auto rb = train(cfg, dataset, b);
  using fsdet::testing::read_file;
  const bool logs = read_file(ra.metrics_log) == read_file(rb.metrics_log) &&
                    !read_file(ra.metrics_log).empty();
  bool ckpts = ra.checkpoints.size() == rb.checkpoints.size() && !ra.checkpoints.empty();
  for (std::size_t i = 0; ckpts && i < ra.checkpoints.size(); ++i)
    ckpts = read_file(blob_path_for(ra.checkpoints[i])) == read_file(blob_path_for(rb.checkpoints[i]));

  const Checkpoint loaded = load_checkpoint(full_checkpoint);
  const fs::path copy = work / "roundtrip" / "copy.json";
  save_checkpoint(copy, loaded.model, loaded.config, loaded.step);
  const Checkpoint reloaded = load_checkpoint(copy);
  const bool roundtrip = read_file(blob_path_for(copy)) == read_file(blob_path_for(full_checkpoint)) &&
                         parameter_blob(reloaded.model.persistent_layers()) ==
                             parameter_blob(loaded.model.persistent_layers());
  report("8 reproducibility", logs && ckpts && roundtrip,
         std::string("two ") + std::to_string(cfg.epochs) + "x" + std::to_string(cfg.iters) +
             " runs: metrics logs " + (logs ? "byte-identical" : "differ") + ", checkpoints " +
             (ckpts ? "bit-exact" : "differ") + "; full checkpoint round trip " +
             (roundtrip ? "bit-exact" : "differs"));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "fsdet-acceptance";
  const fs::path config_path =
      argc > 2 ? fs::path(argv[2]) : fs::path(FSDET_SOURCE_DIR) / "configs" / "default.json";
  fs::remove_all(work);
  fs::create_directories(work);
  report_file.open(work / "report.txt");

  const TrainConfig cfg = TrainConfig::load(config_path);
  const ToyDataset dataset = ToyDataset::default_inventory();

  gradient_suite();
  invariance_suite();
  oracle_equivalence();
  inner_loop_efficacy(cfg, dataset);

  std::vector<Variant> variants = {{"mr+pearson", true, MetricKind::pearson, {}, {}, 0.0},
                                   {"mr+cosine", true, MetricKind::cosine, {}, {}, 0.0},
                                   {"no-mr+pearson", false, MetricKind::pearson, {}, {}, 0.0}};
  EvalOptions eo;
  eo.way = cfg.way;
  eo.shot = cfg.shot;
  eo.n_episodes = 200;
  eo.seed = 1000;
  eo.workers = worker_count();
  double ablation_seconds = 0.0;
  for (auto& v : variants) {
    const auto t0 = Clock::now();
    TrainConfig vc = cfg;
    vc.mr_enabled = v.mr;
    vc.metric_kind = v.metric;
    TrainOptions opts;
    std::string dir = v.name;
    std::replace(dir.begin(), dir.end(), '+', '_');
    std::replace(dir.begin(), dir.end(), '-', '_');
    opts.out_dir = work / dir;
    v.trained = train(vc, dataset, opts);
    v.eval = evaluate(v.trained.model, vc, dataset, eo);
    v.seconds = seconds_since(t0);
    ablation_seconds += v.seconds;
    emit("info " + v.name + ": ap50 " + fmt("%.4f", v.eval.ap50) + " ap75 " + fmt("%.4f", v.eval.ap75) +
         " (" + std::to_string(v.trained.steps_done) + " steps, " + std::to_string(v.trained.skipped) +
         " skipped, " + fmt("%.0f", v.seconds) + " s)");
  }
  const auto& mr_pearson = variants[0];
  const auto& mr_cosine = variants[1];
  const auto& no_mr = variants[2];

  {
    TrainConfig vc = cfg;
    EvalOptions co = eo;
    co.n_episodes = 100;
    co.seed = 2000;
    const auto r = evaluate(mr_pearson.trained.model, vc, dataset, co);
    const double margin = r.within_similarity - r.cross_similarity;
    report("5 clustering", margin >= 0.1 && r.episodes.size() == 100,
           "within-class " + fmt("%.4f", r.within_similarity) + " vs cross-class " +
               fmt("%.4f", r.cross_similarity) + ", margin " + fmt("%.4f", margin) +
               " over 100 novel episodes");
  }

  report("6 directional ablation",
         mr_pearson.eval.ap50 > mr_cosine.eval.ap50 && mr_cosine.eval.ap50 > no_mr.eval.ap50 &&
             ablation_seconds < 7200.0,
         "AP50 mr+pearson " + fmt("%.4f", mr_pearson.eval.ap50) + " > mr+cosine " +
             fmt("%.4f", mr_cosine.eval.ap50) + " > no-mr+pearson " + fmt("%.4f", no_mr.eval.ap50) +
             " (" + std::to_string(cfg.epochs) + "x" + std::to_string(cfg.iters) + ", " +
             fmt("%.0f", ablation_seconds) + " s)");

  report("7 toy benchmark", mr_pearson.eval.ap50 >= 0.80 && mr_pearson.eval.n_episodes == 200,
         "mr+pearson AP50 " + fmt("%.4f", mr_pearson.eval.ap50) + " (AP75 " +
             fmt("%.4f", mr_pearson.eval.ap75) + ") over 200 novel episodes, no fine-tuning");

  reproducibility(work, cfg, dataset, mr_pearson.trained.final_checkpoint);

  {
    const auto losses = logged_losses(mr_pearson.trained.metrics_log);
    const std::size_t w = 50;
    const bool enough = losses.size() >= 2 * w;
    const double first = enough ? moving_average(losses, 0, w) : 0.0;
    const double last = enough ? moving_average(losses, losses.size() - w, w) : 0.0;
    report("supplementary loss trend", enough && last < first,
           "mr+pearson L_det moving average (window 50) " + fmt("%.4f", first) + " -> " +
               fmt("%.4f", last));
  }

  emit(failures == 0 ? "all acceptance criteria passed" : std::to_string(failures) + " failed");
  return failures == 0 ? 0 : 1;
}
