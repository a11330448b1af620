#include "fsdet/config.hpp"

#include <fstream>
#include <sstream>

#include "fsdet/errors.hpp"
#include "json.hpp"

namespace fsdet {

using nlohmann::json;

namespace {

constexpr const char* kRequired[] = {"way",        "shot",       "n_query",  "alpha",
                                     "meta_lr",    "inner_steps", "outer_lr", "lambda",
                                     "decay_step", "epochs",     "iters",    "seed",
                                     "metric_kind", "mr_enabled"};

template <typename T>
T field(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + std::string(key) + "' has the wrong type");
  }
}

template <typename T>
void optional_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = field<T>(j, key);
}

std::size_t count_field(const json& j, const char* key) {
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError("config field '" + std::string(key) + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& key, const std::string& why) {
    throw ConfigError("config field '" + key + "' " + why);
  };
  if (way < 2) fail("way", "must be >= 2 (foreground classes + background)");
  if (shot < 1) fail("shot", "must be >= 1");
  if (n_query < 1) fail("n_query", "must be >= 1");
  if (!(alpha > 0.0)) fail("alpha", "must be positive");
  if (!(meta_lr >= 0.0)) fail("meta_lr", "must be >= 0");
  if (mr_enabled && inner_steps < 1) fail("inner_steps", "must be >= 1");
  if (!(outer_lr >= 0.0)) fail("outer_lr", "must be >= 0");
  if (!(lambda >= 0.0)) fail("lambda", "must be >= 0");
  if (decay_step < 1) fail("decay_step", "must be >= 1");
  if (epochs < 1) fail("epochs", "must be >= 1");
  if (iters < 1) fail("iters", "must be >= 1");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) fail("decay_factor", "must be in (0, 1]");
  if (jitter < 0.0 || jitter > 0.5) fail("jitter", "must be in [0, 0.5]");
  if (!(fg_gate >= 0.0 && fg_gate < 1.0)) fail("fg_gate", "must be in [0, 1)");
  if (checkpoint_every_epochs < 1) fail("checkpoint_every_epochs", "must be >= 1");
}

MetricConfig TrainConfig::metric() const { return {alpha, kDegenerateEpsilon, metric_kind}; }

EpisodeSpec TrainConfig::episode_spec(Split split) const {
  EpisodeSpec s;
  s.split = split;
  s.way = way;
  s.shot = shot;
  s.n_query = n_query;
  s.n_bg_proposals = n_bg_proposals;
  s.jitter = jitter;
  return s;
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.way = way;
  return m;
}

TrainConfig TrainConfig::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const char* key : kRequired)
    if (!j.contains(key)) throw ConfigError("config is missing required field '" + std::string(key) + "'");

  TrainConfig c;
  c.way = count_field(j, "way");
  c.shot = count_field(j, "shot");
  c.n_query = count_field(j, "n_query");
  c.alpha = field<double>(j, "alpha");
  c.meta_lr = field<double>(j, "meta_lr");
  c.inner_steps = count_field(j, "inner_steps");
  c.outer_lr = field<double>(j, "outer_lr");
  c.lambda = field<double>(j, "lambda");
  c.decay_step = count_field(j, "decay_step");
  c.epochs = count_field(j, "epochs");
  c.iters = count_field(j, "iters");
  c.seed = field<std::uint64_t>(j, "seed");
  c.metric_kind = parse_metric_kind(field<std::string>(j, "metric_kind"));
  c.mr_enabled = field<bool>(j, "mr_enabled");

  optional_field(j, "decay_factor", c.decay_factor);
  if (j.contains("decay_mode")) {
    const auto mode = field<std::string>(j, "decay_mode");
    if (mode == "single") c.decay_mode = DecayMode::single;
    else if (mode == "periodic") c.decay_mode = DecayMode::periodic;
    else throw ConfigError("config field 'decay_mode' must be 'single' or 'periodic'");
  }
  if (j.contains("n_bg_proposals")) c.n_bg_proposals = count_field(j, "n_bg_proposals");
  optional_field(j, "jitter", c.jitter);
  optional_field(j, "fg_gate", c.fg_gate);
  if (j.contains("checkpoint_every_epochs"))
    c.checkpoint_every_epochs = count_field(j, "checkpoint_every_epochs");
  optional_field(j, "dataset", c.dataset);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

std::string TrainConfig::to_json() const {
  json j;
  j["way"] = way;
  j["shot"] = shot;
  j["n_query"] = n_query;
  j["alpha"] = alpha;
  j["meta_lr"] = meta_lr;
  j["inner_steps"] = inner_steps;
  j["outer_lr"] = outer_lr;
  j["lambda"] = lambda;
  j["decay_step"] = decay_step;
  j["epochs"] = epochs;
  j["iters"] = iters;
  j["seed"] = seed;
  j["metric_kind"] = to_string(metric_kind);
  j["mr_enabled"] = mr_enabled;
  j["decay_factor"] = decay_factor;
  j["decay_mode"] = decay_mode == DecayMode::single ? "single" : "periodic";
  j["n_bg_proposals"] = n_bg_proposals;
  j["jitter"] = jitter;
  j["fg_gate"] = fg_gate;
  j["checkpoint_every_epochs"] = checkpoint_every_epochs;
  j["dataset"] = dataset;
  return j.dump(2);
}

}  // namespace fsdet
