#include "fsdet/meta.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "fsdet/errors.hpp"
#include "fsdet/metric.hpp"

namespace fsdet {

namespace {
constexpr std::size_t kKernel = 3;
constexpr std::size_t kPad = 1;
}  // namespace

MRModule MRModule::create(std::size_t in_channels, std::size_t way, Rng& rng) {
  MRModule m;
  m.in_channels = in_channels;
  m.embed_dim = 2 * in_channels;
  m.conv1 = LayerParams::conv("mr.conv1", m.embed_dim, in_channels, kKernel);
  m.conv2 = LayerParams::conv("mr.conv2", m.embed_dim, m.embed_dim, kKernel);
  m.conv1.init_kaiming(rng);
  m.conv2.init_kaiming(rng);
  m.reset_head(way, rng.next_u64());
  return m;
}

void MRModule::reset_head(std::size_t way, std::uint64_t seed) {
  Rng rng(seed);
  fc_head = LayerParams::dense("mr.fc_head", way, embed_dim);
  fc_head.init_fan_in(rng);
}

void MRModule::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

EmbedTrace embed_forward(const Tensor& feature_map, const MRModule& mr) {
  if (feature_map.rank() != 3 || feature_map.dim(0) != mr.in_channels)
    throw ShapeError("embed: feature map " + shape_string(feature_map.shape()) +
                     " does not have the module's " + std::to_string(mr.in_channels) +
                     " channels");
  EmbedTrace t;
  t.input = feature_map;
  t.conv1_out = conv2d_forward(feature_map, mr.conv1, 2, kPad);
  t.conv1_act = relu(t.conv1_out);
  t.conv2_out = conv2d_forward(t.conv1_act, mr.conv2, 1, kPad);
  t.conv2_act = relu(t.conv2_out);
  t.embedding = avgpool_global(t.conv2_act);
  return t;
}

Tensor embed(const Tensor& feature_map, const MRModule& mr) {
  return embed_forward(feature_map, mr).embedding;
}

Tensor embed_backward(const EmbedTrace& trace, const Tensor& grad_embedding, MRModule& mr) {
  Tensor g = avgpool_global_backward(grad_embedding, trace.conv2_act.shape());
  g = relu_backward(g, trace.conv2_out);
  g = conv2d_backward(g, trace.conv1_act, mr.conv2, 1, kPad);
  g = relu_backward(g, trace.conv1_out);
  return conv2d_backward(g, trace.input, mr.conv1, 2, kPad);
}

std::vector<Prototype> build_prototypes(const ClassGroups<Tensor>& support_embeddings) {
  std::vector<Prototype> out;
  out.reserve(support_embeddings.size());
  for (std::size_t c = 0; c < support_embeddings.size(); ++c) {
    const auto& group = support_embeddings[c];
    if (group.empty())
      throw SamplingError("build_prototypes: class " + std::to_string(c) +
                          " has no support embeddings");
    Tensor mean(group.front().shape());
    for (const auto& e : group) mean.add_scaled(e);
    mean.scale(1.0 / static_cast<double>(group.size()));
    out.push_back({c, std::move(mean), group.size()});
  }
  return out;
}

void InnerLoopConfig::validate(std::size_t way) const {
  if (steps < 1) throw ConfigError("inner loop: steps must be >= 1");
  if (!(meta_lr >= 0.0)) throw ConfigError("inner loop: meta_lr must be >= 0");
  std::vector<std::size_t> sorted = label_assignment;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> expect(way);
  std::iota(expect.begin(), expect.end(), std::size_t{0});
  if (sorted != expect)
    throw ConfigError("inner loop: label assignment must be a permutation of 0.." +
                      std::to_string(way - 1));
}

namespace {

struct InnerForward {
  ClassGroups<EmbedTrace> traces;
  std::vector<Prototype> prototypes;
  std::vector<Tensor> logits;
  std::vector<std::vector<double>> probs;
  double loss = 0.0;
};

InnerForward inner_forward(const MRModule& mr, const ClassGroups<Tensor>& support_maps,
                           std::span<const std::size_t> labels, std::vector<double>* per_class) {
  if (labels.size() != support_maps.size())
    throw ConfigError("inner loop: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(support_maps.size()) + " classes");
  if (mr.way() != support_maps.size())
    throw ConfigError("inner loop: fc_head has width " + std::to_string(mr.way()) + " but the "
                      "episode has " + std::to_string(support_maps.size()) + " classes");
  InnerForward f;
  ClassGroups<Tensor> embeddings(support_maps.size());
  f.traces.resize(support_maps.size());
  for (std::size_t c = 0; c < support_maps.size(); ++c)
    for (const auto& m : support_maps[c]) {
      f.traces[c].push_back(embed_forward(m, mr));
      embeddings[c].push_back(f.traces[c].back().embedding);
    }
  f.prototypes = build_prototypes(embeddings);
  if (per_class) per_class->clear();
  for (std::size_t c = 0; c < f.prototypes.size(); ++c) {
    f.logits.push_back(fc_forward(f.prototypes[c].vector, mr.fc_head));
    f.probs.push_back(temperature_softmax(f.logits.back().values(), 1.0));
    const double l = classification_loss(f.probs.back(), labels[c]);
    if (per_class) per_class->push_back(l);
    f.loss += l;
  }
  f.loss /= static_cast<double>(f.prototypes.size());
  return f;
}

}  // namespace

double inner_loss(const MRModule& mr, const ClassGroups<Tensor>& support_maps,
                  std::span<const std::size_t> labels, std::vector<double>* per_class) {
  return inner_forward(mr, support_maps, labels, per_class).loss;
}

double inner_loss_backward(MRModule& mr, const ClassGroups<Tensor>& support_maps,
                           std::span<const std::size_t> labels, std::vector<double>* per_class) {
  auto f = inner_forward(mr, support_maps, labels, per_class);
  const double inv_n = 1.0 / static_cast<double>(f.prototypes.size());
  for (std::size_t c = 0; c < f.prototypes.size(); ++c) {
    // Plain softmax + CE: d/d logits = p - onehot.
    Tensor g_logits({f.probs[c].size()});
    for (std::size_t k = 0; k < g_logits.size(); ++k)
      g_logits[k] = inv_n * (f.probs[c][k] - (k == labels[c] ? 1.0 : 0.0));
    Tensor g_proto = fc_backward(g_logits, f.prototypes[c].vector, mr.fc_head);
    g_proto.scale(1.0 / static_cast<double>(f.prototypes[c].k_used));
    for (const auto& trace : f.traces[c]) embed_backward(trace, g_proto, mr);
  }
  return f.loss;
}

InnerAdaptation inner_adapt(const MRModule& mr, const ClassGroups<Tensor>& support_maps,
                            const InnerLoopConfig& cfg) {
  cfg.validate(support_maps.size());
  InnerAdaptation out{mr, {}};
  auto& m = out.adapted;
  if (cfg.head_seed) m.reset_head(support_maps.size(), *cfg.head_seed);
  m.zero_grad();
  const auto params = m.parameters();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double loss = inner_loss_backward(m, support_maps, cfg.label_assignment);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "inner_adapt: non-finite inner loss at step " << step;
      throw TrainingError(msg.str());
    }
    out.losses.push_back(loss);
    sgd_step(params, cfg.meta_lr);
  }
  out.losses.push_back(inner_loss(m, support_maps, cfg.label_assignment));
  if (!std::isfinite(out.losses.back()))
    throw TrainingError("inner_adapt: non-finite inner loss after the last step");
  return out;
}

std::vector<Tensor> reconstruct_queries(const MRModule& adapted,
                                        std::span<const Tensor> roi_feature_maps) {
  std::vector<Tensor> out;
  out.reserve(roi_feature_maps.size());
  for (const auto& m : roi_feature_maps) out.push_back(embed(m, adapted));
  return out;
}

}  // namespace fsdet
