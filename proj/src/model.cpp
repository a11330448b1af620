#include "fsdet/model.hpp"

#include <cmath>

#include "fsdet/errors.hpp"
#include "fsdet/rng.hpp"

namespace fsdet {

namespace {
constexpr std::size_t kPad = 1;
constexpr std::uint64_t kInitStream = 0x1417;
}  // namespace

BackboneTrace backbone_forward(const Tensor& crop, const Backbone& backbone) {
  BackboneTrace t;
  t.input = crop;
  t.conv1_out = conv2d_forward(crop, backbone.conv1, 2, kPad);
  t.conv1_act = relu(t.conv1_out);
  t.conv2_out = conv2d_forward(t.conv1_act, backbone.conv2, 2, kPad);
  t.features = relu(t.conv2_out);
  return t;
}

void backbone_backward(const BackboneTrace& trace, const Tensor& grad_features,
                       Backbone& backbone) {
  Tensor g = relu_backward(grad_features, trace.conv2_out);
  g = conv2d_backward(g, trace.conv1_act, backbone.conv2, 2, kPad);
  g = relu_backward(g, trace.conv1_out);
  conv2d_backward(g, trace.input, backbone.conv1, 2, kPad);
}

MaxPoolResult pool_for_embedding(const Tensor& features) { return maxpool2d(features, 2, 2); }

BoxDelta encode_box(const Box& proposal, const Box& target) {
  return {(target.center_x() - proposal.center_x()) / proposal.w,
          (target.center_y() - proposal.center_y()) / proposal.h,
          std::log(target.w / proposal.w), std::log(target.h / proposal.h)};
}

Box decode_box(const Box& proposal, const BoxDelta& d) {
  const double cx = proposal.center_x() + d.tx * proposal.w;
  const double cy = proposal.center_y() + d.ty * proposal.h;
  const double w = proposal.w * std::exp(d.tw);
  const double h = proposal.h * std::exp(d.th);
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

BoxTrace box_head_forward(const Tensor& roi_features, const BoxHead& head) {
  BoxTrace t;
  t.input = roi_features;
  t.conv_out = conv2d_forward(roi_features, head.conv, 2, kPad);
  t.conv_act = relu(t.conv_out);
  t.pooled = avgpool_global(t.conv_act);
  const Tensor out = fc_forward(t.pooled, head.fc);
  t.delta = {out[0], out[1], out[2], out[3]};
  return t;
}

Tensor box_head_backward(const BoxTrace& trace, const BoxDelta& grad_delta, BoxHead& head) {
  const Tensor g_out = Tensor::vector({grad_delta.tx, grad_delta.ty, grad_delta.tw, grad_delta.th});
  Tensor g = fc_backward(g_out, trace.pooled, head.fc);
  g = avgpool_global_backward(g, trace.conv_act.shape());
  g = relu_backward(g, trace.conv_out);
  return conv2d_backward(g, trace.input, head.conv, 2, kPad);
}

Model Model::create(const ModelConfig& config, std::uint64_t seed) {
  if (config.in_channels == 0 || config.stem_channels == 0 || config.feature_channels == 0 ||
      config.box_channels == 0)
    throw ConfigError("model: every layer width must be positive");
  if (config.way < 2) throw ConfigError("model: way must be >= 2");
  Rng rng(derive_seed(seed, {kInitStream}));
  Model m;
  m.config = config;
  m.backbone.conv1 = LayerParams::conv("backbone.conv1", config.stem_channels, config.in_channels, 3);
  m.backbone.conv2 =
      LayerParams::conv("backbone.conv2", config.feature_channels, config.stem_channels, 3);
  m.backbone.conv1.init_kaiming(rng);
  m.backbone.conv2.init_kaiming(rng);
  m.mr = MRModule::create(config.feature_channels, config.way, rng);
  m.box_head.conv = LayerParams::conv("box.conv", config.box_channels, config.feature_channels, 3);
  m.box_head.conv.init_kaiming(rng);
  m.box_head.fc = LayerParams::dense("box.fc", 4, config.box_channels);
  return m;
}

std::vector<LayerParams*> Model::persistent_layers() {
  return {&backbone.conv1, &backbone.conv2, &mr.conv1, &mr.conv2, &box_head.conv, &box_head.fc};
}

std::vector<const LayerParams*> Model::persistent_layers() const {
  return {&backbone.conv1, &backbone.conv2, &mr.conv1, &mr.conv2, &box_head.conv, &box_head.fc};
}

void Model::zero_grad() {
  for (auto* p : persistent_layers()) p->zero_grad();
  mr.fc_head.zero_grad();
}

}  // namespace fsdet
