#include "fsdet/layers.hpp"

#include <algorithm>
#include <cmath>

#include "fsdet/errors.hpp"

namespace fsdet {

LayerParams LayerParams::conv(std::string name, std::size_t out_channels,
                              std::size_t in_channels, std::size_t kernel) {
  LayerParams p;
  p.name = std::move(name);
  p.weights = Tensor({out_channels, in_channels, kernel, kernel});
  p.bias = Tensor({out_channels});
  p.zero_grad();
  return p;
}

LayerParams LayerParams::dense(std::string name, std::size_t out_features,
                               std::size_t in_features) {
  LayerParams p;
  p.name = std::move(name);
  p.weights = Tensor({out_features, in_features});
  p.bias = Tensor({out_features});
  p.zero_grad();
  return p;
}

void LayerParams::zero_grad() {
  grad_weights = Tensor(weights.shape());
  grad_bias = Tensor(bias.shape());
}

std::size_t LayerParams::fan_in() const { return weights.size() / weights.dim(0); }

void LayerParams::init_kaiming(Rng& rng) {
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in()));
  for (auto& w : weights.values()) w = std * rng.normal();
  bias.fill(0.0);
}

void LayerParams::init_fan_in(Rng& rng) {
  const double std = std::sqrt(1.0 / static_cast<double>(fan_in()));
  for (auto& w : weights.values()) w = std * rng.normal();
  bias.fill(0.0);
}

namespace {

struct ConvGeometry {
  std::size_t in_c, in_h, in_w, out_c, k, out_h, out_w;
};

ConvGeometry conv_geometry(const Tensor& input, const LayerParams& params, std::size_t stride,
                           std::size_t pad) {
  if (input.rank() != 3)
    throw ShapeError("conv2d '" + params.name + "': input must be [C,H,W], got " +
                     shape_string(input.shape()));
  if (params.weights.rank() != 4 || params.weights.dim(2) != params.weights.dim(3))
    throw ConfigError("conv2d '" + params.name + "': weights must be [C',C,k,k], got " +
                      shape_string(params.weights.shape()));
  if (stride == 0) throw ConfigError("conv2d '" + params.name + "': stride must be positive");
  ConvGeometry g{};
  g.in_c = input.dim(0);
  g.in_h = input.dim(1);
  g.in_w = input.dim(2);
  g.out_c = params.weights.dim(0);
  g.k = params.weights.dim(2);
  if (params.weights.dim(1) != g.in_c)
    throw ConfigError("conv2d '" + params.name + "': kernel expects " +
                      std::to_string(params.weights.dim(1)) + " input channels, input has " +
                      std::to_string(g.in_c));
  if (g.in_h + 2 * pad < g.k || g.in_w + 2 * pad < g.k)
    throw ShapeError("conv2d '" + params.name + "': input " + shape_string(input.shape()) +
                     " smaller than kernel " + std::to_string(g.k) + " after padding " +
                     std::to_string(pad));
  g.out_h = (g.in_h + 2 * pad - g.k) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.k) / stride + 1;
  return g;
}

// Output positions o with 0 <= o*stride + offset - pad < extent, as a half-open range.
std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t in_extent,
                                                std::size_t offset, std::size_t stride,
                                                std::size_t pad) {
  std::size_t lo = 0;
  if (offset < pad) lo = (pad - offset + stride - 1) / stride;
  if (in_extent + pad <= offset) return {0, 0};
  std::size_t hi = (in_extent - 1 + pad - offset) / stride + 1;
  hi = std::min(hi, out_extent);
  return {std::min(lo, hi), hi};
}

}  // namespace

namespace {

// Patch matrix [in_c * k * k, out_h * out_w]; rows follow the weight layout (ic, ky, kx) and
// out-of-image taps stay zero.
std::vector<double> im2col(std::span<const double> in, const ConvGeometry& g, std::size_t stride,
                           std::size_t pad) {
  const std::size_t plane = g.out_h * g.out_w;
  std::vector<double> col(g.in_c * g.k * g.k * plane, 0.0);
  for (std::size_t ic = 0; ic < g.in_c; ++ic) {
    const double* in_plane = in.data() + ic * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [y0, y1] = valid_range(g.out_h, g.in_h, ky, stride, pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [x0, x1] = valid_range(g.out_w, g.in_w, kx, stride, pad);
        double* row = col.data() + ((ic * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const double* src = in_plane + (oy * stride + ky - pad) * g.in_w;
          for (std::size_t ox = x0; ox < x1; ++ox) row[oy * g.out_w + ox] = src[ox * stride + kx - pad];
        }
      }
    }
  }
  return col;
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const LayerParams& params, std::size_t stride,
                      std::size_t pad) {
  const auto g = conv_geometry(input, params, stride, pad);
  Tensor out({g.out_c, g.out_h, g.out_w});
  const auto col = im2col(input.values(), g, stride, pad);
  const auto w = params.weights.values();
  auto o = out.values();
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t taps = g.in_c * g.k * g.k;

  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    double* dst = o.data() + oc * plane;
    std::fill(dst, dst + plane, params.bias[oc]);
    const double* wrow = w.data() + oc * taps;
    for (std::size_t r = 0; r < taps; ++r) {
      const double wv = wrow[r];
      const double* src = col.data() + r * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += wv * src[i];
    }
  }
  out.require_finite("conv2d");
  return out;
}

Tensor conv2d_backward(const Tensor& grad_out, const Tensor& saved_input, LayerParams& params,
                       std::size_t stride, std::size_t pad) {
  if (saved_input.empty())
    throw StateError("conv2d '" + params.name + "' backward: missing saved input activation");
  const auto g = conv_geometry(saved_input, params, stride, pad);
  if (grad_out.shape() != Shape{g.out_c, g.out_h, g.out_w})
    throw ShapeError("conv2d '" + params.name + "' backward: grad shape " +
                     shape_string(grad_out.shape()) + " does not match forward output " +
                     shape_string({g.out_c, g.out_h, g.out_w}));
  if (params.grad_weights.shape() != params.weights.shape()) params.zero_grad();

  const auto col = im2col(saved_input.values(), g, stride, pad);
  const auto w = params.weights.values();
  const auto go = grad_out.values();
  auto gw = params.grad_weights.values();
  auto gb = params.grad_bias.values();
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t taps = g.in_c * g.k * g.k;
  std::vector<double> gcol(taps * plane, 0.0);

  for (std::size_t oc = 0; oc < g.out_c; ++oc) {
    const double* go_plane = go.data() + oc * plane;
    double bias_sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) bias_sum += go_plane[i];
    gb[oc] += bias_sum;
    const double* wrow = w.data() + oc * taps;
    double* gwrow = gw.data() + oc * taps;
    for (std::size_t r = 0; r < taps; ++r) {
      const double* src = col.data() + r * plane;
      double* gdst = gcol.data() + r * plane;
      const double wv = wrow[r];
      double wsum = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        wsum += go_plane[i] * src[i];
        gdst[i] += wv * go_plane[i];
      }
      gwrow[r] += wsum;
    }
  }

  Tensor grad_in(saved_input.shape());
  auto gi = grad_in.values();
  for (std::size_t ic = 0; ic < g.in_c; ++ic) {
    double* gi_plane = gi.data() + ic * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [y0, y1] = valid_range(g.out_h, g.in_h, ky, stride, pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [x0, x1] = valid_range(g.out_w, g.in_w, kx, stride, pad);
        const double* row = gcol.data() + ((ic * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = y0; oy < y1; ++oy) {
          double* dst = gi_plane + (oy * stride + ky - pad) * g.in_w;
          for (std::size_t ox = x0; ox < x1; ++ox) dst[ox * stride + kx - pad] += row[oy * g.out_w + ox];
        }
      }
    }
  }
  return grad_in;
}

MaxPoolResult maxpool2d(const Tensor& input, std::size_t window, std::size_t stride) {
  if (input.rank() != 3)
    throw ShapeError("maxpool2d: input must be [C,H,W], got " + shape_string(input.shape()));
  if (window == 0 || stride == 0) throw ConfigError("maxpool2d: window and stride must be > 0");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (window > h || window > w)
    throw ShapeError("maxpool2d: window " + std::to_string(window) + " exceeds input " +
                     shape_string(input.shape()));
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  MaxPoolResult r{Tensor({c, oh, ow}), std::vector<std::size_t>(c * oh * ow), input.shape()};
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = (ch * h + oy * stride) * w + ox * stride;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (ch * h + oy * stride + dy) * w + ox * stride + dx;
            if (input[idx] > input[best]) best = idx;
          }
        r.output[o] = input[best];
        r.argmax[o] = best;
      }
  r.output.require_finite("maxpool2d");
  return r;
}

Tensor maxpool2d_backward(const Tensor& grad_out, const MaxPoolResult& forward) {
  if (forward.input_shape.empty())
    throw StateError("maxpool2d backward: missing forward routing");
  if (grad_out.shape() != forward.output.shape())
    throw ShapeError("maxpool2d backward: grad shape " + shape_string(grad_out.shape()) +
                     " does not match output " + shape_string(forward.output.shape()));
  Tensor grad_in(forward.input_shape);
  for (std::size_t i = 0; i < forward.argmax.size(); ++i) grad_in[forward.argmax[i]] += grad_out[i];
  return grad_in;
}

Tensor avgpool_global(const Tensor& input) {
  if (input.rank() != 3)
    throw ShapeError("avgpool_global: input must be [C,H,W], got " + shape_string(input.shape()));
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += input[ch * plane + i];
    out[ch] = sum / static_cast<double>(plane);
  }
  out.require_finite("avgpool_global");
  return out;
}

Tensor avgpool_global_backward(const Tensor& grad_out, const Shape& input_shape) {
  if (input_shape.size() != 3) throw StateError("avgpool_global backward: missing input shape");
  if (grad_out.size() != input_shape[0])
    throw ShapeError("avgpool_global backward: grad has " + std::to_string(grad_out.size()) +
                     " values for " + std::to_string(input_shape[0]) + " channels");
  const std::size_t plane = input_shape[1] * input_shape[2];
  Tensor grad_in(input_shape);
  for (std::size_t ch = 0; ch < input_shape[0]; ++ch) {
    const double g = grad_out[ch] / static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) grad_in[ch * plane + i] = g;
  }
  return grad_in;
}

Tensor fc_forward(const Tensor& input, const LayerParams& params) {
  if (params.weights.rank() != 2)
    throw ConfigError("fc '" + params.name + "': weights must be [D',D]");
  const std::size_t out_d = params.weights.dim(0), in_d = params.weights.dim(1);
  if (input.size() != in_d)
    throw ConfigError("fc '" + params.name + "': expects " + std::to_string(in_d) +
                      " inputs, got " + std::to_string(input.size()));
  Tensor out({out_d});
  for (std::size_t o = 0; o < out_d; ++o) {
    double sum = params.bias[o];
    const double* row = params.weights.values().data() + o * in_d;
    for (std::size_t i = 0; i < in_d; ++i) sum += row[i] * input[i];
    out[o] = sum;
  }
  out.require_finite("fc '" + params.name + "'");
  return out;
}

Tensor fc_backward(const Tensor& grad_out, const Tensor& saved_input, LayerParams& params) {
  if (saved_input.empty())
    throw StateError("fc '" + params.name + "' backward: missing saved input activation");
  const std::size_t out_d = params.weights.dim(0), in_d = params.weights.dim(1);
  if (saved_input.size() != in_d || grad_out.size() != out_d)
    throw ShapeError("fc '" + params.name + "' backward: shape mismatch");
  if (params.grad_weights.shape() != params.weights.shape()) params.zero_grad();
  Tensor grad_in(saved_input.shape());
  auto gw = params.grad_weights.values();
  for (std::size_t o = 0; o < out_d; ++o) {
    const double g = grad_out[o];
    params.grad_bias[o] += g;
    const double* row = params.weights.values().data() + o * in_d;
    for (std::size_t i = 0; i < in_d; ++i) {
      gw[o * in_d + i] += g * saved_input[i];
      grad_in[i] += row[i] * g;
    }
  }
  return grad_in;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  out.require_finite("relu");
  return out;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& saved_input) {
  if (saved_input.empty()) throw StateError("relu backward: missing saved input activation");
  if (grad_out.shape() != saved_input.shape())
    throw ShapeError("relu backward: grad shape " + shape_string(grad_out.shape()) +
                     " does not match input " + shape_string(saved_input.shape()));
  Tensor grad_in(saved_input.shape());
  for (std::size_t i = 0; i < grad_in.size(); ++i)
    grad_in[i] = saved_input[i] > 0.0 ? grad_out[i] : 0.0;
  return grad_in;
}

void sgd_step(std::span<LayerParams* const> params, double lr) {
  for (const LayerParams* p : params) {
    if (!p->grad_weights.all_finite() || !p->grad_bias.all_finite())
      throw TrainingError("sgd_step: non-finite gradient in layer '" + p->name + "'");
    if (p->grad_weights.shape() != p->weights.shape() || p->grad_bias.shape() != p->bias.shape())
      throw StateError("sgd_step: gradient buffers of '" + p->name + "' are not populated");
  }
  for (LayerParams* p : params) {
    p->weights.add_scaled(p->grad_weights, -lr);
    p->bias.add_scaled(p->grad_bias, -lr);
    p->zero_grad();
  }
}

}  // namespace fsdet
