#include "fsdet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "fsdet/errors.hpp"
#include "fsdet/layers.hpp"
#include "fsdet/metric.hpp"
#include "fsdet/model.hpp"
#include "fsdet/rng.hpp"
#include "fsdet/training.hpp"

namespace fsdet {

namespace {

constexpr double kKinkMargin = 1e-3;

class Checker {
 public:
  Checker(std::string name, const GradcheckOptions& opt) : opt_(opt) { result_.name = std::move(name); }

  void compare(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), opt_.abs_floor});
    const double err = std::abs(analytic - numeric) / denom;
    result_.max_rel_error = std::max(result_.max_rel_error, std::isfinite(err) ? err : INFINITY);
    ++result_.checks;
  }
  void exclude() { ++result_.excluded; }
  void trial() { ++result_.trials; }

  /// Central difference of f with respect to x[i].
  double numeric(std::span<double> x, std::size_t i, const std::function<double()>& f) const {
    const double saved = x[i];
    x[i] = saved + opt_.step;
    const double up = f();
    x[i] = saved - opt_.step;
    const double down = f();
    x[i] = saved;
    return (up - down) / (2.0 * opt_.step);
  }

  SuiteResult finish() {
    result_.passed = result_.max_rel_error < opt_.tolerance;
    return result_;
  }

 private:
  const GradcheckOptions& opt_;
  SuiteResult result_;
};

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

SuiteResult metric_chain_suite(MetricKind kind, const GradcheckOptions& opt) {
  Checker check(std::string(to_string(kind)) + "-head", opt);
  MetricConfig cfg;
  cfg.kind = kind;
  for (std::size_t dim : opt.dims) {
    Rng rng(derive_seed(opt.seed, {0x6d65, static_cast<std::uint64_t>(kind), dim}));
    for (std::size_t t = 0; t < opt.trials; ++t) {
      check.trial();
      const std::size_t n = 2 + rng.index(4);
      const std::size_t true_class = rng.index(n);
      Tensor v = random_tensor({dim}, rng);
      std::vector<Tensor> protos;
      for (std::size_t c = 0; c < n; ++c) {
        // Mix of the query and noise so the similarities spread over [-1, 1].
        const double w = rng.uniform(-1.0, 1.0);
        Tensor s = random_tensor({dim}, rng);
        s.add_scaled(v, 2.0 * w);
        protos.push_back(std::move(s));
      }
      auto loss = [&] {
        return classification_loss(score_prototypes(v.values(), protos, cfg).confidences, true_class);
      };
      auto head = metric_head_gradient(v.values(), protos, true_class, cfg);
      if (kind == MetricKind::pearson && opt.corrupt_pearson) head.grad_query[0] += 0.01;
      for (std::size_t i = 0; i < dim; ++i) check.compare(head.grad_query[i], check.numeric(v.values(), i, loss));
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t i = 0; i < dim; ++i)
          check.compare(head.grad_prototypes[c][i], check.numeric(protos[c].values(), i, loss));
    }
  }
  return check.finish();
}

SuiteResult conv_suite(const GradcheckOptions& opt) {
  Checker check("conv2d", opt);
  Rng rng(derive_seed(opt.seed, {0x636f6e76}));
  for (std::size_t t = 0; t < opt.layer_trials; ++t) {
    check.trial();
    const std::size_t cin = 1 + rng.index(3), cout = 1 + rng.index(4);
    const std::size_t h = 5 + rng.index(4), w = 5 + rng.index(4);
    const std::size_t stride = 1 + rng.index(2), pad = rng.index(2);
    LayerParams p = LayerParams::conv("probe", cout, cin, 3);
    p.weights = random_tensor(p.weights.shape(), rng);
    p.bias = random_tensor(p.bias.shape(), rng);
    Tensor x = random_tensor({cin, h, w}, rng);
    const Tensor probe_out = conv2d_forward(x, p, stride, pad);
    const Tensor r = random_tensor(probe_out.shape(), rng);
    auto loss = [&] { return dot(conv2d_forward(x, p, stride, pad), r); };
    p.zero_grad();
    const Tensor gx = conv2d_backward(r, x, p, stride, pad);
    for (std::size_t i = 0; i < x.size(); ++i) check.compare(gx[i], check.numeric(x.values(), i, loss));
    for (std::size_t i = 0; i < p.weights.size(); ++i)
      check.compare(p.grad_weights[i], check.numeric(p.weights.values(), i, loss));
    for (std::size_t i = 0; i < p.bias.size(); ++i)
      check.compare(p.grad_bias[i], check.numeric(p.bias.values(), i, loss));
  }
  return check.finish();
}

bool window_has_tie(const Tensor& x, std::size_t window, std::size_t stride) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy + window <= h; oy += stride)
      for (std::size_t ox = 0; ox + window <= w; ox += stride) {
        double a = -INFINITY, b = -INFINITY;
        for (std::size_t dy = 0; dy < window; ++dy)
          for (std::size_t dx = 0; dx < window; ++dx) {
            const double v = x.at(ch, oy + dy, ox + dx);
            if (v > a) {
              b = a;
              a = v;
            } else if (v > b) {
              b = v;
            }
          }
        if (a - b < kKinkMargin) return true;
      }
  return false;
}

SuiteResult maxpool_suite(const GradcheckOptions& opt) {
  Checker check("maxpool2d", opt);
  Rng rng(derive_seed(opt.seed, {0x6d6178}));
  for (std::size_t t = 0; t < opt.layer_trials; ++t) {
    check.trial();
    const std::size_t c = 1 + rng.index(3), h = 4 + rng.index(5), w = 4 + rng.index(5);
    const std::size_t window = 2 + rng.index(2), stride = 1 + rng.index(2);
    Tensor x = random_tensor({c, h, w}, rng);
    if (window_has_tie(x, window, stride)) {
      check.exclude();
      continue;
    }
    const auto fwd = maxpool2d(x, window, stride);
    const Tensor r = random_tensor(fwd.output.shape(), rng);
    auto loss = [&] { return dot(maxpool2d(x, window, stride).output, r); };
    const Tensor gx = maxpool2d_backward(r, fwd);
    for (std::size_t i = 0; i < x.size(); ++i) check.compare(gx[i], check.numeric(x.values(), i, loss));
  }
  return check.finish();
}

SuiteResult avgpool_suite(const GradcheckOptions& opt) {
  Checker check("avgpool_global", opt);
  Rng rng(derive_seed(opt.seed, {0x617667}));
  for (std::size_t t = 0; t < opt.layer_trials; ++t) {
    check.trial();
    const std::size_t c = 1 + rng.index(4), h = 1 + rng.index(6), w = 1 + rng.index(6);
    Tensor x = random_tensor({c, h, w}, rng);
    const Tensor r = random_tensor({c}, rng);
    auto loss = [&] { return dot(avgpool_global(x), r); };
    const Tensor gx = avgpool_global_backward(r, x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) check.compare(gx[i], check.numeric(x.values(), i, loss));
  }
  return check.finish();
}

SuiteResult fc_suite(const GradcheckOptions& opt) {
  Checker check("fc", opt);
  Rng rng(derive_seed(opt.seed, {0x6663}));
  for (std::size_t t = 0; t < opt.layer_trials; ++t) {
    check.trial();
    const std::size_t in = 1 + rng.index(16), out = 1 + rng.index(8);
    LayerParams p = LayerParams::dense("probe", out, in);
    p.weights = random_tensor(p.weights.shape(), rng);
    p.bias = random_tensor(p.bias.shape(), rng);
    Tensor x = random_tensor({in}, rng);
    const Tensor r = random_tensor({out}, rng);
    auto loss = [&] { return dot(fc_forward(x, p), r); };
    p.zero_grad();
    const Tensor gx = fc_backward(r, x, p);
    for (std::size_t i = 0; i < x.size(); ++i) check.compare(gx[i], check.numeric(x.values(), i, loss));
    for (std::size_t i = 0; i < p.weights.size(); ++i)
      check.compare(p.grad_weights[i], check.numeric(p.weights.values(), i, loss));
    for (std::size_t i = 0; i < p.bias.size(); ++i)
      check.compare(p.grad_bias[i], check.numeric(p.bias.values(), i, loss));
  }
  return check.finish();
}

SuiteResult relu_suite(const GradcheckOptions& opt) {
  Checker check("relu", opt);
  Rng rng(derive_seed(opt.seed, {0x72656c75}));
  for (std::size_t t = 0; t < opt.layer_trials; ++t) {
    check.trial();
    Tensor x = random_tensor({1 + rng.index(32)}, rng);
    const Tensor r = random_tensor(x.shape(), rng);
    auto loss = [&] { return dot(relu(x), r); };
    const Tensor gx = relu_backward(r, x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::abs(x[i]) <= kKinkMargin) {
        check.exclude();
        continue;
      }
      check.compare(gx[i], check.numeric(x.values(), i, loss));
    }
  }
  return check.finish();
}

SuiteResult smooth_l1_suite(const GradcheckOptions& opt) {
  Checker check("smooth_l1", opt);
  Rng rng(derive_seed(opt.seed, {0x736c31}));
  for (std::size_t t = 0; t < opt.layer_trials; ++t) {
    check.trial();
    std::vector<double> p(4), q(4);
    for (std::size_t i = 0; i < 4; ++i) {
      p[i] = 2.0 * rng.normal();
      q[i] = 2.0 * rng.normal();
    }
    auto as_delta = [](const std::vector<double>& d) { return BoxDelta{d[0], d[1], d[2], d[3]}; };
    auto loss = [&] { return smooth_l1(as_delta(p), as_delta(q)); };
    const BoxDelta g = smooth_l1_grad(as_delta(p), as_delta(q));
    const double ga[4] = {g.tx, g.ty, g.tw, g.th};
    for (std::size_t i = 0; i < 4; ++i) {
      if (std::abs(std::abs(p[i] - q[i]) - 1.0) <= kKinkMargin) {
        check.exclude();
        continue;
      }
      check.compare(ga[i], check.numeric(p, i, loss));
    }
  }
  return check.finish();
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& options) {
  if (!(options.step > 0.0)) throw ConfigError("gradcheck step must be positive");
  if (!(options.tolerance > 0.0)) throw ConfigError("gradcheck tolerance must be positive");
  for (std::size_t d : options.dims)
    if (d < 2) throw ConfigError("gradcheck dims must be at least 2");

  GradcheckReport report;
  report.suites.push_back(metric_chain_suite(MetricKind::pearson, options));
  report.suites.push_back(metric_chain_suite(MetricKind::cosine, options));
  report.suites.push_back(conv_suite(options));
  report.suites.push_back(maxpool_suite(options));
  report.suites.push_back(avgpool_suite(options));
  report.suites.push_back(fc_suite(options));
  report.suites.push_back(relu_suite(options));
  report.suites.push_back(smooth_l1_suite(options));
  for (const auto& s : report.suites) {
    report.passed = report.passed && s.passed;
    if (s.checks) report.empty = false;
  }
  return report;
}

}  // namespace fsdet
