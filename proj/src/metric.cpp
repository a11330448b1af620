#include "fsdet/metric.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fsdet/errors.hpp"

namespace fsdet {

std::string_view to_string(MetricKind kind) {
  return kind == MetricKind::pearson ? "pearson" : "cosine";
}

MetricKind parse_metric_kind(std::string_view text) {
  if (text == "pearson") return MetricKind::pearson;
  if (text == "cosine") return MetricKind::cosine;
  throw ConfigError("metric_kind must be 'pearson' or 'cosine', got '" + std::string(text) + "'");
}

void MetricConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
}

namespace {

void check_pair(std::span<const double> v, std::span<const double> s, const char* what) {
  if (v.size() != s.size())
    throw ShapeError(std::string(what) + ": vectors have different lengths (" +
                     std::to_string(v.size()) + " vs " + std::to_string(s.size()) + ")");
  if (v.size() < 2) throw ShapeError(std::string(what) + ": needs at least 2 dimensions");
}

double mean_of(std::span<const double> x) {
  double sum = 0.0;
  for (double e : x) sum += e;
  return sum / static_cast<double>(x.size());
}

double clamp_unit(double r) { return std::clamp(r, -1.0, 1.0); }

// Centered copies and their norms, with the degenerate-vector checks.
struct Centered {
  std::vector<double> vc, sc;
  double nv = 0.0, ns = 0.0, dot = 0.0;
};

Centered center_pair(std::span<const double> v, std::span<const double> s, double epsilon) {
  check_pair(v, s, "pearson_distance");
  Centered c;
  const double mv = mean_of(v), ms = mean_of(s);
  c.vc.resize(v.size());
  c.sc.resize(s.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    c.vc[i] = v[i] - mv;
    c.sc[i] = s[i] - ms;
    c.nv += c.vc[i] * c.vc[i];
    c.ns += c.sc[i] * c.sc[i];
    c.dot += c.vc[i] * c.sc[i];
  }
  c.nv = std::sqrt(c.nv);
  c.ns = std::sqrt(c.ns);
  if (c.nv <= epsilon)
    throw DegenerateVectorError("pearson_distance: query vector v is constant (centered norm " +
                                    std::to_string(c.nv) + ")",
                                DegenerateVectorError::Argument::query);
  if (c.ns <= epsilon)
    throw DegenerateVectorError(
        "pearson_distance: prototype vector s is constant (centered norm " +
            std::to_string(c.ns) + ")",
        DegenerateVectorError::Argument::prototype);
  return c;
}

struct Norms {
  double nv = 0.0, ns = 0.0, dot = 0.0;
};

Norms norm_pair(std::span<const double> v, std::span<const double> s, double epsilon) {
  check_pair(v, s, "cosine_distance");
  Norms n;
  for (std::size_t i = 0; i < v.size(); ++i) {
    n.nv += v[i] * v[i];
    n.ns += s[i] * s[i];
    n.dot += v[i] * s[i];
  }
  n.nv = std::sqrt(n.nv);
  n.ns = std::sqrt(n.ns);
  if (n.nv <= epsilon)
    throw DegenerateVectorError("cosine_distance: query vector v has near-zero norm",
                                DegenerateVectorError::Argument::query);
  if (n.ns <= epsilon)
    throw DegenerateVectorError("cosine_distance: prototype vector s has near-zero norm",
                                DegenerateVectorError::Argument::prototype);
  return n;
}

}  // namespace

double cosine_distance(std::span<const double> v, std::span<const double> s, double epsilon) {
  const auto n = norm_pair(v, s, epsilon);
  return clamp_unit(n.dot / (n.nv * n.ns));
}

double pearson_distance(std::span<const double> v, std::span<const double> s, double epsilon) {
  const auto c = center_pair(v, s, epsilon);
  return clamp_unit(c.dot / (c.nv * c.ns));
}

double similarity(MetricKind kind, std::span<const double> v, std::span<const double> s,
                  double epsilon) {
  return kind == MetricKind::pearson ? pearson_distance(v, s, epsilon)
                                     : cosine_distance(v, s, epsilon);
}

std::vector<double> pearson_grad_query(std::span<const double> v, std::span<const double> s,
                                       double epsilon) {
  const auto c = center_pair(v, s, epsilon);
  const double r = c.dot / (c.nv * c.ns);
  const double a = 1.0 / (c.nv * c.ns);
  const double b = r / (c.nv * c.nv);
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = a * c.sc[i] - b * c.vc[i];
  return g;
}

std::vector<double> pearson_grad_prototype(std::span<const double> v, std::span<const double> s,
                                           double epsilon) {
  const auto c = center_pair(v, s, epsilon);
  const double r = c.dot / (c.nv * c.ns);
  const double a = 1.0 / (c.nv * c.ns);
  const double b = r / (c.ns * c.ns);
  std::vector<double> g(s.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = a * c.vc[i] - b * c.sc[i];
  return g;
}

std::vector<double> cosine_grad_query(std::span<const double> v, std::span<const double> s,
                                      double epsilon) {
  const auto n = norm_pair(v, s, epsilon);
  const double cs = n.dot / (n.nv * n.ns);
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = s[i] / (n.nv * n.ns) - cs * v[i] / (n.nv * n.nv);
  return g;
}

std::vector<double> cosine_grad_prototype(std::span<const double> v, std::span<const double> s,
                                          double epsilon) {
  const auto n = norm_pair(v, s, epsilon);
  const double cs = n.dot / (n.nv * n.ns);
  std::vector<double> g(s.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    g[i] = v[i] / (n.nv * n.ns) - cs * s[i] / (n.ns * n.ns);
  return g;
}

std::vector<double> similarity_grad_query(MetricKind kind, std::span<const double> v,
                                          std::span<const double> s, double epsilon) {
  return kind == MetricKind::pearson ? pearson_grad_query(v, s, epsilon)
                                     : cosine_grad_query(v, s, epsilon);
}

std::vector<double> similarity_grad_prototype(MetricKind kind, std::span<const double> v,
                                              std::span<const double> s, double epsilon) {
  return kind == MetricKind::pearson ? pearson_grad_prototype(v, s, epsilon)
                                     : cosine_grad_prototype(v, s, epsilon);
}

std::vector<double> temperature_softmax(std::span<const double> sims, double alpha) {
  if (sims.size() < 2) throw ShapeError("temperature_softmax: needs at least 2 classes");
  const double top = *std::max_element(sims.begin(), sims.end());
  std::vector<double> out(sims.size());
  double total = 0.0;
  for (std::size_t i = 0; i < sims.size(); ++i) {
    out[i] = std::exp(alpha * (sims[i] - top));
    total += out[i];
  }
  for (auto& o : out) o /= total;
  return out;
}

double classification_loss(std::span<const double> confidences, std::size_t true_class) {
  if (true_class >= confidences.size())
    throw ShapeError("classification_loss: true class " + std::to_string(true_class) +
                     " out of range for " + std::to_string(confidences.size()) + " classes");
  return -std::log(std::max(confidences[true_class], kConfidenceFloor));
}

std::vector<double> loss_grad_sims(std::span<const double> confidences, std::size_t true_class,
                                   double alpha) {
  if (true_class >= confidences.size())
    throw ShapeError("loss_grad_sims: true class out of range");
  std::vector<double> g(confidences.size());
  for (std::size_t n = 0; n < g.size(); ++n)
    g[n] = alpha * (confidences[n] - (n == true_class ? 1.0 : 0.0));
  return g;
}

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

SimilarityRow score_prototypes(std::span<const double> query, std::span<const Tensor> prototypes,
                               const MetricConfig& cfg) {
  SimilarityRow row;
  row.metric_kind = cfg.kind;
  row.sims.reserve(prototypes.size());
  for (const auto& p : prototypes) row.sims.push_back(similarity(cfg.kind, query, p.values(), cfg.epsilon));
  row.confidences = temperature_softmax(row.sims, cfg.alpha);
  row.predicted_class = argmax_lowest(row.confidences);
  return row;
}

SimilarityRow score_prototypes_or_fallback(std::span<const double> query,
                                           std::span<const Tensor> prototypes,
                                           const MetricConfig& cfg, std::size_t fallback_class) {
  try {
    return score_prototypes(query, prototypes, cfg);
  } catch (const DegenerateVectorError& e) {
    if (e.argument() != DegenerateVectorError::Argument::query) throw;
  }
  SimilarityRow row;
  row.metric_kind = cfg.kind;
  row.sims.assign(prototypes.size(), 0.0);
  row.confidences = temperature_softmax(row.sims, cfg.alpha);
  row.predicted_class = fallback_class;
  row.degenerate = true;
  return row;
}

HeadGradient metric_head_gradient(std::span<const double> query,
                                  std::span<const Tensor> prototypes, std::size_t true_class,
                                  const MetricConfig& cfg) {
  HeadGradient out;
  out.row = score_prototypes(query, prototypes, cfg);
  out.loss = classification_loss(out.row.confidences, true_class);
  const auto dsims = loss_grad_sims(out.row.confidences, true_class, cfg.alpha);
  out.grad_query.assign(query.size(), 0.0);
  out.grad_prototypes.resize(prototypes.size());
  for (std::size_t n = 0; n < prototypes.size(); ++n) {
    const auto gq = similarity_grad_query(cfg.kind, query, prototypes[n].values(), cfg.epsilon);
    const auto gp =
        similarity_grad_prototype(cfg.kind, query, prototypes[n].values(), cfg.epsilon);
    out.grad_prototypes[n].resize(gp.size());
    for (std::size_t i = 0; i < query.size(); ++i) {
      out.grad_query[i] += dsims[n] * gq[i];
      out.grad_prototypes[n][i] = dsims[n] * gp[i];
    }
  }
  return out;
}

}  // namespace fsdet
