#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "fsdet/tensor.hpp"

namespace fsdet {

enum class MetricKind { pearson, cosine };

std::string_view to_string(MetricKind kind);
/// Accepts "pearson" or "cosine"; throws ConfigError otherwise.
MetricKind parse_metric_kind(std::string_view text);

inline constexpr double kDegenerateEpsilon = 1e-12;
/// Floor applied to the true-class confidence before taking its log.
inline constexpr double kConfidenceFloor = 1e-15;

struct MetricConfig {
  /// Temperature multiplying every similarity before the softmax.
  double alpha = 10.0;
  /// Norm (or centered norm) at or below which a vector is treated as degenerate.
  double epsilon = kDegenerateEpsilon;
  MetricKind kind = MetricKind::pearson;

  void validate() const;
};

/// v.s / (|v| |s|), clamped to [-1, 1].
double cosine_distance(std::span<const double> v, std::span<const double> s,
                       double epsilon = kDegenerateEpsilon);

/// Pearson correlation of the components of v and s, clamped to [-1, 1]. Both vectors are
/// centered on their own mean, so the value is invariant to v -> a v + b for a > 0.
/// A constant vector has no defined correlation and raises DegenerateVectorError.
double pearson_distance(std::span<const double> v, std::span<const double> s,
                        double epsilon = kDegenerateEpsilon);

double similarity(MetricKind kind, std::span<const double> v, std::span<const double> s,
                  double epsilon = kDegenerateEpsilon);

/// d PR(v, s) / d v. With centered vectors vc, sc and r = PR(v, s):
///
///   dPR/dv_i = sc_i / (|vc| |sc|) - r vc_i / |vc|^2
///
/// The centering Jacobian (I - 11^T/d) drops out because both terms already sum to zero, so the
/// gradient itself sums to zero and is unchanged by shifting v. The unclamped r is used; the
/// clamp in pearson_distance only absorbs rounding.
std::vector<double> pearson_grad_query(std::span<const double> v, std::span<const double> s,
                                       double epsilon = kDegenerateEpsilon);
/// d PR(v, s) / d s; equal to pearson_grad_query(s, v) since PR is symmetric.
std::vector<double> pearson_grad_prototype(std::span<const double> v, std::span<const double> s,
                                           double epsilon = kDegenerateEpsilon);

/// d cos(v, s) / d v = s / (|v| |s|) - cos v / |v|^2.
std::vector<double> cosine_grad_query(std::span<const double> v, std::span<const double> s,
                                      double epsilon = kDegenerateEpsilon);
std::vector<double> cosine_grad_prototype(std::span<const double> v, std::span<const double> s,
                                          double epsilon = kDegenerateEpsilon);

std::vector<double> similarity_grad_query(MetricKind kind, std::span<const double> v,
                                          std::span<const double> s,
                                          double epsilon = kDegenerateEpsilon);
std::vector<double> similarity_grad_prototype(MetricKind kind, std::span<const double> v,
                                              std::span<const double> s,
                                              double epsilon = kDegenerateEpsilon);

/// exp(alpha sims[n]) / sum_k exp(alpha sims[k]), evaluated after subtracting the max.
std::vector<double> temperature_softmax(std::span<const double> sims, double alpha);

/// -ln(confidences[true_class]) with the confidence floored at kConfidenceFloor.
double classification_loss(std::span<const double> confidences, std::size_t true_class);

/// Gradient of classification_loss(temperature_softmax(sims, alpha), true_class) with respect to
/// the similarities: alpha (confidences - onehot(true_class)).
std::vector<double> loss_grad_sims(std::span<const double> confidences, std::size_t true_class,
                                   double alpha);

/// Index of the largest value; the lowest index wins ties.
std::size_t argmax_lowest(std::span<const double> values);

struct SimilarityRow {
  std::vector<double> sims;
  std::vector<double> confidences;
  std::size_t predicted_class = 0;
  MetricKind metric_kind = MetricKind::pearson;
  /// True when the query vector was degenerate and the row was forced to the fallback class.
  bool degenerate = false;
};

/// Scores one query vector against every prototype. Throws DegenerateVectorError when the query
/// or a prototype is degenerate.
SimilarityRow score_prototypes(std::span<const double> query, std::span<const Tensor> prototypes,
                               const MetricConfig& cfg);

/// Inference variant: a degenerate query yields zero similarities (uniform confidences) and is
/// assigned `fallback_class` instead of raising. Degenerate prototypes still raise.
SimilarityRow score_prototypes_or_fallback(std::span<const double> query,
                                           std::span<const Tensor> prototypes,
                                           const MetricConfig& cfg, std::size_t fallback_class);

/// Loss of one query row and its gradients with respect to the query vector and to every
/// prototype: the composition softmax-CE -> similarity, evaluated analytically.
struct HeadGradient {
  SimilarityRow row;
  double loss = 0.0;
  std::vector<double> grad_query;
  std::vector<std::vector<double>> grad_prototypes;
};

HeadGradient metric_head_gradient(std::span<const double> query,
                                  std::span<const Tensor> prototypes, std::size_t true_class,
                                  const MetricConfig& cfg);

}  // namespace fsdet
