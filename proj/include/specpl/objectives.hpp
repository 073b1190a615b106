#pragma once

// Per-sample loss terms and the weighted total. Each term returns its value
// together with the gradients it produces; the trainer does the batch
// averaging and routes the gradients.

#include <algorithm>
#include <optional>
#include <vector>

#include "specpl/nn.hpp"

namespace specpl {

struct LossWeights {
  double sem = 0.1;
  double granule_f = 0.1;
  double granule_cf = 0.1;

  bool operator==(const LossWeights&) const = default;
};

/// Batch-mean loss terms. Disabled terms are empty and contribute nothing.
struct LossBreakdown {
  double cls = 0.0;
  std::optional<double> sem;
  std::optional<double> granule_f;
  std::optional<double> granule_cf;
  LossWeights weights;
  double logit_scale = 100.0;
  double total = 0.0;

  bool operator==(const LossBreakdown&) const = default;
};

/// cls + l1 sem + l2 granule_f + l3 granule_cf, absent terms counted as zero.
inline double total_loss(const LossBreakdown& parts) {
  const auto& w = parts.weights;
  if (w.sem < 0.0 || w.granule_f < 0.0 || w.granule_cf < 0.0) {
    throw ParameterError("loss weights must be non-negative");
  }
  double total = parts.cls;
  if (parts.sem) total += w.sem * *parts.sem;
  if (parts.granule_f) total += w.granule_f * *parts.granule_f;
  if (parts.granule_cf) total += w.granule_cf * *parts.granule_cf;
  return total;
}

struct ScaledCrossEntropy {
  double loss = 0.0;
  Mat grad_rows;  // d loss / d class rows
  Vec grad_query;  // d loss / d query embedding
  Vec logits;
};

/// CE(s * rows * query, label). Used for the main loss against refined rows and
/// for both granule losses against raw rows.
inline ScaledCrossEntropy scaled_cross_entropy(const Vec& query, const Mat& rows, std::size_t label,
                                               double scale) {
  if (!(scale > 0.0)) throw ParameterError("logit scale must be positive");
  if (query.size() != rows.cols()) throw ParameterError("query width does not match class rows");
  ScaledCrossEntropy out;
  out.logits = scale * (rows * query);
  CrossEntropy ce = cross_entropy(out.logits, label);
  out.loss = ce.loss;
  out.grad_rows = scale * ce.grad_logits * query.transpose();
  out.grad_query = scale * rows.transpose() * ce.grad_logits;
  return out;
}

inline ScaledCrossEntropy loss_cls(const Vec& v, const Mat& refined, std::size_t label, double scale) {
  return scaled_cross_entropy(v, refined, label, scale);
}

inline ScaledCrossEntropy loss_granule_factual(const Vec& v_g, const Mat& raw, std::size_t label,
                                               double scale) {
  return scaled_cross_entropy(v_g, raw, label, scale);
}

/// Target is the label of the sample the swapped granule came from.
inline ScaledCrossEntropy loss_granule_counterfactual(const Vec& v_gcf, const Mat& raw,
                                                      std::size_t source_label, double scale) {
  return scaled_cross_entropy(v_gcf, raw, source_label, scale);
}

/// softmax(s * refined * v). A plain value: callers must treat it as a
/// constant in every derivative.
inline Vec pseudo_labels(const Vec& v, const Mat& refined, double scale) {
  if (!(scale > 0.0)) throw ParameterError("logit scale must be positive");
  return softmax(scale * (refined * v));
}

struct SemanticAlignment {
  double loss = 0.0;
  Mat grad_raw;  // d loss / d raw rows
  Vec grad_low;  // d loss / d t_low
};

/// 1 - cos(sum_c p_c Norm(t_c), t_low), with p held constant.
inline SemanticAlignment loss_sem(const Vec& p, const Mat& raw, const Vec& t_low) {
  if (p.size() != raw.rows()) throw ParameterError("pseudo-label width does not match classes");
  if (t_low.size() != raw.cols()) throw ParameterError("t_low width does not match text rows");
  const auto classes = raw.rows();
  Mat unit(raw.rows(), raw.cols());
  std::vector<double> norms(static_cast<std::size_t>(classes));
  for (Eigen::Index c = 0; c < classes; ++c) {
    unit.row(c) = l2_normalize(raw.row(c).transpose(), &norms[std::size_t(c)]).transpose();
  }
  const Vec expected = unit.transpose() * p;
  const double ne = expected.norm();
  const double nl = t_low.norm();
  if (!(ne > 0.0)) throw NumericalError("expected text direction is zero");
  if (!(nl > 0.0)) throw NumericalError("t_low is zero");
  const double cosine = expected.dot(t_low) / (ne * nl);

  SemanticAlignment out;
  out.loss = 1.0 - std::clamp(cosine, -1.0, 1.0);
  const Vec g_expected = -(t_low / (ne * nl) - cosine * expected / (ne * ne));
  out.grad_low = -(expected / (ne * nl) - cosine * t_low / (nl * nl));
  out.grad_raw.resize(raw.rows(), raw.cols());
  for (Eigen::Index c = 0; c < classes; ++c) {
    const Vec g_unit = p(c) * g_expected;
    out.grad_raw.row(c) =
        l2_normalize_backward(unit.row(c).transpose(), norms[std::size_t(c)], g_unit).transpose();
  }
  return out;
}

}  // namespace specpl
