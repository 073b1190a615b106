#pragma once

// Class text features refined by bank retrieval:
//   refined_c = LN(t_c + Agg([t_c; r_c])),  mixed_c = (1 - eta) t_c + eta refined_c.

#include <vector>

#include "specpl/nn.hpp"
#include "specpl/semantic_bank.hpp"

namespace specpl {

/// Residual aggregator: MLP over [t; r] (2d -> d -> d) followed by layer norm.
struct Aggregator {
  Mlp mlp;
  LayerNorm ln;

  static Aggregator init(std::size_t dim, std::mt19937_64& rng, double ln_gain = 1.0) {
    return Aggregator{Mlp::init(2 * dim, dim, dim, rng), LayerNorm::identity(dim, ln_gain)};
  }

  /// All-zero MLP with an identity layer norm.
  static Aggregator zero(std::size_t dim) {
    Mlp m{Mat::Zero(Eigen::Index(dim), Eigen::Index(2 * dim)), Vec::Zero(Eigen::Index(dim)),
          Mat::Zero(Eigen::Index(dim), Eigen::Index(dim)), Vec::Zero(Eigen::Index(dim))};
    return Aggregator{std::move(m), LayerNorm::identity(dim)};
  }

  static Aggregator zeros_like(const Aggregator& o) {
    return Aggregator{Mlp::zeros_like(o.mlp), LayerNorm::zeros_like(o.ln)};
  }

  std::size_t dim() const { return mlp.output_width(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    mlp.visit(prefix + ".mlp", f);
    ln.visit(prefix + ".ln", f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    mlp.visit(prefix + ".mlp", f);
    ln.visit(prefix + ".ln", f);
  }
};

struct RefineTrace {
  MlpTrace mlp;
  LayerNormTrace ln;
};

inline Vec concat(const Vec& a, const Vec& b) {
  Vec out(a.size() + b.size());
  out << a, b;
  return out;
}

inline Vec refine(const Vec& t, const Vec& r, const Aggregator& agg, RefineTrace* trace = nullptr) {
  if (t.size() != r.size() || static_cast<std::size_t>(t.size()) != agg.dim()) {
    throw ParameterError("refine width mismatch");
  }
  require_finite(t, "text feature");
  require_finite(r, "retrieved context");
  RefineTrace tr;
  Vec residual = t + forward(agg.mlp, concat(t, r), &tr.mlp);
  Vec out = forward(agg.ln, residual, &tr.ln);
  if (trace) *trace = std::move(tr);
  return out;
}

struct RefineGrad {
  Vec text;
  Vec context;
};

inline RefineGrad refine_backward(const Aggregator& agg, const RefineTrace& trace,
                                  const Vec& grad_out, Aggregator& grad) {
  const Vec g_residual = backward(agg.ln, trace.ln, grad_out, grad.ln);
  const Vec g_cat = backward(agg.mlp, trace.mlp, g_residual, grad.mlp);
  const auto d = g_residual.size();
  return RefineGrad{g_residual + g_cat.head(d), g_cat.tail(d)};
}

/// Per-class raw, refined and mixed features (rows are classes).
struct TextFeatureSet {
  Mat raw;
  Mat refined;
  Mat mixed;
  double eta = 1.0;

  std::size_t num_classes() const { return static_cast<std::size_t>(raw.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(raw.cols()); }
};

/// Everything needed to backpropagate through refine_all.
struct RefineAllTrace {
  std::vector<RetrievalResult> retrieval;
  std::vector<RefineTrace> refine;
};

inline TextFeatureSet refine_all(TextFeatureSet features, const SemanticBank& bank,
                                 const Aggregator& agg, RefineAllTrace* trace = nullptr) {
  if (!bank.full()) throw StateError("text refinement requires a full bank");
  const auto rows = features.raw.rows();
  features.refined.resize(rows, features.raw.cols());
  RefineAllTrace tr;
  tr.retrieval.reserve(static_cast<std::size_t>(rows));
  tr.refine.reserve(static_cast<std::size_t>(rows));
  for (Eigen::Index c = 0; c < rows; ++c) {
    const Vec t = features.raw.row(c).transpose();
    RetrievalResult ret = soft_retrieve(bank, t);
    RefineTrace rt;
    features.refined.row(c) = refine(t, ret.context, agg, &rt).transpose();
    tr.retrieval.push_back(std::move(ret));
    tr.refine.push_back(std::move(rt));
  }
  if (trace) *trace = std::move(tr);
  return features;
}

/// Accumulates gradients from d loss / d refined into agg grads and returns
/// d loss / d raw.
inline Mat refine_all_backward(const SemanticBank& bank, const Aggregator& agg,
                               const RefineAllTrace& trace, const Mat& grad_refined,
                               Aggregator& grad) {
  Mat g_raw = Mat::Zero(grad_refined.rows(), grad_refined.cols());
  for (Eigen::Index c = 0; c < grad_refined.rows(); ++c) {
    const auto idx = static_cast<std::size_t>(c);
    RefineGrad g = refine_backward(agg, trace.refine[idx], grad_refined.row(c).transpose(), grad);
    g.text += soft_retrieve_backward(bank, trace.retrieval[idx], g.context);
    g_raw.row(c) = g.text.transpose();
  }
  return g_raw;
}

/// Row-wise (1 - eta) raw + eta refined.
inline Mat mix(const TextFeatureSet& features) {
  if (!(features.eta >= 0.0 && features.eta <= 1.0)) {
    throw ParameterError("eta must lie in [0, 1]");
  }
  if (features.eta == 1.0) return features.refined;
  if (features.eta == 0.0) return features.raw;
  return (1.0 - features.eta) * features.raw + features.eta * features.refined;
}

}  // namespace specpl
