#pragma once

// Training-only granule branch: shared/individual fusion, FiLM modulation of
// the image embedding, and counterfactual granule swapping.

#include <algorithm>
#include <span>
#include <vector>

#include "specpl/nn.hpp"
#include "specpl/spectral_proxy.hpp"
#include "specpl/text_refinement.hpp"

namespace specpl {

/// c = LN(s + MLP_fuse([s; t_high]))
struct FusionNet {
  Mlp mlp;
  LayerNorm ln;

  static FusionNet init(std::size_t dim, std::mt19937_64& rng) {
    return FusionNet{Mlp::init(2 * dim, dim, dim, rng, /*zero_output=*/true), LayerNorm::identity(dim)};
  }

  static FusionNet zeros_like(const FusionNet& o) {
    return FusionNet{Mlp::zeros_like(o.mlp), LayerNorm::zeros_like(o.ln)};
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

/// [gamma; beta] = MLP_mod(c); first d outputs are gamma, last d are beta.
struct FiLMNet {
  Mlp mlp;

  static FiLMNet init(std::size_t dim, std::mt19937_64& rng) {
    return FiLMNet{Mlp::init(dim, dim, 2 * dim, rng, /*zero_output=*/true)};
  }

  static FiLMNet zeros_like(const FiLMNet& o) { return FiLMNet{Mlp::zeros_like(o.mlp)}; }

  std::size_t dim() const { return mlp.input_width(); }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    mlp.visit(prefix + ".mlp", f);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    mlp.visit(prefix + ".mlp", f);
  }
};

enum class SharedAnchorPolicy { raw_text_by_label, refined_text_by_label, image_embedding };

inline const char* to_string(SharedAnchorPolicy p) {
  switch (p) {
    case SharedAnchorPolicy::raw_text_by_label: return "raw_text_by_label";
    case SharedAnchorPolicy::refined_text_by_label: return "refined_text_by_label";
    case SharedAnchorPolicy::image_embedding: return "image_embedding";
  }
  return "?";
}

// Same residual-MLP-then-LN shape as text refinement.
using FuseTrace = RefineTrace;

inline Vec fuse(const Vec& shared, const Vec& granule, const FusionNet& net,
                FuseTrace* trace = nullptr) {
  if (shared.size() != granule.size() || static_cast<std::size_t>(shared.size()) != net.dim()) {
    throw ParameterError("fuse width mismatch");
  }
  require_finite(shared, "shared anchor");
  require_finite(granule, "granule");
  FuseTrace tr;
  Vec residual = shared + forward(net.mlp, concat(shared, granule), &tr.mlp);
  Vec out = forward(net.ln, residual, &tr.ln);
  if (trace) *trace = std::move(tr);
  return out;
}

inline Vec fuse(const Vec& shared, const BandEmbedding& granule, const FusionNet& net,
                FuseTrace* trace = nullptr) {
  return fuse(shared, granule.vector, net, trace);
}

struct FuseGrad {
  Vec shared;
  Vec granule;
};

inline FuseGrad fuse_backward(const FusionNet& net, const FuseTrace& trace, const Vec& grad_out,
                              FusionNet& grad) {
  const Vec g_residual = backward(net.ln, trace.ln, grad_out, grad.ln);
  const Vec g_cat = backward(net.mlp, trace.mlp, g_residual, grad.mlp);
  const auto d = g_residual.size();
  return FuseGrad{g_residual + g_cat.head(d), g_cat.tail(d)};
}

struct FiLMTrace {
  MlpTrace mlp;
  Vec tanh_gamma;
  Vec v;
  double norm = 0.0;
};

/// Norm((1 + tanh(gamma)) * v + beta), l2-normalized.
inline Vec film_apply(const Vec& gamma, const Vec& beta, const Vec& v, Vec* tanh_gamma = nullptr,
                      double* norm = nullptr) {
  Vec tg = gamma.array().tanh().matrix();
  Vec pre = (1.0 + tg.array()).matrix().cwiseProduct(v) + beta;
  Vec out = l2_normalize(pre, norm);
  if (tanh_gamma) *tanh_gamma = std::move(tg);
  return out;
}

inline Vec film_modulate(const Vec& c, const Vec& v, const FiLMNet& net, FiLMTrace* trace = nullptr) {
  if (c.size() != v.size() || static_cast<std::size_t>(c.size()) != net.dim()) {
    throw ParameterError("film width mismatch");
  }
  require_finite(c, "film condition");
  FiLMTrace tr;
  const Vec gb = forward(net.mlp, c, &tr.mlp);
  const auto d = c.size();
  Vec out = film_apply(gb.head(d), gb.tail(d), v, &tr.tanh_gamma, &tr.norm);
  tr.v = v;
  if (trace) *trace = std::move(tr);
  return out;
}

/// Returns d loss / d c; v is a frozen image embedding and gets no gradient.
inline Vec film_backward(const FiLMNet& net, const FiLMTrace& trace, const Vec& out,
                         const Vec& grad_out, FiLMNet& grad) {
  const Vec g_pre = l2_normalize_backward(out, trace.norm, grad_out);
  const auto d = g_pre.size();
  Vec g_gb(2 * d);
  g_gb.head(d) = g_pre.cwiseProduct(trace.v).cwiseProduct(
      (1.0 - trace.tanh_gamma.array().square()).matrix());
  g_gb.tail(d) = g_pre;
  return backward(net.mlp, trace.mlp, g_gb, grad.mlp);
}

/// Throws ParameterError unless perm is a bijection on [0, n).
inline void require_permutation(std::span<const std::size_t> perm, std::size_t n) {
  if (perm.size() != n) throw ParameterError("permutation size does not match the batch");
  std::vector<bool> seen(n, false);
  for (std::size_t p : perm) {
    if (p >= n || seen[p]) throw ParameterError("permutation is not a bijection");
    seen[p] = true;
  }
}

/// Output element i is input element perm[i].
template <typename T>
std::vector<T> counterfactual_swap(std::span<const T> items, std::span<const std::size_t> perm) {
  require_permutation(perm, items.size());
  std::vector<T> out;
  out.reserve(items.size());
  for (std::size_t p : perm) out.push_back(items[p]);
  return out;
}

template <typename T>
std::vector<T> counterfactual_swap(const std::vector<T>& items, const std::vector<std::size_t>& perm) {
  return counterfactual_swap(std::span<const T>(items), std::span<const std::size_t>(perm));
}

/// Uniform random permutation of [0, n); fixed points allowed.
inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

}  // namespace specpl
