#pragma once

// Small differentiable pieces shared by the heads, the aggregator and the
// FiLM branch. Every forward has a matching backward that accumulates
// parameter gradients into a structure of the same type as the parameters.

#include <cmath>
#include <random>
#include <string>

#include <Eigen/Dense>

#include "specpl/errors.hpp"

namespace specpl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// x * sigmoid(x)
inline double silu(double x) { return x * sigmoid(x); }

inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

inline void require_finite(const Vec& v, const char* what) {
  if (!v.allFinite()) throw NumericalError(std::string(what) + " is not finite");
}

/// Two-layer perceptron: affine -> SiLU -> affine.
struct Mlp {
  Mat w1;
  Vec b1;
  Mat w2;
  Vec b2;

  std::size_t input_width() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t hidden_width() const { return static_cast<std::size_t>(w1.rows()); }
  std::size_t output_width() const { return static_cast<std::size_t>(w2.rows()); }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  /// With zero_output the second layer starts at zero.
  static Mlp init(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng,
                  bool zero_output = false) {
    Mlp m;
    m.w1 = uniform(hidden, in, rng);
    m.b1 = Vec::Zero(static_cast<Eigen::Index>(hidden));
    m.w2 = zero_output ? Mat::Zero(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(hidden))
                       : uniform(out, hidden, rng);
    m.b2 = Vec::Zero(static_cast<Eigen::Index>(out));
    return m;
  }

  static Mlp zeros_like(const Mlp& o) {
    return Mlp{Mat::Zero(o.w1.rows(), o.w1.cols()), Vec::Zero(o.b1.size()),
               Mat::Zero(o.w2.rows(), o.w2.cols()), Vec::Zero(o.b2.size())};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".w1", w1);
    f(prefix + ".b1", b1);
    f(prefix + ".w2", w2);
    f(prefix + ".b2", b2);
  }

 private:
  static Mat uniform(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
    return m;
  }
};

struct MlpTrace {
  Vec input;
  Vec pre;
  Vec hidden;
};

inline Vec forward(const Mlp& m, const Vec& x, MlpTrace* trace = nullptr) {
  if (x.size() != m.w1.cols()) throw ParameterError("mlp input width mismatch");
  Vec pre = m.w1 * x + m.b1;
  Vec hidden = pre.unaryExpr([](double v) { return silu(v); });
  Vec out = m.w2 * hidden + m.b2;
  if (trace) *trace = MlpTrace{x, std::move(pre), std::move(hidden)};
  return out;
}

/// Accumulates parameter gradients into grad and returns d loss / d input.
inline Vec backward(const Mlp& m, const MlpTrace& trace, const Vec& grad_out, Mlp& grad) {
  grad.w2.noalias() += grad_out * trace.hidden.transpose();
  grad.b2 += grad_out;
  Vec g_hidden = m.w2.transpose() * grad_out;
  Vec g_pre = g_hidden.cwiseProduct(trace.pre.unaryExpr([](double v) { return silu_grad(v); }));
  grad.w1.noalias() += g_pre * trace.input.transpose();
  grad.b1 += g_pre;
  return m.w1.transpose() * g_pre;
}

/// Layer normalization over the feature dimension with learned gain and bias.
struct LayerNorm {
  Vec gain;
  Vec bias;
  double eps = 1e-5;

  static LayerNorm identity(std::size_t width, double gain_value = 1.0) {
    return LayerNorm{Vec::Constant(static_cast<Eigen::Index>(width), gain_value),
                     Vec::Zero(static_cast<Eigen::Index>(width)), 1e-5};
  }

  static LayerNorm zeros_like(const LayerNorm& o) {
    return LayerNorm{Vec::Zero(o.gain.size()), Vec::Zero(o.bias.size()), o.eps};
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& f) const {
    f(prefix + ".gain", gain);
    f(prefix + ".bias", bias);
  }
};

struct LayerNormTrace {
  Vec normalized;
  double inv_std = 0.0;
};

inline Vec forward(const LayerNorm& ln, const Vec& x, LayerNormTrace* trace = nullptr) {
  if (x.size() != ln.gain.size()) throw ParameterError("layer norm width mismatch");
  const double n = static_cast<double>(x.size());
  const double mean = x.sum() / n;
  Vec centered = x.array() - mean;
  const double var = centered.squaredNorm() / n;
  const double inv_std = 1.0 / std::sqrt(var + ln.eps);
  Vec normalized = centered * inv_std;
  Vec out = ln.gain.cwiseProduct(normalized) + ln.bias;
  if (trace) *trace = LayerNormTrace{std::move(normalized), inv_std};
  return out;
}

inline Vec backward(const LayerNorm& ln, const LayerNormTrace& trace, const Vec& grad_out,
                    LayerNorm& grad) {
  grad.gain += grad_out.cwiseProduct(trace.normalized);
  grad.bias += grad_out;
  const Vec g_hat = grad_out.cwiseProduct(ln.gain);
  const double n = static_cast<double>(g_hat.size());
  const double mean_g = g_hat.sum() / n;
  const double mean_gx = g_hat.dot(trace.normalized) / n;
  return trace.inv_std * (g_hat.array() - mean_g - trace.normalized.array() * mean_gx).matrix();
}

/// Returns x / |x|. Throws NumericalError on a zero or non-finite vector.
inline Vec l2_normalize(const Vec& x, double* norm_out = nullptr) {
  const double n = x.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw NumericalError("cannot normalize a zero or non-finite vector");
  }
  if (norm_out) *norm_out = n;
  return x / n;
}

/// Backward of y = x / |x| given y and |x|.
inline Vec l2_normalize_backward(const Vec& y, double norm, const Vec& grad_y) {
  return (grad_y - y * y.dot(grad_y)) / norm;
}

inline Vec softmax(const Vec& logits) {
  const double mx = logits.maxCoeff();
  Vec e = (logits.array() - mx).exp();
  return e / e.sum();
}

inline double log_sum_exp(const Vec& logits) {
  const double mx = logits.maxCoeff();
  return mx + std::log((logits.array() - mx).exp().sum());
}

/// Cross-entropy of softmax(logits) against a class index.
struct CrossEntropy {
  double loss = 0.0;
  Vec grad_logits;
};

inline CrossEntropy cross_entropy(const Vec& logits, std::size_t label) {
  if (label >= static_cast<std::size_t>(logits.size())) {
    throw ParameterError("label " + std::to_string(label) + " outside " +
                         std::to_string(logits.size()) + " classes");
  }
  const auto y = static_cast<Eigen::Index>(label);
  CrossEntropy ce;
  ce.loss = log_sum_exp(logits) - logits(y);
  ce.grad_logits = softmax(logits);
  ce.grad_logits(y) -= 1.0;
  return ce;
}

}  // namespace specpl
