#pragma once

// Spatial low-pass / residual high-pass split of a latent, per-band channel
// statistics, and the projection heads that map them into the embedding space.

#include <random>

#include "specpl/latent.hpp"
#include "specpl/nn.hpp"
#include "specpl/teacher.hpp"

namespace specpl {

inline void check_kernel(std::size_t k, const Grid& grid) {
  if (k % 2 == 0) throw ParameterError("kernel size must be odd, got " + std::to_string(k));
  if (k < 1 || k > std::min(grid.height, grid.width)) {
    throw ParameterError("kernel size " + std::to_string(k) + " exceeds the latent grid");
  }
}

/// Stride-1 k x k box mean with replicate padding, per channel.
///
/// Each window is averaged as centre + mean(window - centre), which keeps
/// constant fields exact.
template <typename T>
BasicLatent<T> smooth_lowpass(const BasicLatent<T>& z, std::size_t k) {
  check_kernel(k, z.grid());
  const auto h = static_cast<std::ptrdiff_t>(z.height());
  const auto w = static_cast<std::ptrdiff_t>(z.width());
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  const T inv_area = T(1) / T(k * k);
  BasicLatent<T> out(z.grid(), T{}, z.sample_id);
  for (std::size_t c = 0; c < z.channels(); ++c) {
    for (std::ptrdiff_t i = 0; i < h; ++i) {
      for (std::ptrdiff_t j = 0; j < w; ++j) {
        const T centre = z(c, i, j);
        T acc{};
        for (std::ptrdiff_t di = -r; di <= r; ++di) {
          const auto ii = std::clamp<std::ptrdiff_t>(i + di, 0, h - 1);
          for (std::ptrdiff_t dj = -r; dj <= r; ++dj) {
            const auto jj = std::clamp<std::ptrdiff_t>(j + dj, 0, w - 1);
            acc += z(c, ii, jj) - centre;
          }
        }
        out(c, i, j) = centre + acc * inv_area;
      }
    }
  }
  return out;
}

template <typename T>
struct BasicBandPair {
  BasicLatent<T> base;
  BasicLatent<T> detail;
  std::size_t kernel = 1;
};

using BandPair = BasicBandPair<double>;

/// base = smooth_lowpass(z, k), detail = z - base.
template <typename T>
BasicBandPair<T> factorize(const BasicLatent<T>& z, std::size_t k) {
  BasicBandPair<T> pair{smooth_lowpass(z, k), z, k};
  auto d = pair.detail.values();
  auto b = pair.base.values();
  for (std::size_t n = 0; n < d.size(); ++n) d[n] -= b[n];
  return pair;
}

/// Single-precision latents are split in double precision. Every float is
/// exactly representable there, and base + detail then reproduces z bitwise;
/// in float arithmetic that identity cannot hold for all inputs.
inline BandPair factorize(const LatentTensor& z, std::size_t k) { return factorize(z.cast<double>(), k); }

/// Mean absolute activation per channel.
template <typename T>
Vec band_stats(const BasicLatent<T>& z) {
  z.require_finite();
  Vec stats(static_cast<Eigen::Index>(z.channels()));
  const double area = static_cast<double>(z.height() * z.width());
  for (std::size_t c = 0; c < z.channels(); ++c) {
    double acc = 0.0;
    for (T v : z.channel(c)) acc += std::abs(static_cast<double>(v));
    stats(static_cast<Eigen::Index>(c)) = acc / area;
  }
  return stats;
}

struct BandEmbedding {
  Vec vector;
  Band band = Band::low;
};

/// MLP head R^C -> R^C -> R^d. Its output is l2-normalized by project_band.
struct ProjectionHead {
  Mlp mlp;
  Band band = Band::low;

  static ProjectionHead init(std::size_t channels, std::size_t dim, Band band,
                             std::mt19937_64& rng) {
    return ProjectionHead{Mlp::init(channels, channels, dim, rng), band};
  }

  std::size_t input_width() const { return mlp.input_width(); }
  std::size_t output_width() const { return mlp.output_width(); }
};

struct ProjectionTrace {
  MlpTrace mlp;
  double norm = 0.0;
};

inline BandEmbedding project_band(const ProjectionHead& head, const Vec& stats,
                                  ProjectionTrace* trace = nullptr) {
  if (static_cast<std::size_t>(stats.size()) != head.input_width()) {
    throw ParameterError("band statistics width " + std::to_string(stats.size()) +
                         " does not match head input " + std::to_string(head.input_width()));
  }
  MlpTrace t;
  Vec raw = forward(head.mlp, stats, &t);
  double norm = 0.0;
  BandEmbedding e{l2_normalize(raw, &norm), head.band};
  if (trace) *trace = ProjectionTrace{std::move(t), norm};
  return e;
}

/// Backpropagates d loss / d embedding into the head parameters. Statistics are
/// computed from detached latents, so nothing is returned for the input.
inline void project_band_backward(const ProjectionHead& head, const ProjectionTrace& trace,
                                  const BandEmbedding& out, const Vec& grad_embedding,
                                  Mlp& grad) {
  const Vec g_raw = l2_normalize_backward(out.vector, trace.norm, grad_embedding);
  backward(head.mlp, trace.mlp, g_raw, grad);
}

}  // namespace specpl
