#pragma once

// Radial-band spectral energy of base/detail bands and their overlap.
//
// Binning: centred frequency indices (u', v'), normalized radius
// r = |(u'/H, v'/W)| / r_max with r_max the Nyquist-corner radius, K equal
// bins over (0, 1]; the DC bin goes to band 1. Power is averaged over
// channels and normalized to sum to one.

#include <cmath>
#include <complex>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "specpl/latent.hpp"
#include "specpl/nn.hpp"
#include "specpl/spectral_proxy.hpp"
#include "specpl/teacher.hpp"

namespace specpl {

/// Degenerate-energy threshold on mean squared amplitude.
inline constexpr double kEnergyEpsilon = 1e-12;

namespace detail {

/// Row i spreads input cells over output cell i in proportion to overlap.
inline Mat area_weights(std::size_t out, std::size_t in) {
  Mat a = Mat::Zero(Eigen::Index(out), Eigen::Index(in));
  const double scale = double(in) / double(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double lo = double(i) * scale;
    const double hi = double(i + 1) * scale;
    for (std::size_t j = static_cast<std::size_t>(std::floor(lo)); j < in && double(j) < hi; ++j) {
      const double len = std::min(hi, double(j + 1)) - std::max(lo, double(j));
      if (len > 0.0) a(Eigen::Index(i), Eigen::Index(j)) = len / scale;
    }
  }
  return a;
}

inline long centred_index(std::size_t u, std::size_t n) {
  return u < (n + 1) / 2 ? static_cast<long>(u) : static_cast<long>(u) - static_cast<long>(n);
}

}  // namespace detail

/// Per-channel area-average resampling to height x width.
template <typename T>
BasicLatent<double> align_grid(const BasicLatent<T>& z, std::size_t height, std::size_t width) {
  if (height < 2 || width < 2) throw ParameterError("analysis grid must be at least 2x2");
  BasicLatent<double> out(Grid{z.channels(), height, width}, 0.0, z.sample_id);
  if (z.height() == height && z.width() == width) {
    auto o = out.values();
    auto in = z.values();
    for (std::size_t n = 0; n < o.size(); ++n) o[n] = double(in[n]);
    return out;
  }
  const Mat rows = detail::area_weights(height, z.height());
  const Mat cols = detail::area_weights(width, z.width());
  for (std::size_t c = 0; c < z.channels(); ++c) {
    Mat m(Eigen::Index(z.height()), Eigen::Index(z.width()));
    for (std::size_t i = 0; i < z.height(); ++i)
      for (std::size_t j = 0; j < z.width(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = double(z(c, i, j));
    const Mat r = rows * m * cols.transpose();
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) out(c, i, j) = r(Eigen::Index(i), Eigen::Index(j));
  }
  return out;
}

/// Radial band (0-based) of frequency bin (u, v) on an h x w grid.
inline std::size_t radial_band(std::size_t u, std::size_t v, std::size_t h, std::size_t w, std::size_t bands) {
  const double fu = double(detail::centred_index(u, h)) / double(h);
  const double fv = double(detail::centred_index(v, w)) / double(w);
  const double mu = double(h / 2) / double(h);
  const double mv = double(w / 2) / double(w);
  const double r_max = std::sqrt(mu * mu + mv * mv);
  const double r = std::sqrt(fu * fu + fv * fv);
  if (r == 0.0 || r_max == 0.0) return 0;
  const double x = r / r_max * double(bands);
  const auto b = static_cast<std::size_t>(std::ceil(x));
  return std::min(bands, std::max<std::size_t>(b, 1)) - 1;
}

struct RadialSpectrum {
  Vec energies;          // normalized e(1..K); zero vector when degenerate
  std::size_t height = 0;
  std::size_t width = 0;
  double total_energy = 0.0;  // mean squared amplitude over channels

  bool degenerate() const { return !(total_energy > kEnergyEpsilon); }
};

/// Channel-averaged power per radial band of z's own grid.
template <typename T>
RadialSpectrum radial_spectrum(const BasicLatent<T>& z, std::size_t bands) {
  if (bands == 0) throw ParameterError("band count must be positive");
  const std::size_t h = z.height(), w = z.width();
  Eigen::FFT<double> fft;
  Mat power = Mat::Zero(Eigen::Index(h), Eigen::Index(w));
  std::vector<std::vector<std::complex<double>>> rows(h);
  std::vector<std::complex<double>> line, spectrum;
  for (std::size_t c = 0; c < z.channels(); ++c) {
    for (std::size_t i = 0; i < h; ++i) {
      line.assign(w, {});
      for (std::size_t j = 0; j < w; ++j) line[j] = double(z(c, i, j));
      fft.fwd(rows[i], line);
    }
    for (std::size_t j = 0; j < w; ++j) {
      line.assign(h, {});
      for (std::size_t i = 0; i < h; ++i) line[i] = rows[i][j];
      fft.fwd(spectrum, line);
      for (std::size_t u = 0; u < h; ++u) power(Eigen::Index(u), Eigen::Index(j)) += std::norm(spectrum[u]);
    }
  }
  const double norm = double(z.channels()) * double(h * w) * double(h * w);
  power /= norm;

  RadialSpectrum out;
  out.height = h;
  out.width = w;
  out.energies = Vec::Zero(Eigen::Index(bands));
  out.total_energy = power.sum();
  if (out.degenerate()) return out;
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v)
      out.energies(Eigen::Index(radial_band(u, v, h, w, bands))) += power(Eigen::Index(u), Eigen::Index(v));
  out.energies /= out.energies.sum();
  return out;
}

struct OverlapReport {
  double overlap = 0.0;    // mean over included samples
  double overlap_std = 0.0;
  Vec band_minima;         // mean per-band min(e_base, e_detail); sums to overlap
  Vec mean_base;
  Vec mean_detail;
  std::size_t samples = 0;
  std::size_t skipped = 0;
};

/// sum_k min(a_k, b_k)
inline OverlapReport overlap(const RadialSpectrum& a, const RadialSpectrum& b) {
  if (a.energies.size() != b.energies.size()) throw ParameterError("spectra have different band counts");
  OverlapReport r;
  r.band_minima = a.energies.cwiseMin(b.energies);
  r.overlap = r.band_minima.sum();
  r.mean_base = a.energies;
  r.mean_detail = b.energies;
  r.samples = 1;
  return r;
}

struct DiagnosticParams {
  std::size_t kernel = 7;
  std::size_t bands = 10;
  std::size_t height = 14;
  std::size_t width = 14;
};

/// Factorize, align and compare every sample. Samples where either band is
/// degenerate are skipped and counted.
inline OverlapReport diagnose(const LatentCache& cache, const DiagnosticParams& p) {
  if (cache.empty()) throw ParameterError("diagnose needs a non-empty cache");
  const auto k = static_cast<Eigen::Index>(p.bands);
  OverlapReport agg;
  agg.band_minima = Vec::Zero(k);
  agg.mean_base = Vec::Zero(k);
  agg.mean_detail = Vec::Zero(k);
  std::vector<double> values;
  for (const auto& rec : cache.records) {
    const auto z = rec.latent.cast<double>();
    const auto bands = factorize(z, p.kernel);
    const auto eb = radial_spectrum(align_grid(bands.base, p.height, p.width), p.bands);
    const auto ed = radial_spectrum(align_grid(bands.detail, p.height, p.width), p.bands);
    if (eb.degenerate() || ed.degenerate()) {
      ++agg.skipped;
      continue;
    }
    const auto one = overlap(eb, ed);
    values.push_back(one.overlap);
    agg.band_minima += one.band_minima;
    agg.mean_base += eb.energies;
    agg.mean_detail += ed.energies;
  }
  agg.samples = values.size();
  if (values.empty()) return agg;
  const double inv = 1.0 / double(values.size());
  agg.band_minima *= inv;
  agg.mean_base *= inv;
  agg.mean_detail *= inv;
  double sum = 0.0;
  for (double v : values) sum += v;
  agg.overlap = sum * inv;
  double var = 0.0;
  for (double v : values) var += (v - agg.overlap) * (v - agg.overlap);
  agg.overlap_std = std::sqrt(var * inv);
  return agg;
}

/// Tab-separated band table followed by overlap_mean / overlap_std / skipped_count lines.
inline void write_spectral_report(std::ostream& out, const OverlapReport& r) {
  std::ostringstream s;
  s << std::setprecision(10);
  s << "band_index\te_base\te_detail\tmin\n";
  for (Eigen::Index k = 0; k < r.band_minima.size(); ++k) {
    s << (k + 1) << '\t' << r.mean_base(k) << '\t' << r.mean_detail(k) << '\t' << r.band_minima(k) << '\n';
  }
  s << "overlap_mean\t" << r.overlap << '\n';
  s << "overlap_std\t" << r.overlap_std << '\n';
  s << "skipped_count\t" << r.skipped << '\n';
  out << s.str();
}

}  // namespace specpl
