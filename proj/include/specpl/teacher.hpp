#pragma once

// Synthetic stand-in for a frozen latent teacher plus the on-disk latent cache.
//
// Latents are sums of separable 2D cosine modes. One band (low or high spatial
// frequency) carries a per-class pattern, the other carries per-instance
// texture, and Gaussian noise is added on top.

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "specpl/errors.hpp"
#include "specpl/latent.hpp"

namespace specpl {

enum class Band { low, high };

inline const char* to_string(Band band) { return band == Band::low ? "low" : "high"; }

struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t base_modes = 2;    // low-order modes
  std::size_t detail_modes = 2;  // high-order modes
  double noise_std = 0.05;
  Band identity_band = Band::low;
  Grid grid{4, 16, 16};
  std::uint64_t seed = 1;
  double class_amplitude = 1.0;
  double instance_amplitude = 0.5;

  /// Integer frequency cut: low-order modes sit strictly below it, high-order strictly above.
  std::size_t cutoff() const { return std::min(grid.height, grid.width) / 4; }

  /// Largest per-axis frequency used by low-order modes.
  std::size_t low_max() const {
    const std::size_t cut = cutoff();
    return std::min<std::size_t>(cut - 1, std::max<std::size_t>(1, std::min(grid.height, grid.width) / 16));
  }

  void validate() const {
    if (grid.channels == 0 || grid.height == 0 || grid.width == 0) {
      throw SpecificationError("grid dimensions must be positive");
    }
    if (std::min(grid.height, grid.width) < 4) {
      throw SpecificationError("grid must be at least 4x4 to hold both bands");
    }
    if (base_modes == 0 || detail_modes == 0) {
      throw SpecificationError("base_modes and detail_modes must be at least 1");
    }
    if (num_classes == 0) throw SpecificationError("num_classes must be at least 1");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) {
      throw SpecificationError("noise_std must be finite and non-negative");
    }
  }
};

/// One separable mode amp[c] * cos(2 pi fu i / h + pu) * cos(2 pi fv j / w + pv).
struct CosineMode {
  std::size_t fu = 0;
  std::size_t fv = 0;
  double phase_u = 0.0;
  double phase_v = 0.0;
  std::vector<double> amplitude;  // one per channel
};

namespace detail {

inline CosineMode draw_mode(std::mt19937_64& rng, const Grid& grid, Band band,
                            std::size_t low_max, std::size_t cutoff, double scale) {
  auto draw_freq = [&](std::size_t axis_len) {
    if (band == Band::low) {
      return std::uniform_int_distribution<std::size_t>(0, low_max)(rng);
    }
    return std::uniform_int_distribution<std::size_t>(cutoff + 1, axis_len / 2)(rng);
  };
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  CosineMode m;
  m.fu = draw_freq(grid.height);
  m.fv = draw_freq(grid.width);
  m.phase_u = phase(rng);
  m.phase_v = phase(rng);
  m.amplitude.resize(grid.channels);
  for (auto& a : m.amplitude) a = scale * coef(rng);
  return m;
}

inline void add_mode(std::vector<double>& acc, const Grid& grid, const CosineMode& m) {
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t c = 0; c < grid.channels; ++c) {
    for (std::size_t i = 0; i < grid.height; ++i) {
      const double cu = std::cos(two_pi * double(m.fu) * double(i) / double(grid.height) + m.phase_u);
      for (std::size_t j = 0; j < grid.width; ++j) {
        const double cv = std::cos(two_pi * double(m.fv) * double(j) / double(grid.width) + m.phase_v);
        acc[(c * grid.height + i) * grid.width + j] += m.amplitude[c] * cu * cv;
      }
    }
  }
}

}  // namespace detail

/// Per-class identity modes, drawn from the spec seed. Index: [class][mode].
inline std::vector<std::vector<CosineMode>> draw_class_modes(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::size_t count = spec.identity_band == Band::low ? spec.base_modes : spec.detail_modes;
  std::vector<std::vector<CosineMode>> modes(spec.num_classes);
  for (auto& per_class : modes) {
    for (std::size_t m = 0; m < count; ++m) {
      per_class.push_back(detail::draw_mode(rng, spec.grid, spec.identity_band, spec.low_max(),
                                            spec.cutoff(), spec.class_amplitude));
    }
  }
  return modes;
}

struct LatentRecord {
  std::string sample_id;
  std::uint32_t class_label = 0;
  LatentTensor latent;

  bool operator==(const LatentRecord&) const = default;
};

struct LatentCache {
  std::vector<LatentRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }
  bool operator==(const LatentCache&) const = default;

  /// Checks id uniqueness, label range and finiteness.
  void validate(std::size_t num_classes) const {
    std::set<std::string> ids;
    for (const auto& r : records) {
      if (!ids.insert(r.sample_id).second) {
        throw SpecificationError("duplicate sample id '" + r.sample_id + "'");
      }
      if (r.class_label >= num_classes) {
        throw SpecificationError("class label out of range for '" + r.sample_id + "'");
      }
      r.latent.require_finite();
    }
  }
};

/// Generates num_classes x n_per_class latents, class-major. Pure function of (spec, n_per_class).
inline LatentCache generate_dataset(const SyntheticSpec& spec, std::size_t n_per_class) {
  spec.validate();
  if (n_per_class == 0) throw SpecificationError("n_per_class must be at least 1");

  const auto class_modes = draw_class_modes(spec);
  const Band instance_band = spec.identity_band == Band::low ? Band::high : Band::low;
  const std::size_t instance_count =
      instance_band == Band::low ? spec.base_modes : spec.detail_modes;

  LatentCache cache;
  cache.records.reserve(spec.num_classes * n_per_class);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t n = 0; n < n_per_class; ++n) {
      std::seed_seq seq{std::uint64_t{0x5eed}, spec.seed, std::uint64_t(c), std::uint64_t(n)};
      std::mt19937_64 rng(seq);

      std::vector<double> acc(spec.grid.size(), 0.0);
      for (const auto& mode : class_modes[c]) detail::add_mode(acc, spec.grid, mode);
      for (std::size_t m = 0; m < instance_count; ++m) {
        auto mode = detail::draw_mode(rng, spec.grid, instance_band, spec.low_max(),
                                      spec.cutoff(), spec.instance_amplitude);
        detail::add_mode(acc, spec.grid, mode);
      }
      if (spec.noise_std > 0.0) {
        std::normal_distribution<double> noise(0.0, spec.noise_std);
        for (auto& v : acc) v += noise(rng);
      }

      std::string id = "c" + std::to_string(c) + "_n" + std::to_string(n);
      std::vector<float> values(acc.begin(), acc.end());
      cache.records.push_back(LatentRecord{id, static_cast<std::uint32_t>(c),
                                           LatentTensor(spec.grid, std::move(values), id)});
    }
  }
  return cache;
}

// Binary layout, all integers little-endian:
//   "SPLC" | u32 version | u32 count |
//   per record: u16 id_len | id bytes | u32 label | u32 C | u32 h | u32 w | f32[C*h*w]
inline constexpr std::array<char, 4> kCacheMagic{'S', 'P', 'L', 'C'};
inline constexpr std::uint32_t kCacheVersion = 1;

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

/// Serializes a cache to the binary layout above.
inline std::string encode_cache(const LatentCache& cache) {
  std::string out(kCacheMagic.begin(), kCacheMagic.end());
  detail::put_u32(out, kCacheVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(cache.records.size()));
  for (const auto& r : cache.records) {
    if (r.sample_id.size() > 0xffff) throw ParameterError("sample id longer than 65535 bytes");
    detail::put_u16(out, static_cast<std::uint16_t>(r.sample_id.size()));
    out += r.sample_id;
    detail::put_u32(out, r.class_label);
    const Grid& g = r.latent.grid();
    detail::put_u32(out, static_cast<std::uint32_t>(g.channels));
    detail::put_u32(out, static_cast<std::uint32_t>(g.height));
    detail::put_u32(out, static_cast<std::uint32_t>(g.width));
    for (float v : r.latent.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

inline LatentCache decode_cache(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 4 || !std::equal(kCacheMagic.begin(), kCacheMagic.end(), bytes.begin())) {
    throw FormatError("bad magic: not a latent cache");
  }
  if (n < 12) throw FormatError("truncated cache header");
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kCacheVersion) {
    throw FormatError("unsupported cache version " + std::to_string(version));
  }
  const std::uint32_t count = detail::get_u32(p + 8);

  LatentCache cache;
  std::size_t pos = 12;
  for (std::uint32_t r = 0; r < count; ++r) {
    auto need = [&](std::size_t bytes_needed, const char* what) {
      if (n - pos < bytes_needed) throw CorruptionError(r, std::string("truncated ") + what);
    };
    need(2, "id length");
    const std::size_t id_len = std::size_t(p[pos]) | (std::size_t(p[pos + 1]) << 8);
    pos += 2;
    need(id_len, "sample id");
    std::string id(bytes.data() + pos, id_len);
    pos += id_len;
    need(16, "record header");
    const std::uint32_t label = detail::get_u32(p + pos);
    const Grid grid{detail::get_u32(p + pos + 4), detail::get_u32(p + pos + 8),
                    detail::get_u32(p + pos + 12)};
    pos += 16;
    if (grid.channels == 0 || grid.height == 0 || grid.width == 0) {
      throw CorruptionError(r, "zero latent dimension");
    }
    if (grid.size() > (n - pos) / 4) throw CorruptionError(r, "truncated latent payload");
    std::vector<float> values(grid.size());
    for (auto& v : values) {
      v = std::bit_cast<float>(detail::get_u32(p + pos));
      pos += 4;
    }
    cache.records.push_back(LatentRecord{id, label, LatentTensor(grid, std::move(values), id)});
  }
  if (pos != n) throw FormatError("trailing bytes after " + std::to_string(count) + " records");
  return cache;
}

inline void write_cache(const LatentCache& cache, const std::string& path) {
  const std::string bytes = encode_cache(cache);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open cache for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw IoError(path, "failed writing cache");
}

inline LatentCache read_cache(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open cache for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError(path, "failed reading cache");
  return decode_cache(bytes);
}

}  // namespace specpl
