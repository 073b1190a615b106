#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specpl/errors.hpp"

namespace specpl {

/// Channel-major shape of a spatial latent.
struct Grid {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const noexcept { return channels * height * width; }
  bool operator==(const Grid&) const = default;
};

/// C x h x w spatial latent, stored channel-major then row-major.
template <typename T>
class BasicLatent {
 public:
  using value_type = T;

  BasicLatent() = default;

  explicit BasicLatent(Grid grid, T fill = T{}, std::string id = {})
      : sample_id(std::move(id)), grid_(grid) {
    if (grid.channels == 0 || grid.height == 0 || grid.width == 0) {
      throw ParameterError("latent dimensions must be positive");
    }
    values_.assign(grid.size(), fill);
  }

  BasicLatent(Grid grid, std::vector<T> values, std::string id = {})
      : sample_id(std::move(id)), grid_(grid), values_(std::move(values)) {
    if (grid.channels == 0 || grid.height == 0 || grid.width == 0) {
      throw ParameterError("latent dimensions must be positive");
    }
    if (values_.size() != grid.size()) {
      throw ParameterError("latent value count does not match its grid");
    }
  }

  const Grid& grid() const noexcept { return grid_; }
  std::size_t channels() const noexcept { return grid_.channels; }
  std::size_t height() const noexcept { return grid_.height; }
  std::size_t width() const noexcept { return grid_.width; }
  std::size_t size() const noexcept { return values_.size(); }

  T& operator()(std::size_t c, std::size_t i, std::size_t j) {
    return values_[(c * grid_.height + i) * grid_.width + j];
  }
  const T& operator()(std::size_t c, std::size_t i, std::size_t j) const {
    return values_[(c * grid_.height + i) * grid_.width + j];
  }

  std::span<T> values() noexcept { return values_; }
  std::span<const T> values() const noexcept { return values_; }

  std::span<T> channel(std::size_t c) {
    return std::span<T>(values_).subspan(c * grid_.height * grid_.width,
                                         grid_.height * grid_.width);
  }
  std::span<const T> channel(std::size_t c) const {
    return std::span<const T>(values_).subspan(c * grid_.height * grid_.width,
                                               grid_.height * grid_.width);
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  /// Throws NumericalError if any entry is NaN or infinite.
  void require_finite() const {
    if (!all_finite()) throw NumericalError("latent '" + sample_id + "' has non-finite entries");
  }

  template <typename U>
  BasicLatent<U> cast() const {
    std::vector<U> out(values_.begin(), values_.end());
    return BasicLatent<U>(grid_, std::move(out), sample_id);
  }

  bool operator==(const BasicLatent&) const = default;

 public:
  std::string sample_id;

 private:
  Grid grid_{};
  std::vector<T> values_;
};

using LatentTensor = BasicLatent<float>;

/// Bit-level comparison; distinguishes -0.0 from 0.0 and compares NaN payloads.
template <typename T>
bool bitwise_equal(const BasicLatent<T>& a, const BasicLatent<T>& b) {
  if (!(a.grid() == b.grid()) || a.sample_id != b.sample_id) return false;
  return std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
BasicLatent<T> operator+(const BasicLatent<T>& a, const BasicLatent<T>& b) {
  if (!(a.grid() == b.grid())) throw ParameterError("latent shape mismatch");
  BasicLatent<T> out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t n = 0; n < o.size(); ++n) o[n] += bv[n];
  return out;
}

template <typename T>
BasicLatent<T> operator-(const BasicLatent<T>& a, const BasicLatent<T>& b) {
  if (!(a.grid() == b.grid())) throw ParameterError("latent shape mismatch");
  BasicLatent<T> out = a;
  auto o = out.values();
  auto bv = b.values();
  for (std::size_t n = 0; n < o.size(); ++n) o[n] -= bv[n];
  return out;
}

template <typename T>
BasicLatent<T> operator*(T scale, const BasicLatent<T>& a) {
  BasicLatent<T> out = a;
  for (auto& v : out.values()) v *= scale;
  return out;
}

}  // namespace specpl
