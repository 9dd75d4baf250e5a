#pragma once

// Oriented rectangular patches ("viewports") radiating from a query point.
//
// Viewport i looks along bearing theta_i = rotation_offset + i * 2*pi / n,
// measured clockwise from north. Its long axis is radial: row r = 0 is the
// row nearest the query point. Columns run across the look direction, from
// the left-hand side (as seen looking outward) to the right-hand side.
//
// Rotation offsets are snapped to a grid of 2^20 sub-steps per viewport step
// before any trigonometry is done. An offset that differs by exactly k
// viewport steps then lands on the same sub-step as viewport i + k, and the
// two produce bit-identical sample positions.

#include <array>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "avz/errors.hpp"
#include "avz/raster.hpp"
#include "avz/tensor.hpp"

namespace avz {

struct ViewportGeometry {
  std::size_t n_viewports = 16;
  double radial_length = 3360.0;     ///< metres
  double tangential_width = 2080.0;  ///< metres
  double resolution = 40.0;          ///< metres per pixel
  std::size_t snow_downscale = 8;

  std::size_t radial_px() const { return pixels(radial_length, "radial_length"); }
  std::size_t tangential_px() const { return pixels(tangential_width, "tangential_width"); }
  /// Snow patches sample a grid snow_downscale times coarser; partial cells
  /// at the far end and the sides are dropped.
  std::size_t snow_radial_px() const { return radial_px() / snow_downscale; }
  std::size_t snow_tangential_px() const { return tangential_px() / snow_downscale; }
  double snow_resolution() const { return resolution * static_cast<double>(snow_downscale); }
  double angular_step() const { return 2.0 * std::numbers::pi / static_cast<double>(n_viewports); }

  void validate() const {
    if (n_viewports == 0) throw ConfigError("viewport count must be positive");
    if (!(resolution > 0.0)) throw ConfigError("viewport resolution must be positive");
    if (snow_downscale == 0) throw ConfigError("snow downscale must be positive");
    (void)radial_px();
    (void)tangential_px();
    if (snow_radial_px() == 0 || snow_tangential_px() == 0)
      throw ConfigError("snow downscale " + std::to_string(snow_downscale) + " leaves an empty snow patch");
  }

  friend bool operator==(const ViewportGeometry&, const ViewportGeometry&) = default;

 private:
  std::size_t pixels(double len, const char* what) const {
    const double n = len / resolution;
    if (!(n >= 1.0) || n != std::round(n))
      throw ConfigError(std::string(what) + " must be a positive multiple of the resolution");
    return static_cast<std::size_t>(n);
  }
};

/// Unit look direction u and across-track direction v of one viewport.
struct ViewportFrame {
  Point u;  ///< outward
  Point v;  ///< towards increasing column index
};

inline constexpr std::int64_t kSubstepsPerViewport = std::int64_t{1} << 20;

/// Rotation offset snapped to whole sub-steps (see file comment).
inline std::int64_t snap_rotation(const ViewportGeometry& g, double rotation_offset) {
  const double unit = g.angular_step() / static_cast<double>(kSubstepsPerViewport);
  return std::llround(rotation_offset / unit);
}

/// Frame of viewport `index`. A flipped stack is the stack of the map
/// mirrored about the north axis through the query point: bearings are
/// negated and the across-track axis reverses.
inline ViewportFrame viewport_frame(const ViewportGeometry& g, std::size_t index,
                                    double rotation_offset, bool flipped) {
  const std::int64_t n = static_cast<std::int64_t>(g.n_viewports);
  std::int64_t total = snap_rotation(g, rotation_offset) +
                       static_cast<std::int64_t>(index) * kSubstepsPerViewport;
  if (flipped) total = -total;
  std::int64_t whole = total / kSubstepsPerViewport;
  std::int64_t frac = total % kSubstepsPerViewport;
  if (frac < 0) frac += kSubstepsPerViewport, whole -= 1;
  whole %= n;
  if (whole < 0) whole += n;
  const double step = g.angular_step();
  const double base = static_cast<double>(whole) * step;
  const double rest = static_cast<double>(frac) * (step / static_cast<double>(kSubstepsPerViewport));
  const double sb = std::sin(base), cb = std::cos(base), sr = std::sin(rest), cr = std::cos(rest);
  const double s = sb * cr + cb * sr;  // sin(base + rest)
  const double c = cb * cr - sb * sr;  // cos(base + rest)
  ViewportFrame f{{s, c}, {c, -s}};
  if (flipped) f.v = {-f.v.x, -f.v.y};
  return f;
}

/// World position of sample (row r, col t) for a patch of `cols` columns at
/// spacing `res`.
inline Point viewport_point(Point center, const ViewportFrame& f, double res, std::size_t r,
                            std::size_t t, std::size_t cols) {
  const double along = (static_cast<double>(r) + 0.5) * res;
  const double across =
      static_cast<double>(2 * static_cast<std::int64_t>(t) - static_cast<std::int64_t>(cols - 1)) *
      (0.5 * res);
  return {center.x + along * f.u.x + across * f.v.x, center.y + along * f.u.y + across * f.v.y};
}

/// World coordinates of all terrain samples of one viewport, row-major
/// (radial_px rows x tangential_px columns).
inline std::vector<Point> viewport_sample_coords(const ViewportGeometry& g, Point center,
                                                 std::size_t index, double rotation_offset,
                                                 bool flipped) {
  if (index >= g.n_viewports)
    throw std::out_of_range("viewport index " + std::to_string(index) + " >= " +
                            std::to_string(g.n_viewports));
  const std::size_t R = g.radial_px(), T = g.tangential_px();
  const auto f = viewport_frame(g, index, rotation_offset, flipped);
  std::vector<Point> pts;
  pts.reserve(R * T);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t t = 0; t < T; ++t) pts.push_back(viewport_point(center, f, g.resolution, r, t, T));
  return pts;
}

// ---------------------------------------------------------------------------
// Extraction

/// Terrain patches hold (elevation - elevation at the query point) / 1000 m,
/// snow patches hold snow depth / 5 m.
inline constexpr double kTerrainScale = 1000.0;
inline constexpr double kSnowScale = 5.0;

struct ViewportStack {
  Tensor<double> terrain;  ///< n_viewports x radial_px x tangential_px
  Tensor<double> snow;     ///< n_viewports x snow_radial_px x snow_tangential_px
  Point center;
  double rotation_offset = 0.0;
  bool flipped = false;
  bool sampled_nodata = false;       ///< some sample touched a no-data cell
  std::size_t out_of_bounds = 0;     ///< samples clamped onto the raster edge

  std::size_t count() const { return terrain.dim(0); }
};

inline ViewportStack extract_viewports(const Raster& terrain, const Raster& snow, Point center,
                                       const ViewportGeometry& g, double rotation_offset = 0.0,
                                       bool flipped = false) {
  if (!terrain.contains(center))
    throw GeometryError("query point (" + format_number(center.x) + ", " + format_number(center.y) +
                        ") lies outside the terrain raster");
  const std::size_t n = g.n_viewports, R = g.radial_px(), T = g.tangential_px();
  const std::size_t SR = g.snow_radial_px(), ST = g.snow_tangential_px();
  ViewportStack s{Tensor<double>({n, R, T}), Tensor<double>({n, SR, ST}), center, rotation_offset,
                  flipped};
  const Sample c = bilinear_sample(terrain, center.x, center.y);
  s.sampled_nodata = c.nodata;
  const double z0 = c.value;
  auto take = [&](const Raster& r, Point p) {
    const Sample v = bilinear_sample(r, p.x, p.y);
    s.sampled_nodata |= v.nodata;
    s.out_of_bounds += v.out_of_bounds;
    return v.value;
  };
  double* tp = s.terrain.data();
  double* sp = s.snow.data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = viewport_frame(g, i, rotation_offset, flipped);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t t = 0; t < T; ++t)
        *tp++ = (take(terrain, viewport_point(center, f, g.resolution, r, t, T)) - z0) / kTerrainScale;
    for (std::size_t r = 0; r < SR; ++r)
      for (std::size_t t = 0; t < ST; ++t)
        *sp++ = take(snow, viewport_point(center, f, g.snow_resolution(), r, t, ST)) / kSnowScale;
  }
  return s;
}

/// Rotates the viewport order by k: result patch i = input patch (i + k) mod n.
inline ViewportStack cyclic_shift(const ViewportStack& s, std::size_t k) {
  ViewportStack out = s;
  const std::size_t n = s.count();
  auto shift = [&](const Tensor<double>& src, Tensor<double>& dst) {
    const std::size_t per = src.size() / n;
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(src.data() + ((i + k) % n) * per, per, dst.data() + i * per);
  };
  shift(s.terrain, out.terrain);
  shift(s.snow, out.snow);
  return out;
}

// ---------------------------------------------------------------------------
// Bounded producer/consumer queue used to overlap extraction with training.

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity ? capacity : 1) {}

  /// Blocks while the queue is full. Returns false if the queue was closed.
  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  /// Blocks while the queue is empty. Returns nullopt once closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

}  // namespace avz
