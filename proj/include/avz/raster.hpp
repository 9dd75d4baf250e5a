#pragma once

// Georeferenced scalar grids and the ESRI ASCII grid carrier.
//
// Conventions: x grows eastward, y grows northward. Row 0 is the northernmost
// row and column 0 the westernmost. The centre of cell (col, row) sits at
//   x = x_origin + (col + 0.5) * cell_size
//   y = y_origin + (nrows - row - 0.5) * cell_size
// where (x_origin, y_origin) is the lower-left corner of the grid.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "avz/errors.hpp"

namespace avz {

enum class HazardClass : std::uint8_t { Green = 0, Yellow = 1, Red = 2 };

inline constexpr std::size_t kNumClasses = 3;

inline const char* to_string(HazardClass c) {
  switch (c) {
    case HazardClass::Green: return "green";
    case HazardClass::Yellow: return "yellow";
    case HazardClass::Red: return "red";
  }
  return "?";
}

inline std::size_t index_of(HazardClass c) { return static_cast<std::size_t>(c); }

inline HazardClass hazard_from_index(std::size_t i) {
  if (i >= kNumClasses) throw std::out_of_range("hazard class index " + std::to_string(i));
  return static_cast<HazardClass>(i);
}

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

class Raster {
 public:
  Raster() = default;
  Raster(std::size_t ncols, std::size_t nrows, double x_origin, double y_origin, double cell_size,
         double fill = 0.0)
      : ncols_(ncols), nrows_(nrows), x_origin_(x_origin), y_origin_(y_origin),
        cell_size_(cell_size), values_(ncols * nrows, fill) {
    if (ncols == 0 || nrows == 0) throw DimensionError("raster extents must be positive");
    if (!(cell_size > 0.0)) throw GeometryError("cell size must be positive");
  }

  /// A raster with the same grid and no-data sentinel, every value set to fill.
  Raster like(double fill = 0.0) const {
    Raster r(ncols_, nrows_, x_origin_, y_origin_, cell_size_, fill);
    r.nodata_ = nodata_;
    return r;
  }

  std::size_t ncols() const noexcept { return ncols_; }
  std::size_t nrows() const noexcept { return nrows_; }
  std::size_t size() const noexcept { return values_.size(); }
  double x_origin() const noexcept { return x_origin_; }
  double y_origin() const noexcept { return y_origin_; }
  double cell_size() const noexcept { return cell_size_; }

  std::optional<double> nodata_value() const noexcept { return nodata_; }
  void set_nodata_value(std::optional<double> v) { nodata_ = v; }
  bool is_nodata(double v) const noexcept { return nodata_ && v == *nodata_; }
  bool is_nodata(std::size_t col, std::size_t row) const { return is_nodata(at(col, row)); }

  double& at(std::size_t col, std::size_t row) { return values_[row * ncols_ + col]; }
  double at(std::size_t col, std::size_t row) const { return values_[row * ncols_ + col]; }
  std::vector<double>& values() noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  double x_max() const noexcept { return x_origin_ + static_cast<double>(ncols_) * cell_size_; }
  double y_max() const noexcept { return y_origin_ + static_cast<double>(nrows_) * cell_size_; }

  Point cell_center(std::size_t col, std::size_t row) const noexcept {
    return {x_origin_ + (static_cast<double>(col) + 0.5) * cell_size_,
            y_origin_ + (static_cast<double>(nrows_ - row) - 0.5) * cell_size_};
  }

  bool contains(Point p) const noexcept {
    return p.x >= x_origin_ && p.x <= x_max() && p.y >= y_origin_ && p.y <= y_max();
  }

  bool same_grid(const Raster& o) const noexcept {
    return ncols_ == o.ncols_ && nrows_ == o.nrows_ && x_origin_ == o.x_origin_ &&
           y_origin_ == o.y_origin_ && cell_size_ == o.cell_size_;
  }

  friend bool operator==(const Raster& a, const Raster& b) {
    return a.same_grid(b) && a.nodata_ == b.nodata_ && a.values_ == b.values_;
  }

 private:
  std::size_t ncols_ = 0;
  std::size_t nrows_ = 0;
  double x_origin_ = 0.0;
  double y_origin_ = 0.0;
  double cell_size_ = 1.0;
  std::optional<double> nodata_;
  std::vector<double> values_;
};

inline void require_same_grid(const Raster& a, const Raster& b, const std::string& what) {
  if (!a.same_grid(b))
    throw GeometryError(what + ": rasters do not share a grid (" + std::to_string(a.ncols()) + "x" +
                        std::to_string(a.nrows()) + " vs " + std::to_string(b.ncols()) + "x" +
                        std::to_string(b.nrows()) + ")");
}

// ---------------------------------------------------------------------------
// ESRI ASCII grid

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_number(double v) {
  std::array<char, 64> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) throw IoError("cannot format number");
  return std::string(buf.data(), end);
}

namespace detail {

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

inline double parse_double(std::string_view tok, std::size_t line, const std::string& what) {
  double v = 0.0;
  const char* first = tok.data();
  if (!tok.empty() && tok.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size())
    throw ParseError("non-numeric token '" + std::string(tok) + "' in " + what, line);
  return v;
}

}  // namespace detail

inline Raster parse_ascii_grid(std::istream& in, const std::string& source = "<stream>") {
  static constexpr std::array<std::string_view, 6> keys = {
      "ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"};
  std::array<std::optional<double>, keys.size()> header{};
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::pair<std::string, std::size_t>> pending;  // data tokens already read

  // Header: "key value" lines until the first line starting with a number.
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    const char c0 = key.front();
    if (std::isdigit(static_cast<unsigned char>(c0)) || c0 == '-' || c0 == '+' || c0 == '.') {
      pending.emplace_back(key, lineno);
      std::string tok;
      while (ls >> tok) pending.emplace_back(tok, lineno);
      break;
    }
    const std::string k = detail::lower(key);
    auto it = std::find(keys.begin(), keys.end(), k);
    if (it == keys.end()) throw ParseError("unknown header key '" + key + "' in " + source, lineno);
    std::string val, extra;
    if (!(ls >> val)) throw ParseError("header key '" + key + "' has no value in " + source, lineno);
    if (ls >> extra) throw ParseError("header key '" + key + "' has trailing text in " + source, lineno);
    double v = 0.0;
    try {
      v = detail::parse_double(val, lineno, source);
    } catch (const ParseError&) {
      throw ParseError("malformed value '" + val + "' for header key '" + key + "' in " + source, lineno);
    }
    header[static_cast<std::size_t>(it - keys.begin())] = v;
  }
  for (std::size_t i = 0; i < 5; ++i)
    if (!header[i]) throw ParseError("missing header key '" + std::string(keys[i]) + "' in " + source);

  auto as_extent = [&](std::size_t i) {
    const double v = *header[i];
    if (!(v >= 1.0) || v != std::floor(v))
      throw ParseError("header key '" + std::string(keys[i]) + "' must be a positive integer in " + source);
    return static_cast<std::size_t>(v);
  };
  const std::size_t ncols = as_extent(0), nrows = as_extent(1);
  if (!(*header[4] > 0.0)) throw ParseError("header key 'cellsize' must be positive in " + source);

  Raster r(ncols, nrows, *header[2], *header[3], *header[4]);
  if (header[5]) r.set_nodata_value(*header[5]);
  auto& vals = r.values();
  std::size_t n = 0;
  auto push = [&](std::string_view tok, std::size_t ln) {
    const double v = detail::parse_double(tok, ln, source);
    if (n >= vals.size())
      throw DimensionError(source + ": more than " + std::to_string(vals.size()) +
                           " values for a " + std::to_string(ncols) + "x" + std::to_string(nrows) +
                           " grid");
    vals[n++] = v;
  };
  for (auto& [tok, ln] : pending) push(tok, ln);
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tok;
    while (ls >> tok) push(tok, lineno);
  }
  if (n != vals.size())
    throw DimensionError(source + ": expected " + std::to_string(vals.size()) + " values for a " +
                         std::to_string(ncols) + "x" + std::to_string(nrows) + " grid, found " +
                         std::to_string(n));
  return r;
}

inline Raster load_ascii_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_ascii_grid(in, path);
}

inline void format_ascii_grid(const Raster& r, std::ostream& out) {
  out << "ncols " << r.ncols() << '\n'
      << "nrows " << r.nrows() << '\n'
      << "xllcorner " << format_number(r.x_origin()) << '\n'
      << "yllcorner " << format_number(r.y_origin()) << '\n'
      << "cellsize " << format_number(r.cell_size()) << '\n';
  if (r.nodata_value()) out << "NODATA_value " << format_number(*r.nodata_value()) << '\n';
  for (std::size_t row = 0; row < r.nrows(); ++row) {
    for (std::size_t col = 0; col < r.ncols(); ++col) {
      if (col) out << ' ';
      out << format_number(r.at(col, row));
    }
    out << '\n';
  }
}

inline void write_ascii_grid(const Raster& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  format_ascii_grid(r, out);
  out.flush();
  if (!out) throw IoError("write failed for " + path);
}

// ---------------------------------------------------------------------------
// Sampling

struct Sample {
  double value = 0.0;
  bool nodata = false;        ///< a no-data cell was among the four neighbours
  bool out_of_bounds = false; ///< the point lay outside the outermost cell centres
};

/// Bilinear interpolation between the four surrounding cell centres. Points
/// beyond the outermost centres are clamped onto the edge. When a neighbour
/// holds no-data, the nearest valid neighbour's value is returned instead and
/// the nodata flag is set.
inline Sample bilinear_sample(const Raster& r, double x, double y) {
  Sample s;
  const double cs = r.cell_size();
  double u = (x - r.x_origin()) / cs - 0.5;   // fractional column
  double v = (r.y_max() - y) / cs - 0.5;      // fractional row, southward
  const double umax = static_cast<double>(r.ncols() - 1), vmax = static_cast<double>(r.nrows() - 1);
  if (u < 0.0 || u > umax || v < 0.0 || v > vmax) s.out_of_bounds = true;
  u = std::clamp(u, 0.0, umax);
  v = std::clamp(v, 0.0, vmax);
  std::size_t c0 = static_cast<std::size_t>(u);
  std::size_t r1 = static_cast<std::size_t>(v);  // northern row of the pair
  if (r.ncols() > 1 && c0 + 1 >= r.ncols()) c0 = r.ncols() - 2;
  if (r.nrows() > 1 && r1 + 1 >= r.nrows()) r1 = r.nrows() - 2;
  const std::size_t c1 = std::min(c0 + 1, r.ncols() - 1);
  const std::size_t r0 = std::min(r1 + 1, r.nrows() - 1);  // southern row
  const double fx = u - static_cast<double>(c0);
  const double fy = static_cast<double>(r0) - v;  // 0 at the southern row
  // v00 south-west, v10 south-east, v01 north-west, v11 north-east.
  const double v00 = r.at(c0, r0), v10 = r.at(c1, r0), v01 = r.at(c0, r1), v11 = r.at(c1, r1);
  if (r.is_nodata(v00) || r.is_nodata(v10) || r.is_nodata(v01) || r.is_nodata(v11)) {
    s.nodata = true;
    const std::array<std::pair<double, double>, 4> cand = {{
        {fx * fx + fy * fy, v00},
        {(1 - fx) * (1 - fx) + fy * fy, v10},
        {fx * fx + (1 - fy) * (1 - fy), v01},
        {(1 - fx) * (1 - fx) + (1 - fy) * (1 - fy), v11},
    }};
    double best = std::numeric_limits<double>::infinity();
    std::optional<double> val;
    for (auto [d, cv] : cand)
      if (!r.is_nodata(cv) && d < best) best = d, val = cv;
    if (!val) {
      // All four missing: nearest valid cell anywhere on the grid.
      const double cu = u, cv = v;
      for (std::size_t row = 0; row < r.nrows(); ++row)
        for (std::size_t col = 0; col < r.ncols(); ++col) {
          if (r.is_nodata(col, row)) continue;
          const double d = (col - cu) * (col - cu) + (row - cv) * (row - cv);
          if (d < best) best = d, val = r.at(col, row);
        }
    }
    s.value = val.value_or(0.0);
    return s;
  }
  // std::lerp is exact at both ends and for equal neighbours.
  s.value = std::lerp(std::lerp(v00, v10, fx), std::lerp(v01, v11, fx), fy);
  return s;
}

// ---------------------------------------------------------------------------
// Terrain derivatives

struct Gradient {
  double dzdx = 0.0;  ///< eastward
  double dzdy = 0.0;  ///< northward
};

/// Central differences on the interior, one-sided differences on the border.
inline Gradient surface_gradient(const Raster& r, std::size_t col, std::size_t row) {
  const double h = r.cell_size();
  const std::size_t cw = col > 0 ? col - 1 : col, ce = col + 1 < r.ncols() ? col + 1 : col;
  const std::size_t rn = row > 0 ? row - 1 : row, rs = row + 1 < r.nrows() ? row + 1 : row;
  Gradient g;
  g.dzdx = (r.at(ce, row) - r.at(cw, row)) / (static_cast<double>(ce - cw) * h);
  g.dzdy = (r.at(col, rn) - r.at(col, rs)) / (static_cast<double>(rs - rn) * h);
  return g;
}

/// Lambertian shading in [0, 1]. Azimuth is the compass bearing of the light
/// source (clockwise from north), altitude its elevation above the horizon.
inline Raster hillshade(const Raster& dem, double azimuth_deg = 315.0, double altitude_deg = 45.0) {
  if (dem.ncols() < 3 || dem.nrows() < 3)
    throw DimensionError("hillshade needs at least a 3x3 raster");
  constexpr double deg = std::numbers::pi / 180.0;
  const double az = azimuth_deg * deg, alt = altitude_deg * deg;
  const double lx = std::sin(az) * std::cos(alt), ly = std::cos(az) * std::cos(alt),
               lz = std::sin(alt);
  Raster out = dem.like();
  out.set_nodata_value(std::nullopt);
  for (std::size_t row = 0; row < dem.nrows(); ++row)
    for (std::size_t col = 0; col < dem.ncols(); ++col) {
      const auto g = surface_gradient(dem, col, row);
      const double norm = std::sqrt(g.dzdx * g.dzdx + g.dzdy * g.dzdy + 1.0);
      const double shade = (-g.dzdx * lx - g.dzdy * ly + lz) / norm;
      out.at(col, row) = std::clamp(shade, 0.0, 1.0);
    }
  return out;
}

}  // namespace avz
