#pragma once

// Synthetic terrain, snow and rule-based hazard labels.
//
// The label oracle follows the angle logic of empirical avalanche runout
// models: release cells are steep, snow-loaded cells; from each, the path of
// steepest descent is followed downhill and every cell on it is rated by the
// sight-line angle back up to its release cell. Steep sight lines mean the
// cell is close under the release zone (red), shallower ones mean a longer
// runout (yellow); below alpha_yellow the avalanche has stopped.
//
// None of this is physically calibrated. It only has to produce labels that
// depend on terrain and snow the way real hazard zones do.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "avz/errors.hpp"
#include "avz/parallel.hpp"
#include "avz/raster.hpp"
#include "avz/training.hpp"

namespace avz {

struct SynthConfig {
  std::uint64_t seed = 1;
  std::size_t grid_size = 257;     ///< cells per side, 2^n + 1
  double cell_size = 40.0;         ///< metres
  double base_elevation = 1000.0;  ///< metres
  double relief = 1500.0;          ///< metres
  double roughness = 0.3;          ///< (0, 1): weight of the fractal component
  double snow_base = 0.2;          ///< metres
  double snow_lapse = 0.6;         ///< metres per 1000 m of elevation
  double snow_noise = 0.3;         ///< metres, amplitude of smooth snow noise
  double release_min_deg = 28.0;
  double release_max_deg = 50.0;
  double snow_threshold = 1.0;     ///< metres
  double alpha_red_deg = 28.0;
  double alpha_yellow_deg = 23.0;

  void validate() const {
    if (grid_size < 3 || ((grid_size - 1) & (grid_size - 2)) != 0)
      throw ConfigError("grid size must be 2^n + 1 (n >= 1), got " + std::to_string(grid_size));
    if (!(cell_size > 0.0)) throw ConfigError("cell size must be positive");
    if (!(relief >= 0.0)) throw ConfigError("relief must not be negative");
    if (!(roughness > 0.0 && roughness < 1.0)) throw ConfigError("roughness must lie in (0, 1)");
    if (!(snow_noise >= 0.0)) throw ConfigError("snow noise must not be negative");
    if (!(release_min_deg < release_max_deg)) throw ConfigError("release slope window must have lo < hi");
    if (!(alpha_red_deg > alpha_yellow_deg)) throw ConfigError("alpha_red must exceed alpha_yellow");
  }
};

namespace detail {

inline std::mt19937_64 synth_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x5ee7u};
  return std::mt19937_64(seq);
}

/// Diamond-square midpoint displacement on an n x n grid (n = 2^k + 1).
/// Displacements start at 1 and shrink by `decay` per level; the result is
/// rescaled to zero mean and unit maximum magnitude.
inline std::vector<double> midpoint_displacement(std::size_t n, double decay, std::mt19937_64& rng) {
  std::vector<double> z(n * n, 0.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto at = [&](std::size_t r, std::size_t c) -> double& { return z[r * n + c]; };
  at(0, 0) = u(rng), at(0, n - 1) = u(rng), at(n - 1, 0) = u(rng), at(n - 1, n - 1) = u(rng);
  double amp = 1.0;
  for (std::size_t step = n - 1; step > 1; step /= 2) {
    const std::size_t h = step / 2;
    for (std::size_t r = h; r < n; r += step)
      for (std::size_t c = h; c < n; c += step)
        at(r, c) = 0.25 * (at(r - h, c - h) + at(r - h, c + h) + at(r + h, c - h) + at(r + h, c + h)) + amp * u(rng);
    for (std::size_t r = 0; r < n; r += h)
      for (std::size_t c = (r / h) % 2 == 0 ? h : 0; c < n; c += step) {
        double s = 0.0;
        int k = 0;
        if (r >= h) s += at(r - h, c), ++k;
        if (r + h < n) s += at(r + h, c), ++k;
        if (c >= h) s += at(r, c - h), ++k;
        if (c + h < n) s += at(r, c + h), ++k;
        at(r, c) = s / k + amp * u(rng);
      }
    amp *= decay;
  }
  double mean = 0.0;
  for (double v : z) mean += v;
  mean /= static_cast<double>(z.size());
  double mx = 0.0;
  for (auto& v : z) mx = std::max(mx, std::abs(v -= mean));
  if (mx > 0.0)
    for (auto& v : z) v /= mx;
  return z;
}

/// Smooth field in [-1, 1]: a few random plane waves.
inline std::vector<double> smooth_field(std::size_t n, std::mt19937_64& rng, double min_cycles, double max_cycles,
                                        int waves) {
  std::uniform_real_distribution<double> ang(0.0, 2.0 * std::numbers::pi), freq(min_cycles, max_cycles);
  std::vector<std::array<double, 4>> w;
  for (int i = 0; i < waves; ++i) {
    const double a = ang(rng), f = freq(rng);
    w.push_back({std::cos(a) * f, std::sin(a) * f, ang(rng), 0.0});
  }
  std::vector<double> z(n * n);
  const double d = static_cast<double>(n - 1);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const double x = static_cast<double>(c) / d, y = static_cast<double>(r) / d;
      double s = 0.0;
      for (const auto& q : w) s += std::sin(2.0 * std::numbers::pi * (q[0] * x + q[1] * y) + q[2]);
      z[r * n + c] = s / waves;
    }
  return z;
}

}  // namespace detail

/// Elevation: base + relief * (ridge/valley sinusoids + roughness * fractal noise).
/// The valley term 2|sin| - 1 carves V-shaped valleys between sharp ridges.
inline Raster gen_terrain(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.grid_size;
  auto ridge_rng = detail::synth_rng(cfg.seed, 1);
  auto noise_rng = detail::synth_rng(cfg.seed, 2);
  std::uniform_real_distribution<double> ang(0.0, std::numbers::pi), phase(0.0, 2.0 * std::numbers::pi),
      f1(1.2, 2.0), f2(2.0, 3.5);
  const double a1 = ang(ridge_rng), p1 = phase(ridge_rng), k1 = f1(ridge_rng);
  const double a2 = ang(ridge_rng), p2 = phase(ridge_rng), k2 = f2(ridge_rng);
  const auto noise = detail::midpoint_displacement(n, 0.55, noise_rng);
  Raster t(n, n, 0.0, 0.0, cfg.cell_size);
  const double d = static_cast<double>(n - 1);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const double x = static_cast<double>(c) / d, y = static_cast<double>(r) / d;
      const double s1 = std::cos(a1) * x + std::sin(a1) * y, s2 = std::cos(a2) * x + std::sin(a2) * y;
      const double valley = 2.0 * std::abs(std::sin(std::numbers::pi * k1 * s1 + p1)) - 1.0;
      const double wave = std::sin(2.0 * std::numbers::pi * k2 * s2 + p2);
      const double shape = 0.35 * valley + 0.15 * wave + cfg.roughness * 0.5 * noise[r * n + c];
      t.at(c, r) = cfg.base_elevation + cfg.relief * shape;
    }
  return t;
}

/// snow = snow_base + snow_lapse * elevation / 1000 + snow_noise * smooth noise, clamped at 0.
inline Raster gen_snow(const SynthConfig& cfg, const Raster& terrain) {
  auto rng = detail::synth_rng(cfg.seed, 3);
  const std::size_t nc = terrain.ncols(), nr = terrain.nrows();
  const std::size_t n = std::max(nc, nr);
  const auto noise = detail::smooth_field(n, rng, 0.5, 2.0, 4);
  Raster s = terrain.like();
  s.set_nodata_value(std::nullopt);
  for (std::size_t r = 0; r < nr; ++r)
    for (std::size_t c = 0; c < nc; ++c) {
      const double v =
          cfg.snow_base + cfg.snow_lapse * terrain.at(c, r) / 1000.0 + cfg.snow_noise * noise[r * n + c];
      s.at(c, r) = std::max(0.0, v);
    }
  return s;
}

/// Slope inclination in degrees from the central-difference gradient.
inline Raster slope_deg(const Raster& terrain) {
  if (terrain.ncols() < 3 || terrain.nrows() < 3) throw DimensionError("slope needs at least a 3x3 raster");
  Raster s = terrain.like();
  for (std::size_t r = 0; r < terrain.nrows(); ++r)
    for (std::size_t c = 0; c < terrain.ncols(); ++c) {
      const auto g = surface_gradient(terrain, c, r);
      s.at(c, r) = std::atan(std::hypot(g.dzdx, g.dzdy)) * 180.0 / std::numbers::pi;
    }
  return s;
}

/// Neighbour offsets (row, col) in tie-break order: row-major over the 3x3
/// block, centre excluded.
inline constexpr std::array<std::array<int, 2>, 8> kNeighbours{
    {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};

/// Next cell on the path of steepest descent from (col, row), or false at a
/// local minimum. Steepness is drop per horizontal metre; among equally
/// steep neighbours the first in kNeighbours order wins.
inline bool steepest_descent_step(const Raster& z, std::size_t& col, std::size_t& row) {
  double best = 0.0;
  int pick = -1;
  const double h = z.cell_size();
  for (int k = 0; k < 8; ++k) {
    const long r = static_cast<long>(row) + kNeighbours[k][0], c = static_cast<long>(col) + kNeighbours[k][1];
    if (r < 0 || c < 0 || r >= static_cast<long>(z.nrows()) || c >= static_cast<long>(z.ncols())) continue;
    const double dist = (kNeighbours[k][0] != 0 && kNeighbours[k][1] != 0) ? h * std::numbers::sqrt2 : h;
    const double drop = (z.at(col, row) - z.at(static_cast<std::size_t>(c), static_cast<std::size_t>(r))) / dist;
    if (drop > best) best = drop, pick = k;
  }
  if (pick < 0) return false;
  row = static_cast<std::size_t>(static_cast<long>(row) + kNeighbours[pick][0]);
  col = static_cast<std::size_t>(static_cast<long>(col) + kNeighbours[pick][1]);
  return true;
}

inline bool on_edge(const Raster& r, std::size_t col, std::size_t row) {
  return col == 0 || row == 0 || col + 1 == r.ncols() || row + 1 == r.nrows();
}

/// Release cells: slope within the window and snow at or above the threshold.
inline std::vector<std::uint8_t> release_mask(const SynthConfig& cfg, const Raster& terrain, const Raster& snow) {
  require_same_grid(terrain, snow, "snow raster");
  const Raster slope = slope_deg(terrain);
  std::vector<std::uint8_t> m(terrain.size(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const double s = slope.values()[i];
    m[i] = s >= cfg.release_min_deg && s <= cfg.release_max_deg && snow.values()[i] >= cfg.snow_threshold;
  }
  return m;
}

/// Hazard classes (0 green, 1 yellow, 2 red) as a raster on the terrain grid.
inline Raster oracle_hazard(const SynthConfig& cfg, const Raster& terrain, const Raster& snow) {
  const auto release = release_mask(cfg, terrain, snow);
  const double tan_red = std::tan(cfg.alpha_red_deg * std::numbers::pi / 180.0);
  const double tan_yellow = std::tan(cfg.alpha_yellow_deg * std::numbers::pi / 180.0);
  const std::size_t nc = terrain.ncols();
  Raster hz = terrain.like(0.0);
  hz.set_nodata_value(std::nullopt);
  auto raise = [&](std::size_t c, std::size_t r, double level) { hz.at(c, r) = std::max(hz.at(c, r), level); };
  for (std::size_t i = 0; i < release.size(); ++i) {
    if (!release[i]) continue;
    const std::size_t c0 = i % nc, r0 = i / nc;
    const Point p0 = terrain.cell_center(c0, r0);
    const double z0 = terrain.at(c0, r0);
    raise(c0, r0, 2.0);
    std::size_t c = c0, r = r0;
    while (!on_edge(terrain, c, r) && steepest_descent_step(terrain, c, r)) {
      const Point p = terrain.cell_center(c, r);
      const double rise = z0 - terrain.at(c, r);
      const double run = std::hypot(p.x - p0.x, p.y - p0.y);
      if (rise >= tan_red * run)
        raise(c, r, 2.0);
      else if (rise >= tan_yellow * run)
        raise(c, r, 1.0);
      else
        break;
    }
  }
  return hz;
}

// ---------------------------------------------------------------------------
// Datasets

struct ClassHistogram {
  std::array<std::size_t, kNumClasses> counts{};
  std::size_t total() const { return counts[0] + counts[1] + counts[2]; }
  double share(HazardClass c) const {
    return total() ? static_cast<double>(counts[index_of(c)]) / static_cast<double>(total()) : 0.0;
  }
};

inline ClassHistogram class_histogram(const Raster& hazard) {
  ClassHistogram h;
  for (std::size_t r = 0; r < hazard.nrows(); ++r)
    for (std::size_t c = 0; c < hazard.ncols(); ++c)
      if (auto cls = label_at(hazard, c, r)) h.counts[index_of(*cls)] += 1;
  return h;
}

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<Region> regions;
};

inline std::string region_id(std::size_t i) { return "region" + std::to_string(i); }

/// Seed of region i under a master seed.
inline std::uint64_t region_seed(std::uint64_t master, std::size_t i) {
  auto rng = detail::synth_rng(master, 100 + i);
  return rng();
}

inline Region generate_region(const SynthConfig& cfg, std::string id) {
  Region r;
  r.id = std::move(id);
  r.terrain = gen_terrain(cfg);
  r.snow = gen_snow(cfg, r.terrain);
  r.hazard = oracle_hazard(cfg, r.terrain, r.snow);
  return r;
}

/// n_regions independent regions; the last round(n * validation_fraction)
/// (at least one when the fraction is positive, at most n - 1) are held out.
inline Dataset gen_dataset(const SynthConfig& cfg, std::size_t n_regions, double validation_fraction,
                           std::size_t workers = 1) {
  cfg.validate();
  if (n_regions < 2) throw ConfigError("a dataset needs at least two regions");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation fraction must lie in [0, 1)");
  std::size_t n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n_regions) * validation_fraction));
  if (validation_fraction > 0.0) n_val = std::clamp<std::size_t>(n_val, 1, n_regions - 1);
  Dataset ds;
  ds.seed = cfg.seed;
  ds.regions.resize(n_regions);
  parallel_for(n_regions, workers, [&](std::size_t i) {
    SynthConfig rc = cfg;
    rc.seed = region_seed(cfg.seed, i);
    ds.regions[i] = generate_region(rc, region_id(i));
    ds.regions[i].validation = i >= n_regions - n_val;
  });
  return ds;
}

inline constexpr const char* kManifestName = "manifest.txt";

/// Writes <dir>/<region>/{terrain,snow,hazard}.asc and <dir>/manifest.txt.
inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream m;
  m << "# synthetic hazard dataset\n";
  m << "seed " << ds.seed << "\n";
  m << "# region split path green yellow red\n";
  for (const auto& r : ds.regions) {
    fs::create_directories(fs::path(dir) / r.id);
    write_ascii_grid(r.terrain, (fs::path(dir) / r.id / "terrain.asc").string());
    write_ascii_grid(r.snow, (fs::path(dir) / r.id / "snow.asc").string());
    write_ascii_grid(r.hazard, (fs::path(dir) / r.id / "hazard.asc").string());
    const auto h = class_histogram(r.hazard);
    m << "region " << r.id << ' ' << (r.validation ? "validation" : "train") << ' ' << r.id << ' '
      << h.counts[0] << ' ' << h.counts[1] << ' ' << h.counts[2] << "\n";
  }
  std::ofstream out(fs::path(dir) / kManifestName);
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << m.str();
  if (!out) throw IoError("failed writing manifest in " + dir);
}

struct ManifestEntry {
  std::string id;
  bool validation = false;
  std::string path;  ///< relative to the dataset directory
  ClassHistogram histogram;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& dir) {
  const std::string path = (std::filesystem::path(dir) / kManifestName).string();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "seed") continue;
    if (kind != "region") throw ParseError("unknown manifest entry '" + kind + "' in " + path, n);
    ManifestEntry e;
    std::string split;
    ls >> e.id >> split >> e.path >> e.histogram.counts[0] >> e.histogram.counts[1] >> e.histogram.counts[2];
    if (!ls || (split != "train" && split != "validation"))
      throw ParseError("malformed region line in " + path, n);
    e.validation = split == "validation";
    out.push_back(std::move(e));
  }
  if (out.empty()) throw DataError("manifest " + path + " lists no regions");
  return out;
}

inline Region load_region(const std::string& region_dir, std::string id, bool validation) {
  namespace fs = std::filesystem;
  Region r;
  r.id = std::move(id);
  r.validation = validation;
  r.terrain = load_ascii_grid((fs::path(region_dir) / "terrain.asc").string());
  r.snow = load_ascii_grid((fs::path(region_dir) / "snow.asc").string());
  const auto hz = fs::path(region_dir) / "hazard.asc";
  if (fs::exists(hz)) r.hazard = load_ascii_grid(hz.string());
  require_same_grid(r.terrain, r.snow, "snow raster of " + r.id);
  return r;
}

inline std::vector<Region> load_dataset(const std::string& dir) {
  std::vector<Region> out;
  for (const auto& e : read_manifest(dir))
    out.push_back(load_region((std::filesystem::path(dir) / e.path).string(), e.id, e.validation));
  return out;
}

}  // namespace avz
