#pragma once

// The work behind each command-line entry point. Every command writes the
// resolved configuration next to its outputs.

#include <array>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "avz/checkpoint.hpp"
#include "avz/config.hpp"
#include "avz/render.hpp"
#include "avz/synth.hpp"
#include "avz/training.hpp"

namespace avz {

inline constexpr const char* kResolvedConfigName = "config.resolved.txt";

// ---------------------------------------------------------------------------
// Map prediction

/// Per-class probability rasters and the argmax class raster on a grid
/// `stride` times coarser than the input. Partial blocks at the right and
/// bottom edges are dropped, so the output is floor(dims / stride).
struct PredictionMap {
  std::array<Raster, kNumClasses> probability;
  Raster classes;
};

/// The coarse grid that predict_map fills: same upper-left corner, cells
/// `stride` times larger.
inline Raster coarse_grid(const Raster& fine, std::size_t stride) {
  if (stride == 0) throw ConfigError("stride must be positive");
  const std::size_t nc = fine.ncols() / stride, nr = fine.nrows() / stride;
  if (nc == 0 || nr == 0) throw ConfigError("stride " + std::to_string(stride) + " exceeds the raster extent");
  const double cs = fine.cell_size() * static_cast<double>(stride);
  return Raster(nc, nr, fine.x_origin(), fine.y_max() - static_cast<double>(nr) * cs, cs);
}

inline PredictionMap predict_map(const Predictor& predict, const Raster& terrain, const Raster& snow,
                                 const ViewportGeometry& g, std::size_t stride, std::size_t workers = 1) {
  require_same_grid(terrain, snow, "snow raster");
  const Raster grid = coarse_grid(terrain, stride);
  std::vector<Point> pts;
  pts.reserve(grid.size());
  for (std::size_t row = 0; row < grid.nrows(); ++row)
    for (std::size_t col = 0; col < grid.ncols(); ++col) pts.push_back(grid.cell_center(col, row));
  const auto hp = predict_points(predict, terrain, snow, pts, g, workers);
  PredictionMap m{{grid.like(), grid.like(), grid.like()}, grid.like()};
  for (std::size_t row = 0, i = 0; row < grid.nrows(); ++row)
    for (std::size_t col = 0; col < grid.ncols(); ++col, ++i) {
      for (std::size_t k = 0; k < kNumClasses; ++k) m.probability[k].at(col, row) = hp[i].p[k];
      m.classes.at(col, row) = static_cast<double>(index_of(hp[i].argmax()));
    }
  return m;
}

/// Hillshade of `terrain` sampled at the centres of `grid` (nearest cell).
inline Raster shade_on(const Raster& terrain, const Raster& grid) {
  const Raster full = hillshade(terrain);
  Raster out = grid.like();
  for (std::size_t row = 0; row < grid.nrows(); ++row)
    for (std::size_t col = 0; col < grid.ncols(); ++col) {
      const Point p = grid.cell_center(col, row);
      const auto fc = static_cast<std::size_t>((p.x - terrain.x_origin()) / terrain.cell_size());
      const auto fr = static_cast<std::size_t>((terrain.y_max() - p.y) / terrain.cell_size());
      out.at(col, row) = full.at(std::min(fc, terrain.ncols() - 1), std::min(fr, terrain.nrows() - 1));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation report

inline std::string format_report(const MapEvaluation& e) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4);
  s << "cells " << e.count << "\n";
  s << "confusion (rows truth, columns predicted)\n";
  s << std::setw(8) << "" << std::setw(10) << "green" << std::setw(10) << "yellow" << std::setw(10) << "red" << "\n";
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    s << std::setw(8) << to_string(hazard_from_index(t));
    for (std::size_t p = 0; p < kNumClasses; ++p) s << std::setw(10) << e.confusion[t][p];
    s << "\n";
  }
  s << "top1 " << e.top1 << "\n";
  s << "top2 " << e.top2 << "\n";
  s << "balanced_top1 " << e.balanced_top1 << "\n";
  s << "balanced_top2 " << e.balanced_top2 << "\n";
  s << std::setprecision(2);
  for (std::size_t c = 0; c < kNumClasses; ++c)
    s << "share_" << to_string(hazard_from_index(c)) << " " << 100.0 * e.class_share[c] << "%\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void prepare_out(const std::string& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  write_config(cfg, join_path(dir, kResolvedConfigName));
}

}  // namespace detail

inline Dataset cmd_synth(const RunConfig& cfg, const std::string& out_dir, std::size_t workers, std::ostream& log) {
  detail::prepare_out(out_dir, cfg);
  auto ds = gen_dataset(cfg.synth, cfg.regions, cfg.validation_fraction, workers);
  write_dataset(ds, out_dir);
  for (const auto& r : ds.regions) {
    const auto h = class_histogram(r.hazard);
    log << r.id << (r.validation ? " validation" : " train") << std::fixed << std::setprecision(2)
        << " green " << 100.0 * h.share(HazardClass::Green) << "% yellow " << 100.0 * h.share(HazardClass::Yellow)
        << "% red " << 100.0 * h.share(HazardClass::Red) << "%\n";
  }
  return ds;
}

inline TrainResult<float> cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
                                    const std::string& resume_from, std::ostream& log) {
  detail::prepare_out(out_dir, cfg);
  const auto regions = load_dataset(data_dir);
  TrainOptions opts;
  opts.out_dir = out_dir;
  opts.resume_from = resume_from;
  opts.progress = [&log](const std::string& line) { log << line << std::endl; };
  auto res = train<float>(regions, cfg.model, cfg.train, opts);
  log << "best validation top1 " << res.last.best_val_top1 << " at step " << res.best_step << "\n";
  return res;
}

/// Writes green/yellow/red probability rasters, the class raster and
/// hazard.png into `out_dir`.
inline PredictionMap cmd_predict(const RunConfig& cfg, const std::string& checkpoint, const std::string& region_dir,
                                 const std::string& out_dir, std::size_t stride, std::size_t workers) {
  const auto ck = load_checkpoint<float>(checkpoint);
  RunConfig resolved = cfg;
  resolved.model = ck.model.config;
  detail::prepare_out(out_dir, resolved);
  const auto region = load_region(region_dir, std::filesystem::path(region_dir).filename().string(), false);
  auto m = predict_map(model_predictor(ck.model), region.terrain, region.snow, ck.model.config.geometry, stride,
                       workers);
  for (std::size_t k = 0; k < kNumClasses; ++k)
    write_ascii_grid(m.probability[k],
                     detail::join_path(out_dir, std::string(to_string(hazard_from_index(k))) + ".asc"));
  write_ascii_grid(m.classes, detail::join_path(out_dir, "class.asc"));
  render_hazard_png(m.classes, shade_on(region.terrain, m.classes), detail::join_path(out_dir, "hazard.png"));
  return m;
}

/// Scores a checkpoint against the region's hazard.asc. With a non-empty
/// out_dir the report is also written to eval.txt.
inline MapEvaluation cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& region_dir,
                              const std::string& out_dir, std::size_t stride, std::size_t workers, std::ostream& log) {
  const auto ck = load_checkpoint<float>(checkpoint);
  const auto region = load_region(region_dir, std::filesystem::path(region_dir).filename().string(), false);
  if (region.hazard.size() == 0) throw DataError("region " + region_dir + " has no hazard.asc to evaluate against");
  const auto e = evaluate_map(ck.model, region.terrain, region.snow, region.hazard, stride, workers);
  const auto report = format_report(e);
  log << report;
  if (!out_dir.empty()) {
    RunConfig resolved = cfg;
    resolved.model = ck.model.config;
    detail::prepare_out(out_dir, resolved);
    std::ofstream(detail::join_path(out_dir, "eval.txt")) << report;
  }
  return e;
}

/// Renders a class raster (default: the region's hazard.asc) over the
/// region's hillshade.
inline void cmd_render(const RunConfig& cfg, const std::string& region_dir, const std::string& labels_path,
                       const std::string& out_dir) {
  const auto terrain = load_ascii_grid(detail::join_path(region_dir, "terrain.asc"));
  const auto labels =
      load_ascii_grid(labels_path.empty() ? detail::join_path(region_dir, "hazard.asc") : labels_path);
  detail::prepare_out(out_dir, cfg);
  const Raster shade = labels.same_grid(terrain) ? hillshade(terrain) : shade_on(terrain, labels);
  render_hazard_png(labels, shade, detail::join_path(out_dir, "hazard.png"));
}

}  // namespace avz
