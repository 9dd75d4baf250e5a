#pragma once

// Balanced sampling, augmentation, the optimisation loop, metrics and map
// evaluation.
//
// Randomness in train() is derived from (seed, step, stream), never from a
// long-lived generator, so a run resumed from a checkpoint draws exactly what
// the uninterrupted run would have drawn.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "avz/checkpoint.hpp"
#include "avz/errors.hpp"
#include "avz/model.hpp"
#include "avz/optim.hpp"
#include "avz/parallel.hpp"
#include "avz/raster.hpp"
#include "avz/viewport.hpp"

namespace avz {

/// Keeps freed tensor memory inside the process. Training allocates and
/// frees megabyte-sized activations for every sample; returning them to the
/// kernel each time costs page faults on every reuse.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

// ---------------------------------------------------------------------------
// Data

struct LabeledPoint {
  Point where;
  HazardClass label = HazardClass::Green;
  std::size_t region = 0;
  friend bool operator==(const LabeledPoint&, const LabeledPoint&) = default;
};

/// One map area with aligned terrain, snow and hazard rasters.
struct Region {
  std::string id;
  Raster terrain;
  Raster snow;
  Raster hazard;
  bool validation = false;
};

using ClassPools = std::array<std::vector<LabeledPoint>, kNumClasses>;

inline bool has_nodata(const Raster& r) {
  if (!r.nodata_value()) return false;
  for (double v : r.values())
    if (r.is_nodata(v)) return true;
  return false;
}

/// Hazard class stored in a label raster cell, or nullopt for no-data and
/// values that are not a class index.
inline std::optional<HazardClass> label_at(const Raster& hazard, std::size_t col, std::size_t row) {
  const double v = hazard.at(col, row);
  if (hazard.is_nodata(v)) return std::nullopt;
  if (v == 0.0 || v == 1.0 || v == 2.0) return hazard_from_index(static_cast<std::size_t>(v));
  return std::nullopt;
}

/// Every labelled cell centre of the region (every `stride`-th row and
/// column), grouped by class. Cells whose viewports touch no-data are
/// skipped; extraction is only attempted when a no-data cell exists.
inline ClassPools extract_labels(const Region& region, std::size_t region_index,
                                 const ViewportGeometry& g, std::size_t stride = 1) {
  require_same_grid(region.terrain, region.hazard, "hazard raster of region " + region.id);
  if (stride == 0) throw ConfigError("label stride must be positive");
  const bool check = has_nodata(region.terrain) || has_nodata(region.snow);
  ClassPools pools;
  for (std::size_t row = 0; row < region.hazard.nrows(); row += stride)
    for (std::size_t col = 0; col < region.hazard.ncols(); col += stride) {
      const auto cls = label_at(region.hazard, col, row);
      if (!cls) continue;
      const Point p = region.hazard.cell_center(col, row);
      if (check && extract_viewports(region.terrain, region.snow, p, g).sampled_nodata) continue;
      pools[index_of(*cls)].push_back({p, *cls, region_index});
    }
  return pools;
}

inline void merge_pools(ClassPools& into, const ClassPools& from) {
  for (std::size_t c = 0; c < kNumClasses; ++c) into[c].insert(into[c].end(), from[c].begin(), from[c].end());
}

// ---------------------------------------------------------------------------
// Sampling and augmentation

inline void check_batch_size(std::size_t batch_size) {
  if (batch_size == 0 || batch_size % kNumClasses != 0)
    throw ConfigError("batch size must be a positive multiple of 3, got " + std::to_string(batch_size));
}

/// batch_size / 3 points of each class, drawn uniformly with replacement
/// within the class. The batch lists green, then yellow, then red points.
template <typename Rng>
std::vector<LabeledPoint> balanced_minibatch(const ClassPools& pools, std::size_t batch_size, Rng& rng) {
  check_batch_size(batch_size);
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (pools[c].empty())
      throw DataError(std::string("no labelled points of class ") + to_string(hazard_from_index(c)));
  std::vector<LabeledPoint> batch;
  batch.reserve(batch_size);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::uniform_int_distribution<std::size_t> pick(0, pools[c].size() - 1);
    for (std::size_t i = 0; i < batch_size / kNumClasses; ++i) batch.push_back(pools[c][pick(rng)]);
  }
  return batch;
}

struct Augmentation {
  double rotation_offset = 0.0;
  bool flipped = false;
};

/// Offset uniform in [0, 2 pi), flip by a fair coin; (0, false) when disabled.
template <typename Rng>
Augmentation augment_params(Rng& rng, bool enabled = true) {
  if (!enabled) return {};
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::uniform_real_distribution<double> angle(0.0, two_pi);
  std::bernoulli_distribution coin(0.5);
  Augmentation a;
  a.rotation_offset = angle(rng);
  if (a.rotation_offset >= two_pi) a.rotation_offset = 0.0;
  a.flipped = coin(rng);
  return a;
}

/// Generator for one (step, stream) pair of a run.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::int64_t step, std::uint64_t stream) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Metrics

using Probabilities = std::array<double, kNumClasses>;

/// Class indices ordered by decreasing probability; ties keep the lower index first.
inline std::array<std::size_t, kNumClasses> class_ranking(const Probabilities& p) {
  std::array<std::size_t, kNumClasses> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  return order;
}

/// True when fewer than k classes are strictly more probable than the truth,
/// so tied classes share a rank.
inline bool in_top_k(const Probabilities& p, HazardClass truth, std::size_t k) {
  const double pt = p[index_of(truth)];
  std::size_t above = 0;
  for (double q : p) above += q > pt;
  return above < k;
}

/// Fraction of samples whose true class is among the k most probable classes.
inline double top_k_accuracy(const std::vector<Probabilities>& predictions,
                             const std::vector<HazardClass>& labels, std::size_t k) {
  if (predictions.size() != labels.size())
    throw std::invalid_argument("top_k_accuracy: " + std::to_string(predictions.size()) +
                                " predictions for " + std::to_string(labels.size()) + " labels");
  if (k < 1 || k > kNumClasses) throw std::invalid_argument("top_k_accuracy: k must be 1, 2 or 3");
  if (predictions.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += in_top_k(predictions[i], labels[i], k);
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Least-squares polynomial smoothing. The series is extended by mirroring
/// about its end points (x[-i] = x[i]) and filtered with the central
/// coefficients everywhere.
inline std::vector<double> savitzky_golay_coefficients(std::size_t window, std::size_t order) {
  if (window == 0 || window % 2 == 0) throw ConfigError("Savitzky-Golay window must be odd and positive");
  if (order >= window) throw ConfigError("Savitzky-Golay order must be below the window length");
  const std::size_t n = order + 1;
  const long h = static_cast<long>(window / 2);
  // Normal equations (A^T A) a = A^T e_j for the fitted value at 0 reduce to
  // solving M c = e_0 with M = A^T A, then coefficient j = sum_p c_p z_j^p.
  std::vector<double> M(n * n, 0.0);
  for (long z = -h; z <= h; ++z)
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = 0; q < n; ++q)
        M[p * n + q] += std::pow(static_cast<double>(z), static_cast<double>(p + q));
  std::vector<double> c(n, 0.0);
  c[0] = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(M[r * n + col]) > std::abs(M[piv * n + col])) piv = r;
    if (piv != col) {
      for (std::size_t q = 0; q < n; ++q) std::swap(M[col * n + q], M[piv * n + q]);
      std::swap(c[col], c[piv]);
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = M[r * n + col] / M[col * n + col];
      for (std::size_t q = col; q < n; ++q) M[r * n + q] -= f * M[col * n + q];
      c[r] -= f * c[col];
    }
  }
  for (std::size_t p = 0; p < n; ++p) c[p] /= M[p * n + p];
  std::vector<double> coef(window);
  for (long z = -h; z <= h; ++z) {
    double s = 0.0;
    for (std::size_t p = 0; p < n; ++p) s += c[p] * std::pow(static_cast<double>(z), static_cast<double>(p));
    coef[static_cast<std::size_t>(z + h)] = s;
  }
  return coef;
}

inline std::vector<double> savitzky_golay(const std::vector<double>& series, std::size_t window,
                                          std::size_t order) {
  const auto coef = savitzky_golay_coefficients(window, order);
  if (series.size() < window)
    throw ConfigError("series of length " + std::to_string(series.size()) + " is shorter than the window");
  const long n = static_cast<long>(series.size()), h = static_cast<long>(window / 2);
  auto at = [&](long i) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
    return series[static_cast<std::size_t>(i)];
  };
  std::vector<double> out(series.size());
  for (long i = 0; i < n; ++i) {
    double s = 0.0;
    for (long z = -h; z <= h; ++z) s += coef[static_cast<std::size_t>(z + h)] * at(i + z);
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

struct MetricsRecord {
  std::int64_t step = 0;
  std::string split;  ///< "train" or "val"
  double lr = 0.0;
  double loss = 0.0;
  double top1 = 0.0;
  double top2 = 0.0;
  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

class MetricsLog {
 public:
  static constexpr const char* kHeader = "step,split,lr,loss,top1,top2";

  void add(MetricsRecord r) {
    if (!records_.empty() && r.step < records_.back().step)
      throw std::invalid_argument("metrics steps must not decrease");
    if (r.top2 < r.top1) throw std::invalid_argument("top-2 accuracy below top-1");
    records_.push_back(std::move(r));
  }
  const std::vector<MetricsRecord>& records() const noexcept { return records_; }
  std::vector<MetricsRecord> split(const std::string& name) const {
    std::vector<MetricsRecord> out;
    for (const auto& r : records_)
      if (r.split == name) out.push_back(r);
    return out;
  }
  /// Drops training rows at or after `step` and validation rows after it.
  void truncate(std::int64_t step) {
    std::erase_if(records_, [&](const MetricsRecord& r) {
      return r.split == "val" ? r.step > step : r.step >= step;
    });
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << kHeader << '\n';
    for (const auto& r : records_)
      out << r.step << ',' << r.split << ',' << format_number(r.lr) << ',' << format_number(r.loss) << ','
          << format_number(r.top1) << ',' << format_number(r.top2) << '\n';
    return out.str();
  }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write metrics file " + path);
    out << to_csv();
    if (!out) throw IoError("failed writing metrics file " + path);
  }

  static MetricsLog read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metrics file " + path);
    std::string line;
    std::getline(in, line);
    if (line != kHeader) throw ParseError("metrics file " + path + " has an unexpected header", 1);
    MetricsLog log;
    std::size_t n = 1;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
      if (f.size() != 6) throw ParseError("metrics row needs 6 fields", n);
      MetricsRecord r;
      r.step = std::stoll(f[0]);
      r.split = f[1];
      r.lr = detail::parse_double(f[2], n, "lr");
      r.loss = detail::parse_double(f[3], n, "loss");
      r.top1 = detail::parse_double(f[4], n, "top1");
      r.top2 = detail::parse_double(f[5], n, "top2");
      log.add(std::move(r));
    }
    return log;
  }

 private:
  std::vector<MetricsRecord> records_;
};

// ---------------------------------------------------------------------------
// Parallel prediction

/// Maps a viewport stack to class probabilities.
using Predictor = std::function<HazardPrediction(const ViewportStack&)>;

template <typename T>
Predictor model_predictor(const Model<T>& model) {
  return [&model](const ViewportStack& s) { return model_forward(model, s); };
}

/// Predictions at the given points (no augmentation, evaluation mode).
inline std::vector<HazardPrediction> predict_points(const Predictor& predict, const Raster& terrain,
                                                    const Raster& snow, const std::vector<Point>& points,
                                                    const ViewportGeometry& g, std::size_t workers) {
  std::vector<HazardPrediction> out(points.size());
  parallel_for(points.size(), workers,
               [&](std::size_t i) { out[i] = predict(extract_viewports(terrain, snow, points[i], g)); });
  return out;
}

// ---------------------------------------------------------------------------
// Map evaluation

struct MapEvaluation {
  /// confusion[truth][predicted]
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{};
  std::size_t count = 0;
  double top1 = 0.0;
  double top2 = 0.0;
  /// Mean per-class accuracy over the classes present in the reference.
  double balanced_top1 = 0.0;
  double balanced_top2 = 0.0;
  std::array<std::size_t, kNumClasses> class_count{};
  std::array<double, kNumClasses> class_share{};
};

inline MapEvaluation summarize(const std::vector<Probabilities>& preds, const std::vector<HazardClass>& labels) {
  MapEvaluation e;
  e.count = labels.size();
  std::array<std::size_t, kNumClasses> hit1{}, hit2{};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t t = index_of(labels[i]);
    e.confusion[t][class_ranking(preds[i])[0]] += 1;
    e.class_count[t] += 1;
    hit1[t] += in_top_k(preds[i], labels[i], 1);
    hit2[t] += in_top_k(preds[i], labels[i], 2);
  }
  e.top1 = top_k_accuracy(preds, labels, 1);
  e.top2 = top_k_accuracy(preds, labels, 2);
  std::size_t present = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (e.count) e.class_share[c] = static_cast<double>(e.class_count[c]) / static_cast<double>(e.count);
    if (!e.class_count[c]) continue;
    ++present;
    e.balanced_top1 += static_cast<double>(hit1[c]) / static_cast<double>(e.class_count[c]);
    e.balanced_top2 += static_cast<double>(hit2[c]) / static_cast<double>(e.class_count[c]);
  }
  if (present) e.balanced_top1 /= static_cast<double>(present), e.balanced_top2 /= static_cast<double>(present);
  return e;
}

/// Predicts every stride-th labelled cell of `reference` and scores it.
inline MapEvaluation evaluate_map(const Predictor& predict, const Raster& terrain, const Raster& snow,
                                  const Raster& reference, const ViewportGeometry& g, std::size_t stride,
                                  std::size_t workers = 1) {
  require_same_grid(terrain, reference, "reference hazard raster");
  if (stride == 0) throw ConfigError("stride must be positive");
  std::vector<Point> pts;
  std::vector<HazardClass> labels;
  for (std::size_t row = 0; row < reference.nrows(); row += stride)
    for (std::size_t col = 0; col < reference.ncols(); col += stride)
      if (auto c = label_at(reference, col, row)) {
        pts.push_back(reference.cell_center(col, row));
        labels.push_back(*c);
      }
  const auto hp = predict_points(predict, terrain, snow, pts, g, workers);
  std::vector<Probabilities> probs;
  probs.reserve(hp.size());
  for (const auto& h : hp) probs.push_back(h.p);
  return summarize(probs, labels);
}

template <typename T>
MapEvaluation evaluate_map(const Model<T>& model, const Raster& terrain, const Raster& snow,
                           const Raster& reference, std::size_t stride, std::size_t workers = 1) {
  return evaluate_map(model_predictor(model), terrain, snow, reference, model.config.geometry, stride, workers);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t batch_size = 30;
  std::int64_t max_steps = 3000;
  std::int64_t eval_interval = 100;
  std::uint64_t seed = 1;
  OptimizerConfig optimizer;
  bool augment = true;
  /// Region ids held out for validation. Empty: use the regions' own flags.
  std::vector<std::string> validation_regions;
  /// Balanced validation samples per evaluation (multiple of 3).
  std::size_t eval_samples = 300;
  /// Candidate label cells are taken every label_stride rows and columns.
  std::size_t label_stride = 1;
  std::size_t queue_capacity = 4;

  void validate() const {
    check_batch_size(batch_size);
    check_batch_size(eval_samples);
    if (max_steps < 0) throw ConfigError("max_steps must not be negative");
    if (eval_interval <= 0) throw ConfigError("eval_interval must be positive");
    if (label_stride == 0) throw ConfigError("label_stride must be positive");
    optimizer.validate();
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainOptions {
  std::string out_dir;                   ///< checkpoints and metrics; empty writes nothing
  std::string resume_from;               ///< checkpoint to continue from
  std::function<void(const std::string&)> progress;  ///< one line per evaluation
};

template <typename T>
struct TrainResult {
  Checkpoint<T> last;
  MetricsLog log;
  std::int64_t best_step = -1;
};

namespace detail {

struct TrainSample {
  ViewportStack stack;
  HazardClass label;
};

struct TrainBatch {
  std::int64_t step = 0;
  std::vector<TrainSample> samples;
};

inline constexpr std::uint64_t kBatchStream = 0;
inline constexpr std::uint64_t kAugmentStream = 1;
inline constexpr std::uint64_t kValidationStream = 2;
inline constexpr std::uint64_t kInitStream = 3;
inline constexpr std::uint64_t kDropoutStream = 1000;  ///< plus the sample index

inline TrainBatch make_batch(const std::vector<Region>& regions, const ClassPools& pools,
                             const ViewportGeometry& g, const TrainConfig& cfg, std::int64_t step) {
  auto brng = stream_rng(cfg.seed, step, kBatchStream);
  auto arng = stream_rng(cfg.seed, step, kAugmentStream);
  TrainBatch b{step, {}};
  for (const auto& p : balanced_minibatch(pools, cfg.batch_size, brng)) {
    const auto a = augment_params(arng, cfg.augment);
    const auto& r = regions[p.region];
    b.samples.push_back({extract_viewports(r.terrain, r.snow, p.where, g, a.rotation_offset, a.flipped), p.label});
  }
  return b;
}

}  // namespace detail

/// Splits regions into training and validation pools.
inline std::pair<ClassPools, ClassPools> build_pools(const std::vector<Region>& regions, const TrainConfig& cfg,
                                                     const ViewportGeometry& g) {
  for (const auto& id : cfg.validation_regions)
    if (std::none_of(regions.begin(), regions.end(), [&](const Region& r) { return r.id == id; }))
      throw ConfigError("validation region '" + id + "' does not exist");
  ClassPools train, val;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& r = regions[i];
    const bool is_val = cfg.validation_regions.empty()
                            ? r.validation
                            : std::find(cfg.validation_regions.begin(), cfg.validation_regions.end(), r.id) !=
                                  cfg.validation_regions.end();
    merge_pools(is_val ? val : train, extract_labels(r, i, g, cfg.label_stride));
  }
  return {std::move(train), std::move(val)};
}

/// Balanced accuracy and mean loss of `model` on fixed validation points.
template <typename T>
MetricsRecord validate_model(const Model<T>& model, const std::vector<Region>& regions,
                             const std::vector<LabeledPoint>& points, std::int64_t step, double lr) {
  std::vector<Probabilities> probs;
  std::vector<HazardClass> labels;
  double loss = 0.0;
  for (const auto& p : points) {
    const auto& r = regions[p.region];
    const auto h = model_forward(model, extract_viewports(r.terrain, r.snow, p.where, model.config.geometry));
    loss -= std::log(std::max(h.p[index_of(p.label)], kProbabilityFloor));
    probs.push_back(h.p);
    labels.push_back(p.label);
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, points.size()));
  return {step, "val", lr, loss / n, top_k_accuracy(probs, labels, 1), top_k_accuracy(probs, labels, 2)};
}

/// Full training loop: balanced batches, Adam (or SGD) with the decaying
/// learning rate, balanced validation at step 0 and every eval_interval
/// steps, `last.ckpt` at each evaluation and `best.ckpt` at the best
/// validation top-1. Batch extraction runs on a producer thread.
template <typename T>
TrainResult<T> train(const std::vector<Region>& regions, const ModelConfig& model_cfg, const TrainConfig& cfg,
                     const TrainOptions& opts = {}) {
  cfg.validate();
  model_cfg.validate();
  const auto& g = model_cfg.geometry;
  auto [train_pools, val_pools] = build_pools(regions, cfg, g);
  auto vrng = stream_rng(cfg.seed, -1, detail::kValidationStream);
  const auto val_points = balanced_minibatch(val_pools, cfg.eval_samples, vrng);

  TrainResult<T> res;
  auto& ck = res.last;
  if (!opts.resume_from.empty()) {
    ck = load_checkpoint<T>(opts.resume_from);
    if (!(ck.model.config == model_cfg)) throw ConfigError("checkpoint model configuration differs from the run's");
    if (!ck.has_adam && cfg.optimizer.method == OptimizerMethod::adam)
      throw ConfigError("checkpoint has no optimizer state to resume from");
    const std::string metrics = opts.out_dir.empty() ? "" : opts.out_dir + "/metrics.csv";
    if (!metrics.empty() && std::filesystem::exists(metrics)) res.log = MetricsLog::read_csv(metrics);
    res.log.truncate(ck.step);
    res.best_step = ck.meta.value("best_step", std::int64_t{-1});
  } else {
    ck.model = init_model<T>(model_cfg, stream_rng(cfg.seed, -1, detail::kInitStream)());
    ck.adam = AdamState<T>(ck.model.params);
    ck.has_adam = true;
    ck.step = 0;
  }
  ck.optimizer = cfg.optimizer;
  ck.meta["seed"] = cfg.seed;
  ck.meta["batch_size"] = cfg.batch_size;

  auto save = [&](const std::string& name) {
    if (opts.out_dir.empty()) return;
    std::filesystem::create_directories(opts.out_dir);
    ck.meta["best_step"] = res.best_step;
    save_checkpoint(ck, opts.out_dir + "/" + name);
    res.log.write_csv(opts.out_dir + "/metrics.csv");
  };
  auto evaluate = [&](std::int64_t step) {
    const double lr = lr_schedule(step, cfg.optimizer);
    auto rec = validate_model(ck.model, regions, val_points, step, lr);
    res.log.add(rec);
    if (rec.top1 > ck.best_val_top1) {
      ck.best_val_top1 = rec.top1;
      res.best_step = step;
      save("best.ckpt");
    }
    save("last.ckpt");
    if (opts.progress) {
      std::ostringstream s;
      s << "step " << step << " val loss " << std::fixed << std::setprecision(4) << rec.loss << " top1 "
        << rec.top1 << " top2 " << rec.top2;
      opts.progress(s.str());
    }
  };

  if (ck.step == 0 && res.log.split("val").empty()) evaluate(0);

  // Producer: extracts the batches for the remaining steps in order.
  BoundedQueue<detail::TrainBatch> queue(cfg.queue_capacity);
  std::exception_ptr producer_error;
  std::thread producer([&, start = ck.step] {
    try {
      for (std::int64_t s = start; s < cfg.max_steps; ++s)
        if (!queue.push(detail::make_batch(regions, train_pools, g, cfg, s))) return;
    } catch (...) {
      producer_error = std::current_exception();
    }
    queue.close();
  });
  struct Joiner {
    BoundedQueue<detail::TrainBatch>& q;
    std::thread& t;
    ~Joiner() {
      q.close();
      if (t.joinable()) t.join();
    }
  } joiner{queue, producer};

  GradientSet<T> grads(ck.model.params);
  while (ck.step < cfg.max_steps) {
    auto batch = queue.pop();
    if (!batch) break;
    const std::int64_t step = batch->step;
    const double lr = lr_schedule(step, cfg.optimizer);
    grads.zero();
    std::vector<Probabilities> probs;
    std::vector<HazardClass> labels;
    double loss_sum = 0.0;
    const T scale = T(1) / static_cast<T>(batch->samples.size());
    for (std::size_t i = 0; i < batch->samples.size(); ++i) {
      const auto& smp = batch->samples[i];
      auto drng = stream_rng(cfg.seed, step, detail::kDropoutStream + i);
      Tape<T> tape(ck.model.params);
      auto p = model_probabilities(tape, model_cfg, smp.stack, Mode::train, drng);
      auto loss = ops::cross_entropy(p, one_hot<T>(index_of(smp.label)));
      const double lv = static_cast<double>(loss.value()[0]);
      if (!std::isfinite(lv))
        throw TrainingDiverged("loss became non-finite at step " + std::to_string(step) + " (sample " +
                               std::to_string(i) + ", class " + to_string(smp.label) + ", lr " +
                               format_number(lr) + ")");
      loss_sum += lv;
      probs.push_back(to_prediction(p.value()).p);
      labels.push_back(smp.label);
      tape.accumulate(loss, grads, scale);
    }
    if (!grads.all_finite())
      throw TrainingDiverged("non-finite gradient at step " + std::to_string(step));
    if (cfg.optimizer.method == OptimizerMethod::adam)
      adam_step(ck.model.params, grads, ck.adam, step + 1, lr, cfg.optimizer);
    else
      sgd_step(ck.model.params, grads, lr);
    res.log.add({step, "train", lr, loss_sum / static_cast<double>(labels.size()), top_k_accuracy(probs, labels, 1),
                 top_k_accuracy(probs, labels, 2)});
    ck.step = step + 1;
    if (ck.step % cfg.eval_interval == 0 || ck.step == cfg.max_steps) evaluate(ck.step);
  }
  queue.close();
  producer.join();
  if (producer_error) std::rethrow_exception(producer_error);
  return res;
}

}  // namespace avz
