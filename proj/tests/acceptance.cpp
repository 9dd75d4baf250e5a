// End-to-end acceptance run: prints one PASS/FAIL line per criterion and
// exits non-zero if any fails.
//
// usage: acceptance [work_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include <boost/math/distributions/chi_squared.hpp>

#include "avz/commands.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace avz;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Report {
  int failures = 0;
  void line(int id, const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS" : "FAIL") << " " << id << " " << name << ": " << detail << std::endl;
    failures += !ok;
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

// ---------------------------------------------------------------------------

void kernel_oracles(Report& rep) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> small(1, 6), k(1, 5), wide(1, 64);
  double worst = 0.0;
  std::size_t n = 0;
  auto note = [&](double e) { worst = std::max(worst, e), ++n; };
  for (int i = 0; i < 100; ++i) {
    const std::size_t in = wide(rng), out = wide(rng);
    auto x = oracle::random_tensor({in}, rng), W = oracle::random_tensor({out, in}, rng),
         b = oracle::random_tensor({out}, rng);
    note(oracle::max_rel_err(dense_affine(x, W, b).vec(), oracle::dense(x.vec(), W.vec(), b.vec(), out, in), 1e-13));
  }
  for (int i = 0; i < 100; ++i) {
    const std::size_t C = small(rng), O = small(rng), K = k(rng), L = k(rng);
    const std::size_t H = K + small(rng) + 2, Wd = L + small(rng) + 2;
    auto x = oracle::random_tensor({C, H, Wd}, rng), w = oracle::random_tensor({O, C, K, L}, rng),
         b = oracle::random_tensor({O}, rng);
    note(oracle::max_rel_err(conv2d_affine(x, w, b).vec(),
                             oracle::conv(x.vec(), C, H, Wd, w.vec(), O, K, L, b.vec()), 1e-13));
  }
  for (int i = 0; i < 100; ++i) {
    const std::size_t C = small(rng), H = 2 * small(rng) + (i % 2), Wd = 2 * small(rng) + 1 - (i % 2);
    auto x = oracle::random_tensor({C, H, Wd}, rng);
    note(oracle::max_rel_err(maxpool2(x).vec(), oracle::maxpool(x.vec(), C, H, Wd)));
  }
  for (int i = 0; i < 100; ++i) {
    auto z = oracle::random_tensor({3}, rng, -20.0, 20.0);
    const auto p = softmax(z);
    note(oracle::max_rel_err(p.vec(), oracle::softmax(z.vec())));
    const std::size_t c = static_cast<std::size_t>(i % 3);
    note(oracle::rel_err(cross_entropy(p, one_hot<double>(c)), oracle::cross_entropy(p.vec(), c)));
  }
  const double secs = seconds_since(t0);
  rep.line(1, "kernel oracles", n >= 500 && worst <= 1e-9 && secs < 60.0,
           std::to_string(n) + " instances, worst relative error " + fmt(worst) + ", " + fmt(secs, 3) + " s");
}

void gradient_checks(Report& rep) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  gradcheck::Worst worst;
  auto keep = [&](const gradcheck::Worst& w, const std::string& what) {
    worst.checked += w.checked;
    if (w.rel >= worst.rel) worst.rel = w.rel, worst.where = what + " " + w.where;
  };
  {
    ParameterSet<double> ps;
    ps.add("x", oracle::random_tensor({9, 4}, rng));
    ps.add("W", oracle::random_tensor({5, 9}, rng));
    ps.add("b", oracle::random_tensor({5}, rng));
    keep(gradcheck::check(ps, [](Tape<double>& t) {
      return gradcheck::project(ops::relu(ops::dense(t.parameter(0), t.parameter(1), t.parameter(2))), 1);
    }, 40, rng), "dense");
  }
  {
    ParameterSet<double> ps;
    ps.add("x", oracle::random_tensor({2, 8, 7, 3}, rng));
    ps.add("w", oracle::random_tensor({3, 2, 3, 3}, rng));
    ps.add("b", oracle::random_tensor({3}, rng));
    keep(gradcheck::check(ps, [](Tape<double>& t) {
      return gradcheck::project(ops::maxpool2(ops::conv2d(t.parameter(0), t.parameter(1), t.parameter(2))), 2);
    }, 40, rng), "conv+pool");
  }
  {
    ParameterSet<double> ps;
    ps.add("x", oracle::random_tensor({12, 2}, rng));
    keep(gradcheck::check(ps, [](Tape<double>& t) {
      std::mt19937_64 mask(3);
      return gradcheck::project(ops::dropout(ops::sigmoid(t.parameter(0)), 0.5, Mode::train, mask), 3);
    }, 40, rng), "dropout");
  }
  for (auto readout : {Readout::concat, Readout::average}) {
    ModelConfig cfg;
    cfg.readout = readout;
    auto m = init_model<double>(cfg, 204);
    // Nonzero biases keep pre-activations off the relu kink at 0.
    std::uniform_real_distribution<double> bias(0.02, 0.2);
    for (std::size_t i = 0; i < m.params.size(); ++i)
      if (m.params.name(i).ends_with(".b"))
        for (auto& v : m.params[i].vec()) v = bias(rng);
    ViewportStack s;
    const auto& g = cfg.geometry;
    s.terrain = oracle::random_tensor({g.n_viewports, g.radial_px(), g.tangential_px()}, rng, -0.5, 0.5);
    s.snow = oracle::random_tensor({g.n_viewports, g.snow_radial_px(), g.snow_tangential_px()}, rng, 0.0, 1.0);
    keep(gradcheck::check(m.params, [&](Tape<double>& t) {
      std::mt19937_64 mask(5);
      return ops::cross_entropy(model_probabilities(t, cfg, s, Mode::train, mask), one_hot<double>(2));
    }, 5, rng, 1e-6, 1e-8), readout == Readout::concat ? "model/concat" : "model/average");
  }
  const double secs = seconds_since(t0);
  rep.line(2, "gradient checks", worst.rel <= 1e-3 && secs < 300.0,
           std::to_string(worst.checked) + " entries, worst relative error " + fmt(worst.rel) + " at " +
               worst.where + ", " + fmt(secs, 3) + " s");
}

void rotation(Report& rep) {
  const ViewportGeometry g;
  std::mt19937_64 rng(303);
  ModelConfig avg;
  avg.readout = Readout::average;
  const auto model = init_model<double>(avg, 304);
  std::size_t mismatches = 0, compared = 0;
  double worst = 0.0;
  std::uniform_real_distribution<double> u(4000.0, 8000.0), off(0.0, 2.0 * std::numbers::pi);
  for (int i = 0; i < 20; ++i) {
    const Raster t = oracle::random_terrain(300, 300, 40.0, rng);
    Raster sn = oracle::random_terrain(300, 300, 40.0, rng);
    for (auto& v : sn.values()) v = std::max(0.0, v / 1000.0);
    const Point c{u(rng), u(rng)};
    const double base = off(rng);
    const bool flip = i % 2;
    const auto ref = extract_viewports(t, sn, c, g, base, flip);
    const auto pref = model_forward(model, ref);
    for (std::size_t k = 1; k < 16; ++k) {
      const auto rot = extract_viewports(t, sn, c, g, base + static_cast<double>(k) * g.angular_step(), flip);
      const auto shifted = cyclic_shift(ref, k);
      ++compared;
      mismatches += !(rot.terrain == shifted.terrain && rot.snow == shifted.snow);
      const auto p = model_forward(model, rot);
      for (std::size_t q = 0; q < 3; ++q) worst = std::max(worst, std::abs(p.p[q] - pref.p[q]));
    }
  }
  rep.line(3, "rotation invariance", mismatches == 0 && worst <= 1e-9,
           std::to_string(compared - mismatches) + "/" + std::to_string(compared) +
               " rotated stacks bit-identical to cyclic shifts, average-readout deviation " + fmt(worst));
}

void guessing_baseline(Report& rep, const std::vector<Region>& regions, const ModelConfig& mc) {
  ClassPools pools;
  for (std::size_t i = 0; i < regions.size(); ++i) merge_pools(pools, extract_labels(regions[i], i, mc.geometry, 4));
  std::mt19937_64 rng(404);
  const auto points = balanced_minibatch(pools, 3000, rng);
  const auto model = init_model<float>(mc, 405);
  std::vector<Probabilities> p;
  std::vector<HazardClass> y;
  for (const auto& pt : points) {
    const auto& r = regions[pt.region];
    p.push_back(model_forward(model, extract_viewports(r.terrain, r.snow, pt.where, mc.geometry)).p);
    y.push_back(pt.label);
  }
  const double t1 = top_k_accuracy(p, y, 1), t2 = top_k_accuracy(p, y, 2);
  rep.line(4, "guessing baseline", std::abs(t1 - 1.0 / 3) <= 0.05 && std::abs(t2 - 2.0 / 3) <= 0.05,
           "randomly initialised model on 3000 balanced samples: top1 " + fmt(t1) + ", top2 " + fmt(t2));
}

void sampler(Report& rep, const std::vector<Region>& regions, const ViewportGeometry& g) {
  ClassPools pools;
  for (std::size_t i = 0; i < regions.size(); ++i)
    if (!regions[i].validation) merge_pools(pools, extract_labels(regions[i], i, g, 8));
  std::mt19937_64 rng(505);
  std::array<std::vector<double>, 3> hits;
  for (std::size_t c = 0; c < 3; ++c) hits[c].assign(pools[c].size(), 0.0);
  std::array<std::map<std::pair<double, double>, std::size_t>, 3> index;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < pools[c].size(); ++i)
      index[c][{pools[c][i].where.x + 1e6 * static_cast<double>(pools[c][i].region), pools[c][i].where.y}] = i;
  bool exact = true;
  const int batches = 10000;
  for (int b = 0; b < batches; ++b) {
    std::array<int, 3> n{};
    for (const auto& p : balanced_minibatch(pools, 30, rng)) {
      const std::size_t c = index_of(p.label);
      n[c] += 1;
      hits[c][index[c].at({p.where.x + 1e6 * static_cast<double>(p.region), p.where.y})] += 1.0;
    }
    exact = exact && n == std::array<int, 3>{10, 10, 10};
  }
  double worst_p = 1.0;
  for (std::size_t c = 0; c < 3; ++c) {
    // Bins of equal expected size keep the chi-square approximation valid.
    const std::size_t bins = std::min<std::size_t>(pools[c].size(), 50);
    std::vector<double> obs(bins, 0.0), exp(bins, 0.0);
    for (std::size_t i = 0; i < pools[c].size(); ++i) {
      const std::size_t bin = i * bins / pools[c].size();
      obs[bin] += hits[c][i];
      exp[bin] += 10.0 * batches / static_cast<double>(pools[c].size());
    }
    double x = 0.0;
    for (std::size_t i = 0; i < bins; ++i) x += (obs[i] - exp[i]) * (obs[i] - exp[i]) / exp[i];
    const boost::math::chi_squared dist(static_cast<double>(bins - 1));
    worst_p = std::min(worst_p, boost::math::cdf(boost::math::complement(dist, x)));
  }
  rep.line(5, "balanced sampler", exact && worst_p > 0.001,
           std::string(exact ? "every" : "not every") + " batch of 30 holds 10/10/10; smallest within-class " +
               "chi-square p over " + std::to_string(batches) + " batches " + fmt(worst_p));
}

void parameters(Report& rep) {
  const auto s = parameter_summary(init_model<float>(ModelConfig{}, 1).params);
  rep.line(7, "parameter budget", s.total >= 200000 && s.total <= 800000 && 2 * s.dense > s.total,
           std::to_string(s.total) + " parameters, " + std::to_string(s.dense) + " in dense layers");
}

void savitzky(Report& rep) {
  double worst = 0.0;
  std::mt19937_64 rng(909);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (std::size_t order = 0; order <= 4; ++order)
    for (std::size_t window = 2 * order + 1 + (order == 0 ? 2 : 0); window <= 15; window += 2) {
      std::vector<double> coef(order + 1);
      for (auto& c : coef) c = u(rng);
      std::vector<double> s(80);
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double x = 0.05 * static_cast<double>(i);
        double y = 0.0;
        for (std::size_t p = 0; p <= order; ++p) y += coef[p] * std::pow(x, static_cast<double>(p));
        s[i] = y;
      }
      const auto out = savitzky_golay(s, window, order);
      for (std::size_t i = window / 2; i + window / 2 < s.size(); ++i)
        worst = std::max(worst, std::abs(out[i] - s[i]) / std::max(1.0, std::abs(s[i])));
    }
  rep.line(9, "Savitzky-Golay polynomial reproduction", worst <= 1e-9,
           "worst interior deviation " + fmt(worst) + " over orders 0-4 and windows up to 15");
}

// ---------------------------------------------------------------------------

struct EndToEnd {
  TrainResult<float> result;
  double seconds = 0.0;
};

void end_to_end(Report& rep, const std::vector<Region>& regions, const RunConfig& cfg, const std::string& dir) {
  const auto t0 = Clock::now();
  TrainOptions opts;
  opts.out_dir = dir + "/run";
  opts.progress = [t0](const std::string& l) { std::cout << "  [" << fmt(seconds_since(t0), 4) << " s] " << l << std::endl; };
  const auto res = train<float>(regions, cfg.model, cfg.train, opts);
  const double train_secs = seconds_since(t0);

  const Region* held = nullptr;
  for (const auto& r : regions)
    if (r.validation) held = &r;
  const auto e = evaluate_map(res.last.model, held->terrain, held->snow, held->hazard, 2);
  std::ofstream(dir + "/heldout_eval.txt") << format_report(e);

  const auto val = res.log.split("val");
  bool dominated = true;
  for (const auto& r : res.log.records()) dominated = dominated && r.top2 >= r.top1;
  const double loss0 = val.front().loss;
  const bool ok = e.balanced_top1 >= 0.70 && e.balanced_top2 >= 0.90 && res.last.step <= 3000 &&
                  train_secs <= 1800.0 && dominated && std::abs(loss0 - std::log(3.0)) <= 0.2;
  rep.line(6, "end-to-end learning", ok,
           std::to_string(regions.size()) + " regions of " + std::to_string(held->terrain.ncols()) + "x" +
               std::to_string(held->terrain.nrows()) + ", held out " + held->id + " (" + std::to_string(e.count) +
               " cells, stride 2): balanced top1 " + fmt(e.balanced_top1) + ", balanced top2 " +
               fmt(e.balanced_top2) + " after " + std::to_string(res.last.step) + " steps of batch " +
               std::to_string(cfg.train.batch_size) + " in " + fmt(train_secs / 60.0, 3) + " min; step-0 loss " +
               fmt(loss0) + "; top2 >= top1 at every logged step: " + (dominated ? "yes" : "no"));

  // Reproducibility on a short run and the trained model.
  auto short_cfg = cfg.train;
  short_cfg.max_steps = 12;
  short_cfg.eval_interval = 6;
  short_cfg.eval_samples = 30;
  const auto a = train<float>(regions, cfg.model, short_cfg).log.to_csv();
  const auto b = train<float>(regions, cfg.model, short_cfg).log.to_csv();
  const auto p1 = predict_map(model_predictor(res.last.model), held->terrain, held->snow, cfg.model.geometry, 16, 1);
  const auto p8 = predict_map(model_predictor(res.last.model), held->terrain, held->snow, cfg.model.geometry, 16, 8);
  bool same = p1.classes.values() == p8.classes.values();
  for (std::size_t k = 0; k < 3; ++k) same = same && p1.probability[k].values() == p8.probability[k].values();
  rep.line(8, "reproducibility", a == b && same,
           std::string("metrics log ") + (a == b ? "bit-identical" : "differs") + " across two seeded runs; " +
               std::to_string(p1.classes.size()) + "-cell prediction " + (same ? "identical" : "differs") +
               " for 1 and 8 workers");
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::string dir = argc > 1 ? argv[1] : "acceptance_run";
  std::filesystem::create_directories(dir);
  Report rep;

  kernel_oracles(rep);
  gradient_checks(rep);
  rotation(rep);

  RunConfig cfg;
  cfg.seed = 1;
  cfg.regions = 4;
  cfg.validation_fraction = 0.25;
  cfg.train.batch_size = 15;
  cfg.train.max_steps = 3000;
  cfg.resolve();
  const auto t0 = Clock::now();
  const auto ds = gen_dataset(cfg.synth, cfg.regions, cfg.validation_fraction, 1);
  write_dataset(ds, dir + "/data");
  std::cout << "  generated " << ds.regions.size() << " regions in " << fmt(seconds_since(t0), 3) << " s" << std::endl;
  for (const auto& r : ds.regions) {
    const auto h = class_histogram(r.hazard);
    std::cout << "  " << r.id << (r.validation ? " (held out)" : "") << " green " << fmt(100 * h.share(HazardClass::Green), 3)
              << "% yellow " << fmt(100 * h.share(HazardClass::Yellow), 3) << "% red "
              << fmt(100 * h.share(HazardClass::Red), 3) << "%" << std::endl;
  }

  guessing_baseline(rep, ds.regions, cfg.model);
  sampler(rep, ds.regions, cfg.model.geometry);
  parameters(rep);
  savitzky(rep);
  end_to_end(rep, ds.regions, cfg, dir);

  std::cout << (rep.failures ? "FAILED " : "ALL PASSED ") << rep.failures << " failing criteria" << std::endl;
  return rep.failures ? 1 : 0;
}
