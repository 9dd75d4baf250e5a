#pragma once

// Brute-force reference implementations and helpers shared by the tests.
// Everything here is written as plainly as possible and independently of
// the library kernels.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "avz/model.hpp"
#include "avz/raster.hpp"
#include "avz/tensor.hpp"

namespace oracle {

using avz::Tensor;

template <typename T = double>
Tensor<T> random_tensor(avz::Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.vec()) v = static_cast<T>(u(rng));
  return t;
}

inline double rel_err(double a, double b) {
  const double d = std::abs(a - b);
  const double m = std::max(std::abs(a), std::abs(b));
  return m == 0.0 ? d : d / m;
}

/// Largest elementwise relative error, with an absolute floor below which
/// differences count as zero.
inline double max_rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 0.0) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::abs(a[i] - b[i]) <= floor) continue;
    worst = std::max(worst, rel_err(a[i], b[i]));
  }
  return worst;
}

/// y[o] = b[o] + sum_i W[o][i] x[i], summed in long double.
inline std::vector<double> dense(const std::vector<double>& x, const std::vector<double>& W,
                                 const std::vector<double>& b, std::size_t out, std::size_t in) {
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    long double s = b[o];
    for (std::size_t i = 0; i < in; ++i) s += static_cast<long double>(W[o * in + i]) * x[i];
    y[o] = static_cast<double>(s);
  }
  return y;
}

/// Valid cross-correlation of a C x H x W input with O x C x K x L filters:
/// y[o][i][j] = b[o] + sum_{c,k,l} w[o][c][k][l] x[c][i+k][j+l].
inline std::vector<double> conv(const std::vector<double>& x, std::size_t C, std::size_t H, std::size_t W,
                                const std::vector<double>& w, std::size_t O, std::size_t K, std::size_t L,
                                const std::vector<double>& b) {
  const std::size_t Ho = H - K + 1, Wo = W - L + 1;
  std::vector<double> y(O * Ho * Wo);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        long double s = b[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t l = 0; l < L; ++l)
              s += static_cast<long double>(w[((o * C + c) * K + k) * L + l]) * x[(c * H + i + k) * W + j + l];
        y[(o * Ho + i) * Wo + j] = static_cast<double>(s);
      }
  return y;
}

inline std::vector<double> maxpool(const std::vector<double>& x, std::size_t C, std::size_t H, std::size_t W) {
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<double> y(C * Ho * Wo);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double m = -INFINITY;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) m = std::max(m, x[(c * H + 2 * i + a) * W + 2 * j + b]);
        y[(c * Ho + i) * Wo + j] = m;
      }
  return y;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  long double sum = 0.0L;
  for (double v : z) sum += std::exp(static_cast<long double>(v));
  std::vector<double> p;
  for (double v : z) p.push_back(static_cast<double>(std::exp(static_cast<long double>(v)) / sum));
  return p;
}

inline double cross_entropy(const std::vector<double>& p, std::size_t truth) {
  return -std::log(std::max(p[truth], 1e-12));
}

/// Raster filled by f(x, y) at cell centres.
inline avz::Raster field(std::size_t nc, std::size_t nr, double cell, const std::function<double(double, double)>& f,
                         double x0 = 0.0, double y0 = 0.0) {
  avz::Raster r(nc, nr, x0, y0, cell);
  for (std::size_t row = 0; row < nr; ++row)
    for (std::size_t col = 0; col < nc; ++col) {
      const auto p = r.cell_center(col, row);
      r.at(col, row) = f(p.x, p.y);
    }
  return r;
}

/// Sum of a few random smooth bumps on an nc x nr grid.
inline avz::Raster random_terrain(std::size_t nc, std::size_t nr, double cell, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  struct Bump { double x, y, s, h; };
  std::vector<Bump> bumps;
  const double wx = static_cast<double>(nc) * cell, wy = static_cast<double>(nr) * cell;
  for (int i = 0; i < 6; ++i) bumps.push_back({u(rng) * wx, u(rng) * wy, (0.1 + 0.3 * u(rng)) * wx, 2000.0 * (u(rng) - 0.3)});
  return field(nc, nr, cell, [&](double x, double y) {
    double z = 1500.0;
    for (const auto& b : bumps) z += b.h * std::exp(-((x - b.x) * (x - b.x) + (y - b.y) * (y - b.y)) / (b.s * b.s));
    return z;
  });
}

/// Fresh scratch directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("avz_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace oracle
