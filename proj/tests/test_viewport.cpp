#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <numeric>
#include <numbers>
#include <random>
#include <thread>

#include "avz/viewport.hpp"
#include "oracles.hpp"

using namespace avz;

namespace {

constexpr double kStep = 2.0 * std::numbers::pi / 16.0;

/// 12 km square of random smooth terrain and snow, centre at (6000, 6000).
struct Scene {
  Raster terrain, snow;
  Point center{6000.0, 6000.0};
};

Scene random_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Scene s;
  s.terrain = oracle::random_terrain(300, 300, 40.0, rng);
  s.snow = oracle::random_terrain(300, 300, 40.0, rng);
  for (auto& v : s.snow.values()) v = std::max(0.0, v / 1000.0);
  std::uniform_real_distribution<double> u(4000.0, 8000.0);
  s.center = {u(rng), u(rng)};
  return s;
}

}  // namespace

TEST(Geometry, DefaultPatchSizes) {
  const ViewportGeometry g;
  EXPECT_EQ(g.radial_px(), 84u);
  EXPECT_EQ(g.tangential_px(), 52u);
  EXPECT_EQ(g.snow_radial_px(), 10u);
  EXPECT_EQ(g.snow_tangential_px(), 6u);
  EXPECT_DOUBLE_EQ(g.angular_step() * 16.0, 2.0 * std::numbers::pi);
}

TEST(Geometry, NonIntegralPixelCountIsRejected) {
  ViewportGeometry g;
  g.radial_length = 3370.0;
  EXPECT_THROW(g.validate(), ConfigError);
  g = {};
  g.snow_downscale = 100;
  EXPECT_THROW(g.validate(), ConfigError);
}

TEST(SampleCoords, FirstRowStraddlesTheLookAxis) {
  const ViewportGeometry g;
  const auto pts = viewport_sample_coords(g, {0.0, 0.0}, 0, 0.0, false);
  ASSERT_EQ(pts.size(), 84u * 52u);
  EXPECT_DOUBLE_EQ(pts[26].x, 20.0);
  EXPECT_DOUBLE_EQ(pts[26].y, 20.0);
  EXPECT_DOUBLE_EQ(pts[25].x, -20.0);
  EXPECT_DOUBLE_EQ(pts[25].y, 20.0);
  // Last row reaches 3340 m out along +y.
  EXPECT_DOUBLE_EQ(pts[83 * 52 + 26].y, 3340.0);
}

TEST(SampleCoords, MatchesTheGeometryFormula) {
  const ViewportGeometry g;
  const Point c{123.0, -45.0};
  const double off = 0.625 * kStep;  // a whole number of snapping sub-steps
  for (std::size_t i = 0; i < 16; i += 5) {
    const double th = off + static_cast<double>(i) * kStep;
    const auto pts = viewport_sample_coords(g, c, i, off, false);
    const Point u{std::sin(th), std::cos(th)}, v{std::cos(th), -std::sin(th)};
    for (std::size_t r = 0; r < 84; r += 13)
      for (std::size_t t = 0; t < 52; t += 7) {
        const double a = (static_cast<double>(r) + 0.5) * 40.0, b = (static_cast<double>(t) - 25.5) * 40.0;
        EXPECT_NEAR(pts[r * 52 + t].x, c.x + a * u.x + b * v.x, 1e-9);
        EXPECT_NEAR(pts[r * 52 + t].y, c.y + a * u.y + b * v.y, 1e-9);
      }
  }
}

TEST(SampleCoords, OneStepOffsetIsTheNextViewportExactly) {
  const ViewportGeometry g;
  const Point c{500.5, 1234.25};
  for (std::size_t i = 0; i < 16; ++i)
    EXPECT_EQ(viewport_sample_coords(g, c, i, kStep, false), viewport_sample_coords(g, c, (i + 1) % 16, 0.0, false))
        << "viewport " << i;
}

TEST(SampleCoords, FlipMirrorsColumnsAlongTheNorthAxis) {
  const ViewportGeometry g;
  for (std::size_t i : {0u, 8u}) {
    const auto a = viewport_sample_coords(g, {0.0, 0.0}, i, 0.0, false);
    const auto b = viewport_sample_coords(g, {0.0, 0.0}, i, 0.0, true);
    for (std::size_t r = 0; r < 84; ++r)
      for (std::size_t t = 0; t < 52; ++t) {
        EXPECT_DOUBLE_EQ(b[r * 52 + t].x, a[r * 52 + 51 - t].x);
        EXPECT_DOUBLE_EQ(b[r * 52 + t].y, a[r * 52 + 51 - t].y);
      }
  }
}

TEST(SampleCoords, FlipMirrorsEveryViewportAcrossTheNorthAxis) {
  const ViewportGeometry g;
  for (std::size_t i = 0; i < 16; ++i) {
    const auto a = viewport_sample_coords(g, {0.0, 0.0}, i, 0.2, false);
    const auto b = viewport_sample_coords(g, {0.0, 0.0}, i, 0.2, true);
    for (std::size_t k = 0; k < a.size(); k += 97) {
      EXPECT_NEAR(b[k].x, -a[k].x, 1e-9);
      EXPECT_NEAR(b[k].y, a[k].y, 1e-9);
    }
  }
}

TEST(SampleCoords, IndexOutOfRangeThrows) {
  EXPECT_THROW(viewport_sample_coords(ViewportGeometry{}, {0, 0}, 16, 0.0, false), std::out_of_range);
}

TEST(Extract, ShapesAndFlags) {
  const auto s = random_scene(1);
  const auto st = extract_viewports(s.terrain, s.snow, s.center, ViewportGeometry{}, 0.4, true);
  EXPECT_EQ(st.terrain.shape(), (Shape{16, 84, 52}));
  EXPECT_EQ(st.snow.shape(), (Shape{16, 10, 6}));
  EXPECT_TRUE(st.terrain.all_finite());
  EXPECT_TRUE(st.snow.all_finite());
  EXPECT_FALSE(st.sampled_nodata);
  EXPECT_EQ(st.out_of_bounds, 0u);
  EXPECT_TRUE(st.flipped);
  EXPECT_EQ(st.rotation_offset, 0.4);
}

TEST(Extract, ConstantTerrainNormalisesToZero) {
  const Raster t(200, 200, 0, 0, 40.0, 2345.0);
  const Raster sn(200, 200, 0, 0, 40.0, 2.5);
  const auto st = extract_viewports(t, sn, {4000.0, 4000.0}, ViewportGeometry{}, 1.0, false);
  for (double v : st.terrain.vec()) EXPECT_EQ(v, 0.0);
  for (double v : st.snow.vec()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Extract, PlanarTerrainMatchesThePlane) {
  const double a = 0.3, b = -0.2;
  auto plane = [&](double x, double y) { return a * x + b * y; };
  const Raster t = oracle::field(300, 300, 40.0, plane);
  const Raster sn(300, 300, 0, 0, 40.0, 1.0);
  const ViewportGeometry g;
  const Point c{6010.0, 5990.0};
  const auto st = extract_viewports(t, sn, c, g, 0.7, false);
  for (std::size_t i = 0; i < 16; ++i) {
    const auto pts = viewport_sample_coords(g, c, i, 0.7, false);
    for (std::size_t k = 0; k < pts.size(); ++k)
      ASSERT_NEAR(st.terrain[i * pts.size() + k], (plane(pts[k].x, pts[k].y) - plane(c.x, c.y)) / 1000.0, 1e-12);
  }
}

TEST(Extract, RotationByWholeStepsIsACyclicShift) {
  const ViewportGeometry g;
  for (std::uint64_t seed : {2u, 3u}) {
    const auto s = random_scene(seed);
    const double base = 0.123;
    const auto ref = extract_viewports(s.terrain, s.snow, s.center, g, base, false);
    for (std::size_t k = 1; k < 16; ++k) {
      const auto rot = extract_viewports(s.terrain, s.snow, s.center, g, base + static_cast<double>(k) * kStep, false);
      const auto shifted = cyclic_shift(ref, k);
      EXPECT_EQ(rot.terrain, shifted.terrain) << "k = " << k;
      EXPECT_EQ(rot.snow, shifted.snow) << "k = " << k;
    }
  }
}

TEST(Extract, FlippingTheMirroredMapRestoresTheStack) {
  // A map mirrored about the north axis through the query point, extracted
  // flipped, equals the original extracted unflipped.
  std::mt19937_64 rng(4);
  const Raster t = oracle::random_terrain(301, 301, 40.0, rng);
  Raster m = t.like();
  for (std::size_t r = 0; r < t.nrows(); ++r)
    for (std::size_t c = 0; c < t.ncols(); ++c) m.at(c, r) = t.at(t.ncols() - 1 - c, r);
  const Raster sn(301, 301, 0, 0, 40.0, 1.0);
  const Point center = t.cell_center(150, 140);
  const auto a = extract_viewports(t, sn, center, ViewportGeometry{}, 0.0, false);
  const auto b = extract_viewports(m, sn, center, ViewportGeometry{}, 0.0, true);
  for (std::size_t k = 0; k < a.terrain.size(); ++k) ASSERT_NEAR(a.terrain[k], b.terrain[k], 1e-12);
}

TEST(Extract, CenterOutsideIsGeometryError) {
  const Raster t(10, 10, 0, 0, 40.0);
  EXPECT_THROW(extract_viewports(t, t, {-1.0, 5.0}, ViewportGeometry{}), GeometryError);
}

TEST(Extract, NodataAndOutOfBoundsAreFlagged) {
  Raster t(200, 200, 0, 0, 40.0, 100.0);
  t.set_nodata_value(-9999.0);
  t.at(100, 90) = -9999.0;
  const Raster sn(200, 200, 0, 0, 40.0, 1.0);
  const auto st = extract_viewports(t, sn, t.cell_center(100, 100), ViewportGeometry{});
  EXPECT_TRUE(st.sampled_nodata);
  EXPECT_EQ(st.out_of_bounds, 0u);
  const auto edge = extract_viewports(t, sn, t.cell_center(2, 2), ViewportGeometry{});
  EXPECT_GT(edge.out_of_bounds, 0u);
}

TEST(Extract, NearestPatchCellApproachesZeroAsResolutionShrinks) {
  std::mt19937_64 rng(6);
  const Raster t = oracle::random_terrain(400, 400, 10.0, rng);
  const Raster sn(400, 400, 0, 0, 10.0, 1.0);
  const Point c{2003.0, 1997.0};
  double prev = INFINITY;
  for (double res : {40.0, 20.0, 10.0}) {
    ViewportGeometry g;
    g.resolution = res;
    g.radial_length = 8 * res * 2;
    g.tangential_width = 8 * res;
    g.snow_downscale = 2;
    const auto st = extract_viewports(t, sn, c, g);
    double worst = 0.0;
    for (std::size_t i = 0; i < 16; ++i)
      worst = std::max({worst, std::abs(st.terrain.at(i, 0, 3)), std::abs(st.terrain.at(i, 0, 4))});
    EXPECT_LT(worst, prev);
    prev = worst;
  }
}

TEST(BoundedQueue, PreservesOrderAndBlocksWhenFull) {
  BoundedQueue<int> q(2);
  std::atomic<int> pushed{0};
  std::thread producer([&] {
    for (int i = 0; i < 10; ++i) {
      q.push(i);
      ++pushed;
    }
    q.close();
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  EXPECT_LE(pushed.load(), 3);  // two queued plus one blocked in push
  std::vector<int> got;
  while (auto v = q.pop()) got.push_back(*v);
  producer.join();
  std::vector<int> want(10);
  std::iota(want.begin(), want.end(), 0);
  EXPECT_EQ(got, want);
}

TEST(BoundedQueue, CloseReleasesABlockedProducer) {
  BoundedQueue<int> q(1);
  q.push(1);
  bool result = true;
  std::thread producer([&] { result = q.push(2); });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  q.close();
  producer.join();
  EXPECT_FALSE(result);
}
