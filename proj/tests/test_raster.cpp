#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "avz/raster.hpp"
#include "avz/render.hpp"
#include "oracles.hpp"

using namespace avz;

namespace {

Raster parse(const std::string& text) {
  std::istringstream in(text);
  return parse_ascii_grid(in);
}

std::string format(const Raster& r) {
  std::ostringstream out;
  format_ascii_grid(r, out);
  return out.str();
}

std::vector<std::string> tokens(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> t;
  for (std::string w; in >> w;) t.push_back(w);
  return t;
}

const char* kHeader2x2 = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 40\n";

}  // namespace

TEST(AsciiGrid, ParsesHeaderAndValues) {
  const Raster r = parse(std::string(kHeader2x2) + "1 2\n3 4\n");
  EXPECT_EQ(r.ncols(), 2u);
  EXPECT_EQ(r.nrows(), 2u);
  EXPECT_EQ(r.cell_size(), 40.0);
  EXPECT_EQ(r.at(0, 0), 1.0);
  EXPECT_EQ(r.at(1, 0), 2.0);
  EXPECT_EQ(r.at(0, 1), 3.0);
  EXPECT_EQ(r.at(1, 1), 4.0);
  EXPECT_FALSE(r.nodata_value());
}

TEST(AsciiGrid, FirstTextRowIsNorthernmost) {
  const Raster r = parse(std::string(kHeader2x2) + "1 2\n3 4\n");
  EXPECT_EQ(r.cell_center(0, 0).y, 60.0);
  EXPECT_EQ(r.cell_center(0, 1).y, 20.0);
  EXPECT_EQ(bilinear_sample(r, 20.0, 60.0).value, 1.0);
}

TEST(AsciiGrid, TooFewValuesIsDimensionError) {
  EXPECT_THROW(parse(std::string(kHeader2x2) + "1 2 3\n"), DimensionError);
}

TEST(AsciiGrid, TooManyValuesIsDimensionError) {
  EXPECT_THROW(parse(std::string(kHeader2x2) + "1 2 3 4 5\n"), DimensionError);
}

TEST(AsciiGrid, MalformedHeaderNamesTheKey) {
  try {
    parse("ncols 2\nnrows two\nxllcorner 0\nyllcorner 0\ncellsize 40\n1 2 3 4\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("nrows"), std::string::npos) << e.what();
  }
  try {
    parse("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\n1 2 3 4\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("cellsize"), std::string::npos) << e.what();
  }
}

TEST(AsciiGrid, NonNumericTokenReportsLine) {
  try {
    parse(std::string(kHeader2x2) + "1 2\n3 x\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 7u);
  }
}

TEST(AsciiGrid, NodataValueIsKept) {
  const Raster r = parse("ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n5 -9999\n");
  ASSERT_TRUE(r.nodata_value());
  EXPECT_TRUE(r.is_nodata(1, 0));
  EXPECT_FALSE(r.is_nodata(0, 0));
}

TEST(AsciiGrid, SingleZeroCellWritesZero) {
  const Raster r(1, 1, 0.0, 0.0, 1.0);
  const auto t = tokens(format(r));
  ASSERT_FALSE(t.empty());
  EXPECT_EQ(t.back(), "0");
}

TEST(AsciiGrid, RoundTripIsIdentity) {
  Raster r(3, 2, 100.5, -20.0, 12.5);
  r.set_nodata_value(-9999.0);
  r.values() = {1.0, -2.5, 3.25, -9999.0, 0.1, 1e-7};
  EXPECT_EQ(parse(format(r)), r);
}

TEST(AsciiGrid, RandomGridRoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1000.0);
  Raster r(50, 50, 1234.5, 678.25, 40.0);
  for (auto& v : r.values()) v = n(rng);
  const Raster back = parse(format(r));
  EXPECT_EQ(back, r);
  EXPECT_EQ(tokens(format(back)), tokens(format(r)));
}

TEST(AsciiGrid, RandomFilesRewriteTokenForToken) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-5000.0, 5000.0);
  std::uniform_int_distribution<int> dim(1, 20);
  for (int trial = 0; trial < 20; ++trial) {
    const int nc = dim(rng), nr = dim(rng);
    std::ostringstream f;
    f << "ncols " << nc << "\nnrows " << nr << "\nxllcorner " << format_number(u(rng)) << "\nyllcorner "
      << format_number(u(rng)) << "\ncellsize 25\n";
    for (int i = 0; i < nc * nr; ++i) f << format_number(u(rng)) << ((i + 1) % nc ? " " : "\n");
    EXPECT_EQ(tokens(format(parse(f.str()))), tokens(f.str()));
  }
}

TEST(AsciiGrid, FileRoundTrip) {
  const auto dir = oracle::scratch_dir("raster_io");
  Raster r(4, 3, 0.0, 0.0, 10.0);
  for (std::size_t i = 0; i < r.size(); ++i) r.values()[i] = 0.1 * static_cast<double>(i);
  const auto path = dir + "/r.asc";
  write_ascii_grid(r, path);
  EXPECT_EQ(load_ascii_grid(path), r);
  EXPECT_THROW(load_ascii_grid(dir + "/missing.asc"), IoError);
}

TEST(Bilinear, CellCentreReturnsCellValue) {
  std::mt19937_64 rng(1);
  Raster r(5, 4, 10.0, 20.0, 40.0);
  for (auto& v : r.values()) v = std::uniform_real_distribution<double>(-10, 10)(rng);
  for (std::size_t row = 0; row < r.nrows(); ++row)
    for (std::size_t col = 0; col < r.ncols(); ++col) {
      const auto p = r.cell_center(col, row);
      EXPECT_EQ(bilinear_sample(r, p.x, p.y).value, r.at(col, row));
    }
}

TEST(Bilinear, MidpointOfTwoCentres) {
  Raster r(2, 1, 0.0, 0.0, 40.0);
  r.values() = {1.0, 3.0};
  EXPECT_DOUBLE_EQ(bilinear_sample(r, 40.0, 20.0).value, 2.0);
}

TEST(Bilinear, UnitCellFormula) {
  // Corners v00 (south-west) = 0, v10 (south-east) = 1, v01 (north-west) = 2,
  // v11 (north-east) = 3 at unit spacing; offset (0.25, 0.75) from v00.
  Raster r(2, 2, 0.0, 0.0, 1.0);
  r.at(0, 1) = 0.0, r.at(1, 1) = 1.0, r.at(0, 0) = 2.0, r.at(1, 0) = 3.0;
  const double fx = 0.25, fy = 0.75;
  const double expected = (1 - fx) * (1 - fy) * 0 + fx * (1 - fy) * 1 + (1 - fx) * fy * 2 + fx * fy * 3;
  EXPECT_DOUBLE_EQ(expected, 1.75);
  EXPECT_NEAR(bilinear_sample(r, 0.5 + fx, 0.5 + fy).value, 1.75, 1e-15);
}

TEST(Bilinear, ReproducesAffineFields) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> coef(-3.0, 3.0);
  const double a = coef(rng), b = coef(rng), c = 1000.0 * coef(rng);
  const Raster r = oracle::field(40, 30, 25.0, [&](double x, double y) { return a * x + b * y + c; }, 500.0, 900.0);
  std::uniform_real_distribution<double> ux(500.0 + 12.5, 500.0 + 40 * 25.0 - 12.5),
      uy(900.0 + 12.5, 900.0 + 30 * 25.0 - 12.5);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double x = ux(rng), y = uy(rng);
    const auto s = bilinear_sample(r, x, y);
    EXPECT_FALSE(s.out_of_bounds);
    worst = std::max(worst, oracle::rel_err(s.value, a * x + b * y + c));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(Bilinear, ClampsOutsideTheGrid) {
  Raster r(2, 2, 0.0, 0.0, 10.0);
  r.values() = {1.0, 2.0, 3.0, 4.0};
  const auto s = bilinear_sample(r, -100.0, 1000.0);  // far north-west
  EXPECT_TRUE(s.out_of_bounds);
  EXPECT_EQ(s.value, 1.0);
  const auto e = bilinear_sample(r, 1000.0, -1000.0);  // far south-east
  EXPECT_EQ(e.value, 4.0);
}

TEST(Bilinear, NodataNeighbourFallsBackToNearestValid) {
  Raster r(2, 2, 0.0, 0.0, 10.0);
  r.set_nodata_value(-1.0);
  r.values() = {1.0, -1.0, 3.0, 4.0};  // north-east cell missing
  const auto s = bilinear_sample(r, 7.0, 13.0);  // closest to the north-west centre
  EXPECT_TRUE(s.nodata);
  EXPECT_EQ(s.value, 1.0);
}

TEST(Hillshade, FlatTerrainUnderZenithLightIsOne) {
  const Raster flat(6, 5, 0.0, 0.0, 40.0, 1234.0);
  const auto shade = hillshade(flat, 315.0, 90.0);
  for (double v : shade.values()) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Hillshade, SlopeFacingTheLightIsBrighter) {
  // Light from the west. Rising eastward means the slope faces west.
  const Raster west_facing = oracle::field(8, 8, 10.0, [](double x, double) { return 0.5 * x; });
  const Raster east_facing = oracle::field(8, 8, 10.0, [](double x, double) { return -0.5 * x; });
  EXPECT_GT(hillshade(west_facing, 270.0, 45.0).at(4, 4), hillshade(east_facing, 270.0, 45.0).at(4, 4));
}

TEST(Hillshade, FortyFiveDegreeSlopeFacingTheLightIsFullyLit) {
  // Surface falls toward the south (aspect 180), light from the south at 45.
  const Raster r = oracle::field(9, 9, 10.0, [](double, double y) { return y; });
  const Raster h = hillshade(r, 180.0, 45.0);
  for (std::size_t row = 1; row + 1 < r.nrows(); ++row)
    for (std::size_t col = 1; col + 1 < r.ncols(); ++col) EXPECT_NEAR(h.at(col, row), 1.0, 1e-12);
}

TEST(Hillshade, OutputStaysInUnitInterval) {
  std::mt19937_64 rng(5);
  const Raster t = oracle::random_terrain(40, 40, 10.0, rng);
  for (double az : {0.0, 90.0, 200.0, 315.0}) {
    const auto shade = hillshade(t, az, 30.0);
    for (double v : shade.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Hillshade, TooSmallIsDimensionError) {
  EXPECT_THROW(hillshade(Raster(2, 5, 0, 0, 1.0)), DimensionError);
}

TEST(Render, BlendArithmetic) {
  // (1 - 0.5) * 255 + 0.5 * 208 = 231.5 -> 232; 0.5 * 255 = 127.5 -> 128.
  EXPECT_EQ(blend(1.0, kRed), (Rgb{232, 128, 128}));
  EXPECT_EQ(blend(0.0, kGreen), (Rgb{0, 80, 0}));
  EXPECT_EQ(blend(1.0, kYellow), (Rgb{255, 235, 128}));
}

TEST(Render, AllGreenLabelsBlendEveryPixelTowardGreen) {
  const Raster labels(5, 4, 0, 0, 10.0, 0.0);
  const Raster shade(5, 4, 0, 0, 10.0, 0.6);
  const auto img = compose_hazard_image(labels, shade);
  for (const auto& p : img.pixels) EXPECT_EQ(p, blend(0.6, kGreen));
}

TEST(Render, SingleRedCellGivesOneRedPixel) {
  Raster labels(6, 5, 0, 0, 10.0, 0.0);
  labels.at(4, 1) = 2.0;
  const Raster shade(6, 5, 0, 0, 10.0, 0.5);
  const auto img = compose_hazard_image(labels, shade);
  int red = 0;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      if (img.at(x, y) == blend(0.5, kRed)) {
        ++red;
        EXPECT_EQ(x, 4u);
        EXPECT_EQ(y, 1u);
      }
  EXPECT_EQ(red, 1);
}

TEST(Render, PngRoundTrip) {
  const auto dir = oracle::scratch_dir("render");
  Raster labels(7, 3, 0, 0, 10.0, 0.0);
  labels.at(1, 1) = 1.0, labels.at(2, 2) = 2.0;
  const Raster shade(7, 3, 0, 0, 10.0, 0.3);
  render_hazard_png(labels, shade, dir + "/h.png");
  const auto img = read_png(dir + "/h.png");
  EXPECT_EQ(img.width, 7u);
  EXPECT_EQ(img.height, 3u);
  EXPECT_EQ(img.pixels, compose_hazard_image(labels, shade).pixels);
}

TEST(Render, GeometryMismatchThrows) {
  EXPECT_THROW(compose_hazard_image(Raster(3, 3, 0, 0, 1.0), Raster(4, 3, 0, 0, 1.0)), GeometryError);
}
