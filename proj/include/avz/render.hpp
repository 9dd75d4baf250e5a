#pragma once

// Hazard-map rendering: class colours alpha-blended over a grayscale
// hillshade, written as 8-bit RGB PNG through libpng.

#include <png.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "avz/errors.hpp"
#include "avz/raster.hpp"

namespace avz {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

inline constexpr Rgb kGreen{0x00, 0xA0, 0x00};
inline constexpr Rgb kYellow{0xFF, 0xD7, 0x00};
inline constexpr Rgb kRed{0xD0, 0x00, 0x00};
inline constexpr double kOverlayAlpha = 0.5;

inline Rgb hazard_color(HazardClass c) {
  switch (c) {
    case HazardClass::Green: return kGreen;
    case HazardClass::Yellow: return kYellow;
    case HazardClass::Red: return kRed;
  }
  return {};
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

/// out = (1 - alpha) * gray + alpha * colour, gray = 255 * shade, rounded
/// half away from zero.
inline Rgb blend(double shade, Rgb overlay, double alpha = kOverlayAlpha) {
  const double gray = 255.0 * std::clamp(shade, 0.0, 1.0);
  auto mix = [&](std::uint8_t c) { return to_byte((1.0 - alpha) * gray + alpha * c); };
  return {mix(overlay.r), mix(overlay.g), mix(overlay.b)};
}

struct Image {
  std::size_t width = 0, height = 0;
  std::vector<Rgb> pixels;  ///< row-major, row 0 at the top (north)
  Rgb& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  const Rgb& at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

/// Labels holds class indices 0..2; no-data or out-of-range cells show the
/// bare hillshade.
inline Image compose_hazard_image(const Raster& labels, const Raster& shade,
                                  double alpha = kOverlayAlpha) {
  require_same_grid(labels, shade, "render_hazard_png");
  Image img{labels.ncols(), labels.nrows(), std::vector<Rgb>(labels.size())};
  for (std::size_t row = 0; row < labels.nrows(); ++row)
    for (std::size_t col = 0; col < labels.ncols(); ++col) {
      const double s = shade.at(col, row);
      const double l = labels.at(col, row);
      const bool labelled = !labels.is_nodata(l) && l >= 0.0 && l < 3.0 && l == std::floor(l);
      img.at(col, row) =
          labelled ? blend(s, hazard_color(hazard_from_index(static_cast<std::size_t>(l))), alpha)
                   : blend(s, Rgb{}, 0.0);
    }
  return img;
}

inline void write_png(const Image& img, const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng error while writing " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(img.width * 3);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const Rgb& p = img.at(x, y);
      row[3 * x] = p.r, row[3 * x + 1] = p.g, row[3 * x + 2] = p.b;
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image read_png(const std::string& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw IoError("cannot read PNG " + path + ": " + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Image img{pi.width, pi.height, std::vector<Rgb>(std::size_t{pi.width} * pi.height)};
  static_assert(sizeof(Rgb) == 3);
  if (!png_image_finish_read(&pi, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw IoError("cannot decode PNG " + path + ": " + pi.message);
  }
  return img;
}

inline void render_hazard_png(const Raster& labels, const Raster& shade, const std::string& path) {
  write_png(compose_hazard_image(labels, shade), path);
}

}  // namespace avz
