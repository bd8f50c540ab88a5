#pragma once

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <memory>
#include <vector>

#include "metacs/core.hpp"

namespace metacs::io {

/// 16-bit grayscale heatmap, linearly scaled so the maximum maps to 65535
/// (an all-zero field writes black). Negative values clip to 0.
inline void write_png16(const std::filesystem::path& path, const RealField& f) {
  if (f.size() == 0) throw ValidationError("png: empty field");
  const double peak = f.maxCoeff();
  const double s = peak > 0.0 ? 65535.0 / peak : 0.0;
  std::vector<png_byte> rows(static_cast<std::size_t>(f.size() * 2));
  for (Index i = 0; i < f.size(); ++i) {
    const double v = std::clamp(f.data()[i] * s, 0.0, 65535.0);
    const auto q = static_cast<std::uint16_t>(std::lround(v));
    rows[static_cast<std::size_t>(2 * i)] = static_cast<png_byte>(q >> 8);
    rows[static_cast<std::size_t>(2 * i + 1)] = static_cast<png_byte>(q & 0xff);
  }

  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("png: cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("png: libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png: write failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(f.cols()), static_cast<png_uint_32>(f.rows()), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (Index r = 0; r < f.rows(); ++r) png_write_row(png, rows.data() + 2 * r * f.cols());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace metacs::io
