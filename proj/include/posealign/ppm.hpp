#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "posealign/tensor.hpp"

namespace posealign {

/// Binary P6 with maxval 255. Values are clamped to [0,1] and rounded.
inline void write_ppm(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("write_ppm: expected a [3,H,W] image");
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  const auto v = image.data();
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int c = 0; c < 3; ++c) {
        const float x = std::clamp(v[(static_cast<std::size_t>(c) * h + i) * w + j], 0.0f, 1.0f);
        row[static_cast<std::size_t>(j) * 3 + c] = static_cast<unsigned char>(std::lround(x * 255.0f));
      }
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw std::runtime_error("short write to " + path);
}

namespace ppm_detail {

inline int read_header_int(std::istream& is, const std::string& path) {
  int c = is.peek();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else {
      is.get();
    }
    c = is.peek();
  }
  int v = -1;
  if (!(is >> v) || v < 0) throw std::runtime_error(path + ": malformed PPM header");
  return v;
}

}  // namespace ppm_detail

/// Reads a P6 image (maxval <= 255) into a [3,H,W] tensor in [0,1].
inline Tensor<float> read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  if (magic != "P6") throw std::runtime_error(path + ": not a binary PPM (P6)");
  const int w = ppm_detail::read_header_int(is, path);
  const int h = ppm_detail::read_header_int(is, path);
  const int maxval = ppm_detail::read_header_int(is, path);
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) throw std::runtime_error(path + ": unsupported PPM header");
  is.get();  // single whitespace before the raster
  std::vector<unsigned char> raster(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (is.gcount() != static_cast<std::streamsize>(raster.size())) throw std::runtime_error(path + ": truncated PPM raster");
  std::vector<float> v(raster.size());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        v[(static_cast<std::size_t>(c) * h + i) * w + j] =
            static_cast<float>(raster[(static_cast<std::size_t>(i) * w + j) * 3 + c]) / static_cast<float>(maxval);
  return Tensor<float>({3, h, w}, std::move(v));
}

}  // namespace posealign
