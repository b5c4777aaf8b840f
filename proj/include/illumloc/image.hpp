#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "illumloc/common.hpp"

namespace illumloc {

// Interleaved 8-bit RGB raster, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* at(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* at(int x, int y) const {
    return &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
  }
  bool empty() const { return rgb.empty(); }
  bool operator==(const Image&) const = default;
};

// Single-channel float raster used by the detector and descriptor.
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> data;

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  float& operator()(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  float operator()(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

// ITU-R BT.601 luma, range [0, 255].
inline GrayImage to_gray(const Image& img) {
  GrayImage g(img.width, img.height);
  for (std::size_t i = 0, n = g.data.size(); i < n; ++i) {
    const std::uint8_t* p = &img.rgb[i * 3];
    g.data[i] = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
  }
  return g;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write image " + path.string());
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw RuntimeFailure("short write to " + path.string());
}

namespace detail {
inline int read_ppm_int(std::istream& is, const std::string& name) {
  int c = is.peek();
  while (c == ' ' || c == '\n' || c == '\r' || c == '\t' || c == '#') {
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else {
      is.get();
    }
    c = is.peek();
  }
  int v = 0;
  if (!(is >> v)) throw ValidationError("malformed PPM header in " + name);
  return v;
}
}  // namespace detail

// Binary PPM (P6, maxval 255) only.
inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open image " + path.string());
  std::string magic(2, '\0');
  is.read(magic.data(), 2);
  if (magic != "P6") throw ValidationError("not a binary PPM (P6): " + path.string());
  const int w = detail::read_ppm_int(is, path.string());
  const int h = detail::read_ppm_int(is, path.string());
  const int maxval = detail::read_ppm_int(is, path.string());
  if (w <= 0 || h <= 0 || maxval != 255) {
    throw ValidationError("unsupported PPM geometry or maxval in " + path.string());
  }
  is.get();  // single whitespace after maxval
  Image img(w, h);
  if (!is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()))) {
    throw ValidationError("truncated PPM pixel data in " + path.string());
  }
  return img;
}

}  // namespace illumloc
