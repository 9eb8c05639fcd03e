#pragma once

// Raster images as [3, H, W] tensors in [0, 1], stored on disk as binary PPM
// (P6, 8-bit RGB). P5 (8-bit grey) files are accepted and replicated to three
// channels. Encoding quantises v to round(255 v), so decode(encode(decode(f)))
// reproduces decode(f) exactly.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "panda/binary_io.hpp"
#include "panda/error.hpp"
#include "panda/tensor.hpp"

namespace panda {

/// Axis-aligned box in pixel units; (x, y) is the top-left corner.
struct BoundingBox {
  double x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

namespace detail {

inline std::size_t ppm_header_field(const std::vector<char>& b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && std::isspace(static_cast<unsigned char>(b[pos]))) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
    v = v * 10 + static_cast<std::size_t>(b[pos] - '0');
    if (v > 1u << 20) throw FormatError("PPM header value too large", start);
    ++pos;
  }
  if (pos == start) throw FormatError("PPM header: expected a number", start);
  return v;
}

}  // namespace detail

inline Tensor decode_image(const std::vector<char>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '6' && bytes[1] != '5'))
    throw FormatError("not a binary PPM/PGM file", 0);
  const bool grey = bytes[1] == '5';
  std::size_t pos = 2;
  const std::size_t w = detail::ppm_header_field(bytes, pos);
  const std::size_t h = detail::ppm_header_field(bytes, pos);
  const std::size_t maxval = detail::ppm_header_field(bytes, pos);
  if (w == 0 || h == 0) throw FormatError("PPM with zero extent", pos);
  if (maxval != 255) throw FormatError("only 8-bit PPM (maxval 255) is supported", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw FormatError("PPM header not terminated", pos);
  ++pos;
  const std::size_t channels = grey ? 1 : 3;
  const std::size_t need = w * h * channels;
  if (bytes.size() - pos < need)
    throw FormatError("truncated PPM pixel data: need " + std::to_string(need) + " bytes", pos);
  Tensor img({3, h, w});
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const unsigned char v = px[(y * w + x) * channels + (grey ? 0 : c)];
        img.at(c, y, x) = static_cast<double>(v) / 255.0;
      }
  return img;
}

inline unsigned char quantize_channel(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Rounds every value to the nearest multiple of 1/255 (what a save/load cycle does).
inline Tensor quantize_image(Tensor img) {
  for (auto& v : img.values()) v = quantize_channel(v) / 255.0;
  return img;
}

inline std::vector<char> encode_image(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw InvalidArgument("encode_image expects [3,H,W], got " + shape_string(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  out.reserve(out.size() + 3 * w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize_channel(img.at(c, y, x))));
  return out;
}

inline Tensor load_image(const std::filesystem::path& path) { return decode_image(io::read_file(path)); }

inline void save_image(const std::filesystem::path& path, const Tensor& img) {
  const auto bytes = encode_image(img);
  io::write_file_atomic(path, bytes);
}

/// Bilinear sample with edge clamping at continuous pixel coordinates
/// (pixel centres sit at integer coordinates).
inline double sample_bilinear(const Tensor& img, std::size_t c, double y, double x) {
  const double H = static_cast<double>(img.dim(1)), W = static_cast<double>(img.dim(2));
  y = std::clamp(y, 0.0, H - 1.0);
  x = std::clamp(x, 0.0, W - 1.0);
  const auto y0 = static_cast<std::size_t>(std::floor(y)), x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, img.dim(1) - 1), x1 = std::min(x0 + 1, img.dim(2) - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
  const double bottom = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
  return top * (1 - fy) + bottom * fy;
}

/// Resamples `box` of `img` onto an out_h x out_w grid.
inline Tensor crop_resize(const Tensor& img, const BoundingBox& box, std::size_t out_h, std::size_t out_w) {
  if (!(box.w > 0 && box.h > 0)) throw InvalidArgument("crop box has zero area");
  Tensor out({img.dim(0), out_h, out_w});
  const double sy = box.h / static_cast<double>(out_h), sx = box.w / static_cast<double>(out_w);
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x)
        out.at(c, y, x) = sample_bilinear(img, c, box.y + (static_cast<double>(y) + 0.5) * sy - 0.5,
                                          box.x + (static_cast<double>(x) + 0.5) * sx - 0.5);
  return out;
}

}  // namespace panda
