#pragma once

#include "relight/core.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace relight {

/// Row-major float raster; row 0 is the top of the image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c = 3, float fill = 0.f)
      : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

  float& at(int x, int y, int c = 0) { return data[(std::size_t(y) * width + x) * channels + c]; }
  float at(int x, int y, int c = 0) const {
    return data[(std::size_t(y) * width + x) * channels + c];
  }
  std::size_t pixel_count() const { return std::size_t(width) * height; }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

// ---------------------------------------------------------------------------
// sRGB transfer

inline double srgb_encode(double linear) {
  if (linear <= 0.0031308) return 12.92 * linear;
  return 1.055 * std::pow(linear, 1.0 / 2.4) - 0.055;
}

inline double srgb_decode(double encoded) {
  if (encoded <= 0.04045) return encoded / 12.92;
  return std::pow((encoded + 0.055) / 1.055, 2.4);
}

/// Clamp to [0,1] then apply the sRGB transfer function, per channel.
inline Image to_ldr(const Image& linear) {
  Image out = linear;
  for (float& v : out.data) v = float(srgb_encode(std::clamp(double(v), 0.0, 1.0)));
  return out;
}

// ---------------------------------------------------------------------------
// Little-endian helpers

namespace detail {

inline void put_f32_le(std::string& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  char buf[4];
  std::memcpy(buf, &bits, 4);
  out.append(buf, 4);
}

inline float get_f32(const unsigned char* p, bool little) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  const bool native_little = std::endian::native == std::endian::little;
  if (little != native_little) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

/// Cursor over a text header followed by binary payload.
struct HeaderReader {
  const std::string& bytes;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  }
  std::string token() {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw ParseError("unexpected end of header", pos);
    return bytes.substr(start, pos - start);
  }
  long integer() {
    const std::size_t at = (skip_space(), pos);
    const std::string t = token();
    char* end = nullptr;
    const long v = std::strtol(t.c_str(), &end, 10);
    if (*end != '\0' || v <= 0) throw ParseError("expected positive integer, got '" + t + "'", at);
    return v;
  }
  double real() {
    const std::size_t at = (skip_space(), pos);
    const std::string t = token();
    char* end = nullptr;
    const double v = std::strtod(t.c_str(), &end);
    if (*end != '\0') throw ParseError("expected number, got '" + t + "'", at);
    return v;
  }
  /// Consumes exactly one whitespace byte terminating the header.
  void end_of_header() {
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
      throw ParseError("missing header terminator", pos);
    ++pos;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// PFM (portable float map). Scanlines are stored bottom-to-top.

inline std::string encode_pfm(const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ArgumentError("PFM supports 1 or 3 channels, got " + std::to_string(img.channels));
  std::string out = (img.channels == 3 ? "PF\n" : "Pf\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n-1.0\n";
  out.reserve(out.size() + img.data.size() * 4);
  for (int y = img.height - 1; y >= 0; --y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) detail::put_f32_le(out, img.at(x, y, c));
  return out;
}

inline Image decode_pfm(const std::string& bytes) {
  detail::HeaderReader rd{bytes};
  const std::string magic = rd.token();
  int channels = 0;
  if (magic == "PF") {
    channels = 3;
  } else if (magic == "Pf") {
    channels = 1;
  } else {
    throw ParseError("not a PFM file (magic '" + magic + "')", 0);
  }
  const long w = rd.integer();
  const long h = rd.integer();
  const double scale = rd.real();
  if (scale == 0.0) throw ParseError("PFM scale must be non-zero", rd.pos);
  rd.end_of_header();
  const bool little = scale < 0;
  const std::size_t need = std::size_t(w) * std::size_t(h) * std::size_t(channels) * 4;
  if (bytes.size() - rd.pos < need)
    throw ParseError("truncated PFM payload: need " + std::to_string(need) + " bytes", bytes.size());
  Image img(int(w), int(h), channels);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + rd.pos;
  for (long y = h - 1; y >= 0; --y)
    for (long x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c, p += 4) img.at(int(x), int(y), c) = detail::get_f32(p, little);
  return img;
}

inline void write_pfm(const std::filesystem::path& path, const Image& img) {
  detail::write_file(path, encode_pfm(img));
}

inline Image read_pfm(const std::filesystem::path& path) {
  return decode_pfm(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// PNG (8-bit RGB, unfiltered scanlines, zlib-compressed)

namespace detail {

inline void put_u32_be(std::string& out, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.append(b, 4);
}

inline void png_chunk(std::string& out, const char* type, const std::string& payload) {
  put_u32_be(out, std::uint32_t(payload.size()));
  std::string body(type, 4);
  body += payload;
  out += body;
  put_u32_be(out, std::uint32_t(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size()))));
}

}  // namespace detail

/// Encodes an image whose values are already display-encoded in [0,1].
inline std::string encode_png(const Image& display) {
  if (display.channels != 3) throw ArgumentError("PNG encoder expects 3 channels");
  std::string raw;
  raw.reserve(display.pixel_count() * 3 + std::size_t(display.height));
  for (int y = 0; y < display.height; ++y) {
    raw.push_back('\0');
    for (int x = 0; x < display.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(double(display.at(x, y, c)), 0.0, 1.0);
        raw.push_back(char(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  }
  uLongf packed_size = compressBound(uLong(raw.size()));
  std::string packed(packed_size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size,
                reinterpret_cast<const Bytef*>(raw.data()), uLong(raw.size()), 6) != Z_OK)
    throw Error("zlib compression failed");
  packed.resize(packed_size);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string header;
  detail::put_u32_be(header, std::uint32_t(display.width));
  detail::put_u32_be(header, std::uint32_t(display.height));
  header += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit, RGB, deflate, no filter, no interlace
  detail::png_chunk(out, "IHDR", header);
  detail::png_chunk(out, "IDAT", packed);
  detail::png_chunk(out, "IEND", "");
  return out;
}

}  // namespace relight
