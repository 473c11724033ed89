#pragma once

// Face-crop images: 120x120x3 float tensors in [0,1], HWC.
//
// Two on-disk formats:
//   binary PPM ("P6", maxval 255), bytes scaled by 1/255
//   ".f32": 43,200 little-endian floats, validated to [0,1]

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <utility>

#include "fckit/error.hpp"
#include "fckit/model.hpp"
#include "fckit/tensor.hpp"
#include "fckit/weights_io.hpp"

namespace fckit {

inline constexpr std::size_t kImageValues = kImageSize * kImageSize * kImageChannels;

inline Shape image_shape() { return {kImageSize, kImageSize, kImageChannels}; }

namespace detail {

inline bool has_suffix(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// Reads one whitespace-delimited header token, skipping '#' comments.
inline std::string ppm_token(const std::string& bytes, std::size_t& pos, const std::string& path) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const auto start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  if (start == pos) fail(Errc::image_truncated, path + ": file ends inside PPM header");
  return bytes.substr(start, pos - start);
}

inline std::size_t ppm_number(const std::string& tok, const char* what, const std::string& path) {
  if (tok.empty() || tok.size() > 9 || !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; }))
    fail(Errc::image_format, path + ": bad PPM " + what + " '" + tok + "'");
  return std::stoul(tok);
}

}  // namespace detail

inline Tensorf decode_ppm(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
    fail(Errc::image_format, path + ": not a binary PPM (expected magic P6)");
  std::size_t pos = 2;
  const auto width = detail::ppm_number(detail::ppm_token(bytes, pos, path), "width", path);
  const auto height = detail::ppm_number(detail::ppm_token(bytes, pos, path), "height", path);
  const auto maxval = detail::ppm_number(detail::ppm_token(bytes, pos, path), "maxval", path);
  if (maxval != 255) fail(Errc::image_format, path + ": PPM maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (width != kImageSize || height != kImageSize)
    fail(Errc::image_dimensions, path + ": image is " + std::to_string(width) + "x" + std::to_string(height) +
                                     ", expected " + std::to_string(kImageSize) + "x" + std::to_string(kImageSize));
  if (pos >= bytes.size()) fail(Errc::image_truncated, path + ": file ends inside PPM header");
  ++pos;  // single whitespace byte before raster
  if (bytes.size() - pos < kImageValues)
    fail(Errc::image_truncated, path + ": PPM raster has " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                                    std::to_string(kImageValues));
  Tensorf img(image_shape());
  for (std::size_t i = 0; i < kImageValues; ++i)
    img[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
  return img;
}

inline Tensorf decode_f32(const std::string& bytes, const std::string& path = "<memory>") {
  if (bytes.size() != kImageValues * 4) {
    const auto code = bytes.size() < kImageValues * 4 ? Errc::image_truncated : Errc::image_dimensions;
    fail(code, path + ": raw image has " + std::to_string(bytes.size()) + " bytes, expected " +
                   std::to_string(kImageValues * 4));
  }
  Tensorf img(image_shape());
  for (std::size_t i = 0; i < kImageValues; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + b])) << (8 * b);
    const float v = std::bit_cast<float>(u);
    if (!(v >= 0.0f && v <= 1.0f))
      fail(Errc::image_range, path + ": value " + std::to_string(v) + " at index " + std::to_string(i) + " outside [0,1]");
    img[i] = v;
  }
  return img;
}

/// Dispatches on the ".f32" suffix; everything else is parsed as PPM.
inline Tensorf decode_image(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  return detail::has_suffix(path, ".f32") ? decode_f32(bytes, path) : decode_ppm(bytes, path);
}

inline void check_image(const Tensorf& img) {
  require(img.shape() == image_shape(), Errc::shape_mismatch,
          "image must be " + shape_str(image_shape()) + ", got " + shape_str(img.shape()));
}

inline std::string encode_ppm(const Tensorf& img) {
  check_image(img);
  std::string out = "P6\n" + std::to_string(kImageSize) + " " + std::to_string(kImageSize) + "\n255\n";
  out.reserve(out.size() + kImageValues);
  for (float v : img.values()) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0f))));
  }
  return out;
}

inline std::string encode_f32(const Tensorf& img) {
  check_image(img);
  std::string out;
  out.reserve(kImageValues * 4);
  for (float v : img.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline void write_image(const std::string& path, const Tensorf& img) {
  detail::write_file_bytes(path, detail::has_suffix(path, ".f32") ? encode_f32(img) : encode_ppm(img));
}

/// Augmentation parameters. Applied in order: crop+resize, rotate, flip, brightness.
struct AugmentRecipe {
  bool flip = false;
  double rotation_deg = 0.0;  // [-10, 10]
  double brightness = 1.0;    // [0.8, 1.2]
  bool crop = false;
  int crop_y = 0, crop_x = 0;  // offset of the 108x108 window, [0, 12]

  friend bool operator==(const AugmentRecipe&, const AugmentRecipe&) = default;
};

inline constexpr std::size_t kCropSize = 108;
inline constexpr int kMaxCropOffset = static_cast<int>(kImageSize - kCropSize);

inline AugmentRecipe draw_recipe(std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> rotation(-10.0, 10.0), brightness(0.8, 1.2);
  std::uniform_int_distribution<int> offset(0, kMaxCropOffset);
  AugmentRecipe r;
  r.flip = coin(rng);
  r.rotation_deg = rotation(rng);
  r.brightness = brightness(rng);
  r.crop = coin(rng);
  if (r.crop) {
    r.crop_y = offset(rng);
    r.crop_x = offset(rng);
  }
  return r;
}

namespace detail {

inline std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

/// Compact text form used in manifests, e.g. "flip=1;rot=3.5;bright=1.1;crop=4:7".
inline std::string to_string(const AugmentRecipe& r) {
  std::string s = "flip=" + std::string(r.flip ? "1" : "0") + ";rot=" + detail::exact(r.rotation_deg) +
                  ";bright=" + detail::exact(r.brightness) + ";crop=";
  s += r.crop ? std::to_string(r.crop_y) + ":" + std::to_string(r.crop_x) : "none";
  return s;
}

inline AugmentRecipe parse_recipe(std::string_view text) {
  AugmentRecipe r;
  auto bad = [&](const std::string& why) { fail(Errc::parse_error, "augment recipe '" + std::string(text) + "': " + why); };
  int seen = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(';', start);
    if (end == std::string_view::npos) end = text.size();
    const auto field = text.substr(start, end - start);
    const auto eq = field.find('=');
    if (eq == std::string_view::npos) bad("field without '='");
    const std::string key(field.substr(0, eq)), value(field.substr(eq + 1));
    try {
      std::size_t used = 0;
      if (key == "flip") {
        if (value != "0" && value != "1") bad("flip must be 0 or 1");
        r.flip = value == "1";
        seen |= 1;
      } else if (key == "rot") {
        r.rotation_deg = std::stod(value, &used);
        if (used != value.size() || !(std::abs(r.rotation_deg) <= 10.0)) bad("rot must be in [-10,10]");
        seen |= 2;
      } else if (key == "bright") {
        r.brightness = std::stod(value, &used);
        if (used != value.size() || !(r.brightness >= 0.8 && r.brightness <= 1.2)) bad("bright must be in [0.8,1.2]");
        seen |= 4;
      } else if (key == "crop") {
        if (value == "none") {
          r.crop = false;
        } else {
          const auto colon = value.find(':');
          if (colon == std::string::npos) bad("crop must be 'none' or 'y:x'");
          r.crop = true;
          r.crop_y = std::stoi(value.substr(0, colon));
          r.crop_x = std::stoi(value.substr(colon + 1));
          if (r.crop_y < 0 || r.crop_y > kMaxCropOffset || r.crop_x < 0 || r.crop_x > kMaxCropOffset)
            bad("crop offset outside [0," + std::to_string(kMaxCropOffset) + "]");
        }
        seen |= 8;
      } else {
        bad("unknown field '" + key + "'");
      }
    } catch (const std::logic_error&) {
      bad("bad number in '" + std::string(field) + "'");
    }
    start = end + 1;
  }
  if (seen != 15) bad("needs flip, rot, bright and crop");
  return r;
}

namespace detail {

// Bilinear sample with coordinates clamped to the image edge.
inline float bilinear(const Tensorf& img, double y, double x, std::size_t c) {
  const double maxc = static_cast<double>(kImageSize - 1);
  y = std::clamp(y, 0.0, maxc);
  x = std::clamp(x, 0.0, maxc);
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const auto y1 = std::min(y0 + 1, kImageSize - 1), x1 = std::min(x0 + 1, kImageSize - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  auto px = [&](std::size_t yy, std::size_t xx) {
    return static_cast<double>(img[(yy * kImageSize + xx) * kImageChannels + c]);
  };
  const double top = px(y0, x0) * (1 - fx) + px(y0, x1) * fx;
  const double bottom = px(y1, x0) * (1 - fx) + px(y1, x1) * fx;
  return static_cast<float>(top * (1 - fy) + bottom * fy);
}

template <class Map>
Tensorf resample(const Tensorf& img, Map map) {
  Tensorf out(image_shape());
  for (std::size_t y = 0; y < kImageSize; ++y)
    for (std::size_t x = 0; x < kImageSize; ++x) {
      const auto [sy, sx] = map(static_cast<double>(y), static_cast<double>(x));
      for (std::size_t c = 0; c < kImageChannels; ++c)
        out[(y * kImageSize + x) * kImageChannels + c] = bilinear(img, sy, sx, c);
    }
  return out;
}

}  // namespace detail

inline Tensorf augment(const Tensorf& image, const AugmentRecipe& r) {
  check_image(image);
  Tensorf img = image;
  if (r.crop) {
    const double scale = static_cast<double>(kCropSize) / static_cast<double>(kImageSize);
    img = detail::resample(img, [&](double y, double x) {
      return std::pair{r.crop_y + (y + 0.5) * scale - 0.5, r.crop_x + (x + 0.5) * scale - 0.5};
    });
  }
  if (r.rotation_deg != 0.0) {
    const double a = r.rotation_deg * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double mid = (static_cast<double>(kImageSize) - 1) / 2;
    img = detail::resample(img, [&](double y, double x) {
      const double dy = y - mid, dx = x - mid;
      return std::pair{mid + ca * dy - sa * dx, mid + sa * dy + ca * dx};
    });
  }
  if (r.flip) {
    for (std::size_t y = 0; y < kImageSize; ++y)
      for (std::size_t x = 0; x < kImageSize / 2; ++x)
        for (std::size_t c = 0; c < kImageChannels; ++c)
          std::swap(img[(y * kImageSize + x) * kImageChannels + c],
                    img[(y * kImageSize + (kImageSize - 1 - x)) * kImageChannels + c]);
  }
  const auto gain = static_cast<float>(r.brightness);
  for (auto& v : img.values()) v = std::clamp(v * gain, 0.0f, 1.0f);
  return img;
}

}  // namespace fckit
