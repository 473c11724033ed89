#pragma once

// Learnable synthetic face-crop fixtures. Each image carries its labels as
// visible structure: a coloured square whose grid cell and colour identify the
// class, whose brightness tracks arousal, and a bright bar near the bottom
// whose horizontal position tracks valence.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "fckit/datapipe.hpp"
#include "fckit/image.hpp"
#include "fckit/training.hpp"

namespace fckit {

struct SyntheticConfig {
  std::size_t samples = 64;
  int classes = kDefaultClasses;
  std::size_t frames_per_video = kClipLength;
  double noise = 0.02;
  std::uint64_t seed = kDefaultSeed;
  std::string extension = ".f32";  // or ".ppm"
};

struct SyntheticSet {
  std::vector<Sample> samples;  // paths relative to the output directory
  Tensorf images;               // (N,120,120,3)

  Labels labels() const {
    Labels y;
    for (const auto& s : samples) y.push(s);
    return y;
  }
  Dataset frames() const { return Dataset::from_tensor(images, labels()); }

  /// Clips over consecutive frames of each video, as a (C,10,120,120,3) tensor dataset.
  Dataset clips() const {
    const auto windows = window_sequences(samples);
    require(!windows.empty(), Errc::empty_dataset, "synthetic set has no full clips");
    const std::size_t steps = windows.front().frames.size();
    Tensorf x({windows.size(), steps, kImageSize, kImageSize, kImageChannels});
    Labels y;
    for (std::size_t c = 0; c < windows.size(); ++c) {
      for (std::size_t t = 0; t < steps; ++t) {
        const auto& f = windows[c].frames[t];
        const auto it = std::find_if(samples.begin(), samples.end(),
                                     [&](const Sample& s) { return s.video == f.video && s.frame == f.frame; });
        const auto i = static_cast<std::size_t>(it - samples.begin());
        std::copy_n(images.data() + i * kImageValues, kImageValues, x.data() + (c * steps + t) * kImageValues);
      }
      y.push(windows[c].label());
    }
    return Dataset::from_tensor(std::move(x), std::move(y));
  }
};

namespace detail {

inline std::array<float, 3> class_colour(int k) {
  static constexpr std::array<std::array<float, 3>, 7> palette{{{1.0f, 0.2f, 0.2f},
                                                                {0.2f, 1.0f, 0.2f},
                                                                {0.2f, 0.2f, 1.0f},
                                                                {1.0f, 1.0f, 0.2f},
                                                                {1.0f, 0.2f, 1.0f},
                                                                {0.2f, 1.0f, 1.0f},
                                                                {1.0f, 1.0f, 1.0f}}};
  return palette[static_cast<std::size_t>(k) % palette.size()];
}

// Valence range allowed for a class so the fixture passes the coherence filter.
inline std::pair<double, double> valence_range(int k) {
  if (k == Happiness) return {0.05, 0.95};
  if (k == Sadness) return {-0.95, -0.05};
  if (k == Neutral) return {-0.45, 0.45};
  return {-0.95, 0.95};
}

}  // namespace detail

inline Tensorf synth_image(int expression, double valence, double arousal, std::mt19937_64& rng, double noise) {
  std::uniform_real_distribution<float> jitter(static_cast<float>(-noise), static_cast<float>(noise));
  Tensorf img(image_shape());
  for (auto& v : img.values()) v = 0.1f + jitter(rng);
  auto paint = [&](std::size_t y0, std::size_t x0, std::size_t h, std::size_t w, std::array<float, 3> rgb, float gain) {
    for (std::size_t y = y0; y < std::min(y0 + h, kImageSize); ++y)
      for (std::size_t x = x0; x < std::min(x0 + w, kImageSize); ++x)
        for (std::size_t c = 0; c < kImageChannels; ++c)
          img[(y * kImageSize + x) * kImageChannels + c] = std::clamp(rgb[c] * gain + jitter(rng), 0.0f, 1.0f);
  };
  const auto cell = static_cast<std::size_t>(expression % 9);
  const float gain = static_cast<float>(0.5 + 0.4 * arousal);
  paint(4 + (cell / 3) * 30, 4 + (cell % 3) * 40, 26, 32, detail::class_colour(expression), gain);
  const auto bar_x = static_cast<std::size_t>(std::lround(50.0 + 45.0 * valence));
  paint(100, bar_x, 14, 20, {0.9f, 0.9f, 0.9f}, 1.0f);
  return img;
}

/// Deterministic for a given config. Videos hold frames_per_video consecutive
/// frames; labels drift slowly within a video and every sample is coherent.
inline SyntheticSet make_synthetic(const SyntheticConfig& cfg) {
  require(cfg.samples > 0 && cfg.classes >= 2 && cfg.frames_per_video > 0, Errc::invalid_argument,
          "synthetic: samples, classes and frames_per_video must be positive");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SyntheticSet set;
  set.images = Tensorf({cfg.samples, kImageSize, kImageSize, kImageChannels});
  int expression = 0;
  double v = 0, a = 0, dv = 0, da = 0;
  for (std::size_t i = 0; i < cfg.samples; ++i) {
    const std::size_t video = i / cfg.frames_per_video, frame = i % cfg.frames_per_video;
    if (frame == 0) {
      expression = static_cast<int>(video % static_cast<std::size_t>(cfg.classes));
      const auto [lo, hi] = detail::valence_range(expression);
      v = lo + (hi - lo) * unit(rng);
      a = -0.4 + 0.8 * unit(rng);
      dv = 0.01 * (unit(rng) - 0.5);
      da = 0.01 * (unit(rng) - 0.5);
    } else {
      const auto [lo, hi] = detail::valence_range(expression);
      v = std::clamp(v + dv, lo, hi);
      a = std::clamp(a + da, -0.45, 0.45);
    }
    Sample s;
    s.video = "synth" + std::to_string(video);
    s.frame = frame;
    s.path = s.video + "_" + std::to_string(frame) + cfg.extension;
    s.valence = std::round(v * 1e4) / 1e4;
    s.arousal = std::round(a * 1e4) / 1e4;
    s.expression = expression;
    const auto img = synth_image(expression, *s.valence, *s.arousal, rng, cfg.noise);
    std::copy(img.values().begin(), img.values().end(), set.images.data() + i * kImageValues);
    set.samples.push_back(std::move(s));
  }
  return set;
}

/// Writes every image plus manifest.csv into dir.
inline void write_synthetic(const SyntheticSet& set, const std::string& dir) {
  std::filesystem::create_directories(dir);
  parallel_for(set.samples.size(), [&](std::size_t i) {
    Tensorf img(image_shape());
    std::copy_n(set.images.data() + i * kImageValues, kImageValues, img.data());
    write_image((std::filesystem::path(dir) / set.samples[i].path).string(), img);
  });
  write_manifest((std::filesystem::path(dir) / "manifest.csv").string(), set.samples);
}

}  // namespace fckit
